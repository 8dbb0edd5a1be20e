use rand::Rng;

use super::config::SfmConfig;
use crate::error::{Result, TensorError};
use crate::ops::RunningStats;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

macro_rules! weight_registry {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// Every learnable tensor of one block, generic over the storage so the
        /// same layout serves owned tensors and tape handles.
        ///
        /// Field order is the registry order used for flattening and checkpoints.
        #[derive(Clone, Debug, PartialEq)]
        pub struct SfmWeights<T> {
            $(pub $field: T,)*
        }

        impl<T> SfmWeights<T> {
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn entries(&self) -> Vec<(&'static str, &T)> {
                vec![$(($name, &self.$field)),*]
            }

            pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$(($name, &mut self.$field)),*]
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<SfmWeights<U>, E> {
                Ok(SfmWeights { $($field: f($name, &self.$field)?,)* })
            }
        }
    };
}

weight_registry! {
    local_conv1 => "local.conv1.weight",
    local_bn1_gain => "local.bn1.gain",
    local_bn1_bias => "local.bn1.bias",
    local_conv2 => "local.conv2.weight",
    local_bn2_gain => "local.bn2.gain",
    local_bn2_bias => "local.bn2.bias",
    ln1_gain => "global.ln1.gain",
    ln1_bias => "global.ln1.bias",
    wq => "global.attn.wq",
    bq => "global.attn.bq",
    wk => "global.attn.wk",
    bk => "global.attn.bk",
    wv => "global.attn.wv",
    bv => "global.attn.bv",
    wo => "global.attn.wo",
    bo => "global.attn.bo",
    log_gamma => "global.attn.log_gamma",
    ln2_gain => "global.ln2.gain",
    ln2_bias => "global.ln2.bias",
    ffn_w1 => "global.ffn.w1",
    ffn_b1 => "global.ffn.b1",
    ffn_w2 => "global.ffn.w2",
    ffn_b2 => "global.ffn.b2",
    spatial_w => "spatial.conv.weight",
    spatial_b => "spatial.conv.bias",
    channel_w1 => "channel.conv1.weight",
    channel_b1 => "channel.conv1.bias",
    channel_w2 => "channel.conv2.weight",
    channel_b2 => "channel.conv2.bias",
    fusion_w => "fusion.conv.weight",
    fusion_b => "fusion.conv.bias",
}

/// Tape handles for one block's weights.
pub type SfmVars = SfmWeights<Var>;

impl SfmWeights<Vec<usize>> {
    /// Shape of every registry entry for `config`.
    pub fn shapes(config: &SfmConfig) -> Self {
        let c = config.channels;
        let d = config.ffn_hidden();
        let s = config.se_hidden();
        SfmWeights {
            local_conv1: vec![c, c, 3, 3],
            local_bn1_gain: vec![c],
            local_bn1_bias: vec![c],
            local_conv2: vec![c, c, 3, 3],
            local_bn2_gain: vec![c],
            local_bn2_bias: vec![c],
            ln1_gain: vec![c],
            ln1_bias: vec![c],
            wq: vec![c, c],
            bq: vec![c],
            wk: vec![c, c],
            bk: vec![c],
            wv: vec![c, c],
            bv: vec![c],
            wo: vec![c, c],
            bo: vec![c],
            log_gamma: vec![config.heads],
            ln2_gain: vec![c],
            ln2_bias: vec![c],
            ffn_w1: vec![c, d],
            ffn_b1: vec![d],
            ffn_w2: vec![d, c],
            ffn_b2: vec![c],
            spatial_w: vec![1, c, 1, 1],
            spatial_b: vec![1],
            channel_w1: vec![s, c, 1, 1],
            channel_b1: vec![s],
            channel_w2: vec![c, s, 1, 1],
            channel_b2: vec![c],
            fusion_w: vec![c, c, 1, 1],
            fusion_b: vec![c],
        }
    }
}

/// Number of learnable scalars in a block built from `config`.
pub fn param_count(config: &SfmConfig) -> usize {
    SfmWeights::shapes(config)
        .entries()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Learnable weights plus the batch-norm running statistics of the local branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmParams {
    pub config: SfmConfig,
    pub weights: SfmWeights<Tensor>,
    pub bn1_running: Option<RunningStats>,
    pub bn2_running: Option<RunningStats>,
}

impl SfmParams {
    /// Random initialization with the fusion convolution at zero, so a fresh
    /// block computes the identity.
    pub fn init<R: Rng + ?Sized>(config: &SfmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = SfmWeights::shapes(config);
        let weights = shapes.try_map(|name, shape| -> Result<Tensor> {
            let fan_in = |s: &[usize]| s[1..].iter().product::<usize>().max(1) as f64;
            Ok(match name {
                "local.conv1.weight" | "local.conv2.weight" => {
                    Tensor::randn(shape, (2.0 / fan_in(shape)).sqrt(), rng)
                }
                "spatial.conv.weight" | "channel.conv1.weight" | "channel.conv2.weight" => {
                    Tensor::randn(shape, 1.0 / fan_in(shape).sqrt(), rng)
                }
                "global.attn.wq" | "global.attn.wk" | "global.attn.wv" | "global.attn.wo"
                | "global.ffn.w1" | "global.ffn.w2" => {
                    Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng)
                }
                "global.attn.log_gamma" => Tensor::full(shape, config.gamma_init.ln()),
                n if n.ends_with(".gain") => Tensor::ones(shape),
                _ => Tensor::zeros(shape),
            })
        })?;
        Ok(SfmParams {
            config: config.clone(),
            weights,
            bn1_running: Some(RunningStats::fresh(config.channels)),
            bn2_running: Some(RunningStats::fresh(config.channels)),
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// All weights concatenated in registry order.
    pub fn flatten(&self) -> Tensor {
        let data = self
            .weights
            .entries()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        Tensor::from_vec(data)
    }

    /// Inverse of [`SfmParams::flatten`]; running statistics are taken from `self`.
    pub fn with_flat(&self, flat: &Tensor) -> Result<Self> {
        let shapes = SfmWeights::shapes(&self.config);
        if flat.len() != self.param_count() {
            return Err(TensorError::dim(
                "with_flat",
                flat.shape(),
                &[self.param_count()],
            ));
        }
        let mut off = 0;
        let weights = shapes.try_map(|_, shape| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat.data()[off..off + n].to_vec());
            off += n;
            t
        })?;
        Ok(SfmParams {
            weights,
            ..self.clone()
        })
    }

    /// Records every weight as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> SfmVars {
        self.weights
            .try_map(|_, t| Ok::<_, TensorError>(tape.leaf(t.clone())))
            .expect("leaf creation is infallible")
    }

    /// Views into a flat parameter vector already on the tape, in registry order.
    pub fn views(config: &SfmConfig, tape: &mut Tape, flat: Var) -> Result<SfmVars> {
        let mut off = 0;
        SfmWeights::shapes(config).try_map(|_, shape| {
            let v = tape.view(flat, off, shape);
            off += shape.iter().product::<usize>();
            v
        })
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.weights
            .log_gamma
            .data()
            .iter()
            .map(|v| v.exp())
            .collect()
    }
}
