//! Toy dense detector: an optional fusion block followed by a 1×1 head.
//!
//! Every pixel `(i, j)` owns the anchor point `(x, y) = (j, i)`. The head
//! emits one class logit plus, for each box side (left, top, right, bottom),
//! logits over `n_bins` integer distances from the anchor. A ground-truth box
//! is matched to the single anchor nearest its centre.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::toy::ToySample;
use crate::bbox::BBox;
use crate::error::{Result, TensorError};
use crate::loss::{self, LossWeights};
use crate::ops::NormMode;
use crate::sfm::{sfm_forward, SfmConfig, SfmParams, SfmTrace, SfmVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub n_bins: usize,
    pub weights: LossWeights,
    /// Initial class prior; the class bias starts at `logit(prior)`.
    pub class_prior: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            n_bins: loss::DEFAULT_BINS,
            weights: LossWeights::default(),
            class_prior: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDetector {
    /// `None` replaces the block with the identity (ablation).
    pub sfm: Option<SfmParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub config: DetectorConfig,
}

/// Positive anchors of one image, in box order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub cells: Vec<(usize, usize)>,
    pub boxes: Vec<BBox>,
    /// `[l, t, r, b]` distances per box, in pixels.
    pub side_targets: Vec<[f64; 4]>,
}

/// Matches each box to the anchor point closest to its centre. When two boxes
/// share an anchor only the first is kept.
pub fn assign(boxes: &[BBox], h: usize, w: usize, n_bins: usize) -> Result<Assignment> {
    let mut out = Assignment {
        cells: Vec::new(),
        boxes: Vec::new(),
        side_targets: Vec::new(),
    };
    let max_d = (n_bins - 1) as f64;
    for b in boxes {
        b.validate()?;
        let (cx, cy) = b.center();
        let j = (cx.round() as usize).min(w - 1);
        let i = (cy.round() as usize).min(h - 1);
        if out.cells.contains(&(i, j)) {
            continue;
        }
        let (ax, ay) = (j as f64, i as f64);
        let d = [ax - b.x1, ay - b.y1, b.x2 - ax, b.y2 - ay].map(|v| v.clamp(0.0, max_d));
        out.cells.push((i, j));
        out.boxes.push(*b);
        out.side_targets.push(d);
    }
    Ok(out)
}

/// Tape handles for the trainable tensors of a [`ToyDetector`].
pub struct DetectorVars {
    pub sfm: Option<SfmVars>,
    pub head_w: Var,
    pub head_b: Var,
}

pub struct DetectorPass {
    pub loss: Var,
    pub sfm: Option<SfmTrace>,
}

impl ToyDetector {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        sfm: Option<&SfmConfig>,
        config: DetectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let sfm = match sfm {
            Some(cfg) => {
                if cfg.channels != channels {
                    return Err(TensorError::Config(format!(
                        "block channels {} differ from input channels {channels}",
                        cfg.channels
                    )));
                }
                Some(SfmParams::init(cfg, rng)?)
            }
            None => None,
        };
        if config.n_bins < 2 || !(config.class_prior > 0.0 && config.class_prior < 1.0) {
            return Err(TensorError::Config(
                "n_bins >= 2 and 0 < class_prior < 1 required".into(),
            ));
        }
        let k = 1 + 4 * config.n_bins;
        let head_w = Tensor::randn(&[k, channels, 1, 1], 1.0 / (channels as f64).sqrt(), rng);
        let mut head_b = Tensor::zeros(&[k]);
        head_b.data_mut()[0] = (config.class_prior / (1.0 - config.class_prior)).ln();
        Ok(ToyDetector {
            sfm,
            head_w,
            head_b,
            config,
        })
    }

    pub fn output_channels(&self) -> usize {
        1 + 4 * self.config.n_bins
    }

    /// Trainable tensors in a fixed order: block registry, then head weight and bias.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = match self.sfm.as_mut() {
            Some(p) => p
                .weights
                .entries_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect(),
            None => Vec::new(),
        };
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn leaves(&self, tape: &mut Tape) -> DetectorVars {
        DetectorVars {
            sfm: self.sfm.as_ref().map(|p| p.leaves(tape)),
            head_w: tape.leaf(self.head_w.clone()),
            head_b: tape.leaf(self.head_b.clone()),
        }
    }

    pub fn grads_in_order(&self, vars: &DetectorVars, grads: &crate::tape::Grads) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = match &vars.sfm {
            Some(v) => v
                .entries()
                .into_iter()
                .map(|(_, &var)| grads.wrt(var))
                .collect(),
            None => Vec::new(),
        };
        out.push(grads.wrt(vars.head_w));
        out.push(grads.wrt(vars.head_b));
        out
    }

    /// Records the loss of one sample on `tape`.
    pub fn sample_loss(
        &self,
        tape: &mut Tape,
        vars: &DetectorVars,
        sample: &ToySample,
        mode: NormMode,
    ) -> Result<DetectorPass> {
        let s = sample.image.shape();
        let (h, w) = (s[1], s[2]);
        let nb = self.config.n_bins;
        let k = self.output_channels();
        let x = tape.leaf(sample.image.clone());
        let (features, trace) = match (&self.sfm, &vars.sfm) {
            (Some(p), Some(v)) => {
                let tr = sfm_forward(tape, x, v, p, mode)?;
                (tr.output, Some(tr))
            }
            _ => (x, None),
        };
        let out = tape.conv2d(features, vars.head_w, Some(vars.head_b), 1, 0)?;
        let flat = tape.reshape(out, &[k, h * w])?;
        let per_cell = tape.transpose(flat)?;

        let lw = self.config.weights;
        let a = assign(&sample.boxes, h, w, nb)?;
        let m = a.cells.len();

        let logits = tape.slice_cols(per_cell, 0, 1)?;
        let probs = tape.activation(crate::ops::Activation::Sigmoid, logits);
        let mut cls_t = Tensor::zeros(&[h * w, 1]);
        for &(i, j) in &a.cells {
            cls_t.data_mut()[i * w + j] = 1.0;
        }
        let cls = loss::bce_tape(tape, probs, &cls_t)?;
        let mut total = tape.scale(cls, lw.cls * (h * w) as f64);

        if m > 0 {
            let mut idx = Vec::with_capacity(m * 4 * nb);
            for &(i, j) in &a.cells {
                let base = (i * w + j) * k + 1;
                idx.extend(base..base + 4 * nb);
            }
            let dist_logits = tape.gather(per_cell, &idx)?;
            let dist_logits = tape.reshape(dist_logits, &[4 * m, nb])?;
            let targets: Vec<f64> = a.side_targets.iter().flatten().copied().collect();
            let dfl = loss::dfl_tape(tape, dist_logits, &targets)?;
            let dfl = tape.scale(dfl, lw.dfl / 4.0);

            let probs = tape.softmax_rows(dist_logits);
            let bins = tape.leaf(Tensor::new(
                vec![nb, 1],
                (0..nb).map(|b| b as f64).collect(),
            )?);
            let expected = tape.matmul(probs, bins)?;
            let expected = tape.reshape(expected, &[m, 4])?;
            let sign = tape.leaf(Tensor::from_vec(vec![-1.0, -1.0, 1.0, 1.0]));
            let offsets = tape.mul(expected, sign)?;
            let anchors: Vec<f64> = a
                .cells
                .iter()
                .flat_map(|&(i, j)| [j as f64, i as f64, j as f64, i as f64])
                .collect();
            let anchors = tape.leaf(Tensor::new(vec![m, 4], anchors)?);
            let pred = tape.add(anchors, offsets)?;
            let gt: Vec<f64> = a.boxes.iter().flat_map(|b| b.to_array()).collect();
            let gt = tape.leaf(Tensor::new(vec![m, 4], gt)?);
            let ciou = loss::ciou_tape(tape, pred, gt)?;
            let ciou_sum = tape.sum(ciou);
            let box_loss = tape.scale(ciou_sum, -lw.bbox);
            let box_const = tape.leaf(Tensor::scalar(lw.bbox * m as f64));
            let box_loss = tape.add(box_loss, box_const)?;

            total = tape.add(total, box_loss)?;
            total = tape.add(total, dfl)?;
        }
        let loss = tape.scale(total, 1.0 / m.max(1) as f64);
        Ok(DetectorPass { loss, sfm: trace })
    }

    /// Loss of one sample without recording gradients or touching running stats.
    pub fn eval_loss(&self, sample: &ToySample, mode: NormMode) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let pass = self.sample_loss(&mut tape, &vars, sample, mode)?;
        Ok(tape.value(pass.loss).data()[0])
    }

    /// Raw head output `(1 + 4·n_bins)×H×W` for one image.
    pub fn predict(&self, image: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let x = tape.leaf(image.clone());
        let f = match (&self.sfm, &vars.sfm) {
            (Some(p), Some(v)) => sfm_forward(&mut tape, x, v, p, mode)?.output,
            _ => x,
        };
        let out = tape.conv2d(f, vars.head_w, Some(vars.head_b), 1, 0)?;
        Ok(tape.value(out).clone())
    }
}
