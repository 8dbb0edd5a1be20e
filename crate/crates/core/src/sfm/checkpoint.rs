//! JSON checkpoints: an ordered list of named tensors.
//!
//! Weights appear in registry order (see [`SfmWeights::NAMES`]), followed by the
//! batch-norm running statistics as buffers. `f64` values survive the JSON
//! roundtrip exactly.

use serde::{Deserialize, Serialize};

use super::config::SfmConfig;
use super::params::{SfmParams, SfmWeights};
use crate::ops::RunningStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: SfmConfig,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub buffers: Vec<NamedTensor>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn named(name: &str, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

const BUFFER_NAMES: [&str; 4] = [
    "local.bn1.running_mean",
    "local.bn1.running_var",
    "local.bn2.running_mean",
    "local.bn2.running_var",
];

impl Checkpoint {
    pub fn from_params(p: &SfmParams) -> Self {
        let params = p
            .weights
            .entries()
            .into_iter()
            .map(|(n, t)| named(n, t))
            .collect();
        let mut buffers = Vec::new();
        for (i, rs) in [&p.bn1_running, &p.bn2_running].into_iter().enumerate() {
            if let Some(rs) = rs {
                buffers.push(named(BUFFER_NAMES[2 * i], &rs.mean));
                buffers.push(named(BUFFER_NAMES[2 * i + 1], &rs.var));
            }
        }
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: p.config.clone(),
            params,
            buffers,
        }
    }

    /// Rebuilds parameters, checking every name and shape against `config`.
    pub fn into_params(self) -> Result<SfmParams, CheckpointError> {
        let mismatch = |m: String| CheckpointError::Mismatch(m);
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(mismatch(format!("schema_version {}", self.schema_version)));
        }
        self.config
            .validate()
            .map_err(|e| mismatch(e.to_string()))?;
        let shapes = SfmWeights::shapes(&self.config);
        if self.params.len() != SfmWeights::<Tensor>::NAMES.len() {
            return Err(mismatch(format!(
                "expected {} parameter tensors, found {}",
                SfmWeights::<Tensor>::NAMES.len(),
                self.params.len()
            )));
        }
        let mut it = self.params.into_iter();
        let weights = shapes.try_map(|name, shape| {
            let nt = it.next().expect("length checked");
            if nt.name != name || &nt.shape != shape {
                return Err(mismatch(format!(
                    "entry '{}' {:?} where '{}' {:?} was expected",
                    nt.name, nt.shape, name, shape
                )));
            }
            Tensor::new(nt.shape, nt.data).map_err(|e| mismatch(e.to_string()))
        })?;
        let c = self.config.channels;
        let find = |name: &str| -> Result<Option<Tensor>, CheckpointError> {
            match self.buffers.iter().find(|b| b.name == name) {
                None => Ok(None),
                Some(b) if b.shape == [c] => Tensor::new(b.shape.clone(), b.data.clone())
                    .map(Some)
                    .map_err(|e| mismatch(e.to_string())),
                Some(b) => Err(mismatch(format!(
                    "buffer '{}' has shape {:?}",
                    b.name, b.shape
                ))),
            }
        };
        let stats = |i: usize| -> Result<Option<RunningStats>, CheckpointError> {
            Ok(
                match (find(BUFFER_NAMES[2 * i])?, find(BUFFER_NAMES[2 * i + 1])?) {
                    (Some(mean), Some(var)) => Some(RunningStats { mean, var }),
                    _ => None,
                },
            )
        };
        Ok(SfmParams {
            bn1_running: stats(0)?,
            bn2_running: stats(1)?,
            config: self.config,
            weights,
        })
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(s)?)
    }
}
