//! Run settings: built-in defaults, overridden by an optional TOML file,
//! overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfmkit_core::train::SgdConfig;
use sfmkit_data::SizeThresholds;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub heads: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `[small_max_area, medium_max_area]` in pixels².
    pub thresholds: [f64; 2],
    pub steps: usize,
    pub samples: usize,
    pub channels: usize,
    pub size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let t = SizeThresholds::default();
        RunConfig {
            seed: 0,
            heads: 8,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: 2,
            thresholds: [t.small_max_area, t.medium_max_area],
            steps: 500,
            samples: 16,
            channels: 8,
            size: 16,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn size_thresholds(&self) -> Result<SizeThresholds, CliError> {
        SizeThresholds::new(self.thresholds[0], self.thresholds[1])
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn summary(&self) -> String {
        format!(
            "seed={} heads={} lr={} momentum={} weight_decay={} batch_size={} thresholds={},{} \
             steps={} samples={} channels={} size={}",
            self.seed,
            self.heads,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.thresholds[0],
            self.thresholds[1],
            self.steps,
            self.samples,
            self.channels,
            self.size
        )
    }
}

/// Parses `"s_area,m_area"`.
pub fn parse_thresholds(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected two comma-separated areas, got '{s}'"));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    Ok([num(a)?, num(b)?])
}
