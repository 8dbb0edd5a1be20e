use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::ops::{BN_EPS, BN_MOMENTUM, L2_EPS, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfmConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub se_reduction: usize,
    pub gamma_init: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
    pub l2_eps: f64,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            channels: 64,
            heads: 8,
            ffn_expansion: 2.0,
            se_reduction: 4,
            gamma_init: 1.0,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            ln_eps: LN_EPS,
            l2_eps: L2_EPS,
        }
    }
}

impl SfmConfig {
    pub fn new(channels: usize) -> Self {
        SfmConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_se_reduction(mut self, r: usize) -> Self {
        self.se_reduction = r;
        self
    }

    pub fn with_ffn_expansion(mut self, e: f64) -> Self {
        self.ffn_expansion = e;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.channels == 0 || self.heads == 0 {
            return bad("channels and heads must be positive".into());
        }
        if !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.se_reduction == 0 || self.channels / self.se_reduction < 1 {
            return bad(format!(
                "channels / se_reduction must be at least 1 (C={}, r={})",
                self.channels, self.se_reduction
            ));
        }
        if !(self.ffn_expansion > 0.0) || !(self.gamma_init > 0.0) {
            return bad("ffn_expansion and gamma_init must be positive".into());
        }
        if !(self.bn_eps > 0.0 && self.ln_eps > 0.0 && self.l2_eps > 0.0) {
            return bad("eps values must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.channels as f64 * self.ffn_expansion).round() as usize).max(1)
    }

    pub fn se_hidden(&self) -> usize {
        self.channels / self.se_reduction
    }
}
