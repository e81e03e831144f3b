use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and regularization settings shared by every branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_bert: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub proj_dim: usize,
    /// L2 coefficient on convolution kernels.
    pub l2: f64,
    pub hidden: usize,
    pub attn_dim: usize,
    /// Let the pooling attention see PAD states (ablation of the mask).
    pub attend_padding: bool,
    pub dense_units: usize,
    pub num_classes: usize,
    pub label_smoothing: f64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            max_len: 64,
            d_bert: 64,
            layers: 2,
            heads: 4,
            d_ff: 256,
            dropout: 0.35,
            kernel_sizes: vec![2, 3, 4],
            filters: 128,
            proj_dim: 256,
            l2: 1e-4,
            hidden: 128,
            attn_dim: 256,
            attend_padding: false,
            dense_units: 192,
            num_classes: 4,
            label_smoothing: 0.2,
            ln_eps: 1e-12,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Branch and head widths as printed for the full model, with small
    /// embedding/sequence sizes.
    pub fn tiny(vocab_size: usize, max_len: usize, d_bert: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_len,
            d_bert,
            d_ff: 4 * d_bert,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    pub fn fusion_dim(&self) -> usize {
        self.proj_dim + 2 * self.hidden
    }

    pub fn cnn_concat_dim(&self) -> usize {
        self.kernel_sizes.len() * self.filters
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_bert", self.d_bert),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("filters", self.filters),
            ("proj_dim", self.proj_dim),
            ("hidden", self.hidden),
            ("attn_dim", self.attn_dim),
            ("dense_units", self.dense_units),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_bert % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_bert {} not divisible by {} heads",
                self.d_bert, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k == 0 || k > self.max_len) {
            return Err(Error::Config(format!(
                "kernel sizes {:?} must lie in 1..={}",
                self.kernel_sizes, self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}
