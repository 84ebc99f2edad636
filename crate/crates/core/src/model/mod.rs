//! Trajectory encoder: embeddings, channel attention, stacked
//! attention + dilated-convolution blocks, and two-level attention pooling.
//!
//! Internally every sequence is laid out as `[channels × time]`; the
//! self-attention layer transposes to `[time × channels]` and back.

mod encoder;

pub use encoder::{AttentionProbe, BlockParams, ConvParams, EncoderParams, MhsaParams, TargetParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::geo::INTERVALS_PER_DAY;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaTcnConfig {
    /// Hidden channel count.
    pub d: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub lat_cells: usize,
    pub lon_cells: usize,
    pub lat_dim: usize,
    pub lon_dim: usize,
    pub interval_dim: usize,
    pub velocity_dim: usize,
    /// Channel-attention bottleneck is `d / reduction`.
    pub reduction: usize,
    pub disable_mhsa: bool,
    pub disable_aggregation: bool,
}

impl Default for MaTcnConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_heads: 8,
            n_blocks: 4,
            kernel_size: 10,
            dilation_base: 2,
            lat_cells: 43,
            lon_cells: 90,
            lat_dim: 16,
            lon_dim: 16,
            interval_dim: 8,
            velocity_dim: 8,
            reduction: 4,
            disable_mhsa: false,
            disable_aggregation: false,
        }
    }
}

impl MaTcnConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads.max(1)
    }

    pub fn input_dim(&self) -> usize {
        self.lat_dim + self.lon_dim + self.interval_dim + self.velocity_dim
    }

    pub fn interval_vocab(&self) -> usize {
        INTERVALS_PER_DAY
    }

    /// Dilation shared by both conv sub-blocks of `level` (1-based).
    pub fn dilation(&self, level: usize) -> usize {
        self.dilation_base.pow(level as u32 - 1)
    }

    pub fn receptive_field(&self) -> u64 {
        receptive_field(self.n_blocks as u64, self.kernel_size as u64, self.dilation_base as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.d >= 1, "d must be positive"),
            (self.n_heads >= 1, "n_heads must be positive"),
            (self.head_dim() >= 1, "d / n_heads must be at least 1"),
            (self.n_blocks >= 1, "n_blocks must be positive"),
            (self.kernel_size >= 1, "kernel_size must be positive"),
            (self.dilation_base >= 1, "dilation_base must be positive"),
            (self.lat_cells >= 1 && self.lon_cells >= 1, "grid vocabulary must be non-empty"),
            (self.input_dim() >= 1, "embedding dims must not all be zero"),
            (self.reduction >= 1 && self.d / self.reduction.max(1) >= 1, "reduction too large for d"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ModelError::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Receptive field of `n_blocks` double blocks with kernel `k` and dilation
/// base `b`: `2(b^n − 1)(k − 1)/(b − 1) + 1`, or `2n(k − 1) + 1` when `b = 1`.
pub fn receptive_field(n_blocks: u64, k: u64, b: u64) -> u64 {
    if k <= 1 {
        return 1;
    }
    if b <= 1 {
        return 2 * n_blocks * (k - 1) + 1;
    }
    2 * (b.pow(n_blocks as u32) - 1) * (k - 1) / (b - 1) + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfs_examples() {
        assert_eq!(receptive_field(4, 10, 2), 271);
        assert_eq!(receptive_field(1, 2, 2), 3);
        assert_eq!(receptive_field(3, 1, 5), 1);
        assert_eq!(receptive_field(1, 1, 2), 1);
        assert_eq!(receptive_field(2, 3, 1), 9);
        assert_eq!(MaTcnConfig::default().receptive_field(), 271);
    }

    #[test]
    fn rfs_matches_summed_dilations() {
        // each level adds two convs of span (k-1)·b^(l-1)
        for n in 1..6u64 {
            for k in 1..8u64 {
                for b in 1..5u64 {
                    let direct: u64 = (0..n).map(|l| 2 * (k - 1) * b.pow(l as u32)).sum::<u64>() + 1;
                    assert_eq!(receptive_field(n, k, b), direct, "{n} {k} {b}");
                }
            }
        }
    }

    #[test]
    fn config_defaults() {
        let c = MaTcnConfig::default();
        assert_eq!(c.head_dim(), 8);
        assert_eq!(c.input_dim(), 48);
        assert_eq!((1..=4).map(|l| c.dilation(l)).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        c.validate().unwrap();
        let bad = MaTcnConfig { n_heads: 65, ..c };
        assert!(bad.validate().is_err());
    }
}
