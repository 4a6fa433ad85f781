//! Attention mechanisms and spatial token operators: window partitioning
//! with cyclic shifts and masks, windowed multi-head self-attention,
//! cross-covariance (channel) attention, and patch embed/merge/expand.

mod msa;
mod patch;
mod window;
mod xca;

pub use msa::{merge_heads, relative_index, split_heads, RelativePositionBias, WindowAttention};
pub use patch::{PatchEmbed, PatchExpand, PatchMerge};
pub use window::{
    cyclic_shift, cyclic_unshift, region_ids, shift_attention_mask, window_partition,
    window_reverse, MASK_VALUE,
};
pub use xca::{XcaBlock, XcaOutputs};

use crate::tensor::TensorError;

/// Window geometry of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Pixels per window side, M.
    pub window: usize,
    /// Cyclic shift; 0 for unshifted layers, `M/2` for shifted ones.
    pub shift: usize,
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.window == 0 || self.shift >= self.window {
            return Err(TensorError::Invalid {
                op: "window_config",
                msg: format!(
                    "window {} must be positive and shift {} < window",
                    self.window, self.shift
                ),
            });
        }
        Ok(())
    }
}

/// Head geometry shared by both attention flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    /// Embedding width C.
    pub dim: usize,
    /// Head count h; must divide C.
    pub heads: usize,
}

impl AttentionSpec {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention_spec",
                msg: format!(
                    "embed dim {} must be a positive multiple of head count {}",
                    self.dim, self.heads
                ),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_rejects_indivisible_heads() {
        assert!(AttentionSpec { dim: 10, heads: 3 }.validate().is_err());
        assert!(AttentionSpec { dim: 12, heads: 3 }.validate().is_ok());
        assert!(AttentionSpec { dim: 0, heads: 1 }.validate().is_err());
    }

    #[test]
    fn window_config_bounds_shift() {
        assert!(WindowConfig { window: 4, shift: 2 }.validate().is_ok());
        assert!(WindowConfig { window: 4, shift: 4 }.validate().is_err());
        assert!(WindowConfig { window: 0, shift: 0 }.validate().is_err());
    }
}
