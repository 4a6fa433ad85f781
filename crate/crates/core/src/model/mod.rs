//! Segmentation network assembly: hierarchical windowed-attention encoder,
//! mirrored decoder, cross-covariance attentive skips, training loop, and
//! checkpointing.

mod checkpoint;
mod train;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    evaluate, grad_check_model, loss, train_epoch, train_step, AdamW, Batch, EvalReport,
    DICE_SMOOTH,
};
pub use unet::{AttentiveSkip, FinalExpand, SattisUnet, SwinBlock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("non-finite loss ({loss}); first non-finite gradient in {param:?}")]
    NonFiniteLoss { loss: f64, param: Option<String> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// How encoder features reach the decoder at each resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    /// Concatenate, run cross-covariance attention, project, add residually.
    Attentive,
    /// Concatenate and project linearly (plain U-Net style skip).
    Concat,
    /// No skip; the decoder sees only the upsampled stream.
    None,
}

impl std::str::FromStr for SkipMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attentive" => Ok(SkipMode::Attentive),
            "concat" => Ok(SkipMode::Concat),
            "none" => Ok(SkipMode::None),
            other => Err(format!(
                "unknown skip mode {other:?} (expected attentive|concat|none)"
            )),
        }
    }
}

impl std::fmt::Display for SkipMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipMode::Attentive => "attentive",
            SkipMode::Concat => "concat",
            SkipMode::None => "none",
        })
    }
}

/// Architecture hyperparameters. The default is the desk-scale setting used
/// throughout the test suite: 64x64 inputs, patch 4, three stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Patch side at the embedding layer.
    pub patch: usize,
    /// Channel width after embedding; doubles at each merge.
    pub base_dim: usize,
    /// Attention blocks per stage; the last stage is the bottleneck.
    pub stage_depths: Vec<usize>,
    /// Attention heads per stage; same length as `stage_depths`.
    pub heads: Vec<usize>,
    /// Window side M for window attention.
    pub window: usize,
    pub skip_mode: SkipMode,
    /// Dropout rate applied inside blocks during training (0 disables).
    pub drop_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 5,
            patch: 4,
            base_dim: 48,
            stage_depths: vec![2, 2, 2],
            heads: vec![3, 6, 12],
            window: 4,
            skip_mode: SkipMode::Attentive,
            drop_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Channel width of stage `i` (0-based): `base_dim * 2^i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.base_dim << i
    }

    /// Input sides must be padded to a multiple of this so every stage grid
    /// divides evenly into windows.
    pub fn side_multiple(&self) -> usize {
        self.patch * self.window * (1 << (self.stages() - 1))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return err(format!("num_classes {} < 2", self.num_classes));
        }
        if self.patch == 0 || self.window == 0 {
            return err("patch and window must be positive".into());
        }
        if self.stage_depths.is_empty() {
            return err("at least one stage required".into());
        }
        if self.stage_depths.len() != self.heads.len() {
            return err(format!(
                "stage_depths has {} entries but heads has {}",
                self.stage_depths.len(),
                self.heads.len()
            ));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return err("stage depths must be positive".into());
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let dim = self.stage_dim(i);
            if h == 0 || dim % h != 0 {
                return err(format!(
                    "stage {i}: width {dim} not divisible by {h} heads"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return err(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        Ok(())
    }
}

/// Optimization hyperparameters for the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub w_ce: f64,
    pub w_dice: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 42,
            w_ce: 1.0,
            w_dice: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.weight_decay < 0.0 || self.w_ce < 0.0 || self.w_dice < 0.0 {
            return err("weight_decay and loss weights must be non-negative".into());
        }
        if self.w_ce + self.w_dice <= 0.0 {
            return err("at least one loss weight must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return err("eps must be positive".into());
        }
        Ok(())
    }
}

/// Hard-label Dice overlap `2|Pn T|/(|P|+|T|)` for one class, with the
/// empty-vs-empty case defined as 1.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), truth.len(), "label buffers differ in length");
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut t = 0usize;
    for (&a, &b) in pred.iter().zip(truth) {
        let pa = a == class;
        let tb = b == class;
        p += pa as usize;
        t += tb as usize;
        inter += (pa && tb) as usize;
    }
    if p + t == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + t) as f64
}
