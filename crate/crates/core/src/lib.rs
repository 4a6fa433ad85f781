//! Spinal-cord image analysis toolkit: a windowed-attention encoder–decoder
//! segmentation network with cross-covariance attentive skip connections,
//! trained and verified on CPU, plus the downstream quantitative pipeline —
//! diffusion-tensor metric fitting (FA/MD/RD), cross-sectional morphometry
//! (CSA/SAC), and correlation statistics with Fisher-z group comparisons.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] — dense tensors with reverse-mode automatic differentiation
//!   and a finite-difference gradient checker.
//! - [`attention`] — window partitioning, shifted-window self-attention,
//!   cross-covariance attention, and the patch embed/merge/expand operators.
//! - [`model`] — the assembled SAttis-UNet, training loop, checkpointing,
//!   and the plain-skip ablation baseline.
//! - [`dti`] — weighted-least-squares diffusion tensor fits and eigenmetrics.
//! - [`morphometry`] — per-slice CSA, SAC, and SAC/CSA from label volumes.
//! - [`stats`] — Pearson correlation, Fisher z, and two-group z-tests.
//! - [`io`] — volume/manifest/CSV formats and the synthetic phantom generator.
//!
//! The `cordseg` binary exposes the pipeline as subcommands; see the README.

pub mod attention;
pub mod bench;
pub mod dti;
pub mod error;
pub mod io;
pub mod model;
pub mod morphometry;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod special;
pub mod stats;
pub mod tensor;

pub use error::Error;
