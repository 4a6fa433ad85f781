//! File formats and synthetic data: the volume container (JSON sidecar +
//! raw payload), dataset manifests, metrics/comparison tables, and the
//! phantom generator that plants a recoverable FA ↔ SAC/CSA correlation.

mod dataset;
mod synth;
mod tables;
mod volume;

pub use dataset::{image_to_input, load_training_set, segment_volume, slice_input, INPUT_CHANNELS};
pub use synth::{
    level_of_slice, synthesize_cohort, synthesize_subject, toy_slices, CohortPlan, SynthConfig,
    SyntheticSubject,
};
pub use tables::{
    comparisons_to_csv, load_manifest, save_comparisons, save_gradient_table, save_manifest,
    DatasetManifest, MetricsRow, MetricsTable, SubjectEntry, GENDERS, MACHINES, METRICS_HEADER,
};
pub use volume::{load_volume, save_volume, sidecar_path, standard_legend, Volume, VolumeData};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    CsvFormat(#[from] csv::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("volume format: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Invalid(String),
}
