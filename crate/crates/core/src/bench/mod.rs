//! Evaluation: metrics, box perturbations and synthetic scenes.

pub mod metrics;
pub mod perturb;
pub mod synth;

use thiserror::Error;

pub use metrics::{label_quality, miou, ConfusionMatrix, IouReport, LabelQuality, QualityStats};
pub use perturb::{perturb_boxes, perturb_scene, PerturbMode, PerturbSpec};
pub use synth::{generate_synthetic_scene, SynthSpec, SyntheticScene};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("expected {expected} labels, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("invalid synthetic scene spec: {0}")]
    InvalidSynthSpec(String),
}
