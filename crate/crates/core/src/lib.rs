//! Patch-level kernel alignment for dense self-distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: Gram matrices, centering, CKA / HSIC / MMD scores, the
//!   alignment losses and their analytic gradients.
//! - [`geometry`]: crop boxes, overlap-constrained multi-crop sampling and
//!   ROI align over dense feature grids.
//! - [`encoder`]: a small dense encoder and projection head with hand-written
//!   backward passes, EMA tracking and the checkpoint format.
//! - [`trainer`]: view construction, pairwise losses, AdamW and the training
//!   loop, plus the loss-stability report.
//! - [`eval`]: overclustering, patch nearest-neighbour retrieval and linear
//!   probing on frozen features.
//! - [`synth`]: the synthetic densely labelled scene generator, photometric
//!   augmentation and dataset persistence.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod kernel;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use config::{EvalConfig, ExperimentConfig};
pub use encoder::{EmaSchedule, EncoderParams, Model, ProjectionHeadParams};
pub use error::{Error, Result};
pub use geometry::{CropBox, FeatureGrid, ViewPair};
pub use kernel::{AlignmentKind, AlignmentScore, Bandwidth, FeatureMatrix, KernelMatrix, LossKind};
pub use synth::{AugmentStrength, Dataset, LabelMask, SceneSpec};
pub use trainer::{StepRecord, TrainConfig};
