//! Datasets, training, evaluation and synthetic data.
//!
//! A training step samples a frame, articulates the avatar into its pose,
//! rasterizes it, evaluates the loss, back-propagates to every Gaussian and
//! network parameter, applies Adam and records the screen-space gradients
//! that drive density control.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::{LearningRates, TrainConfig};
pub use dataset::{load_dataset, Dataset, Frame, Split};
pub use eval::{evaluate, region_boxes, render_novel, EvalReport, Region, RegionBox, RegionBoxes, RegionScore};
pub use optim::AvatarAdam;
pub use synth::{ground_truth_avatar, synth, SynthConfig};
pub use train::{train, train_from, StepRecord, TrainOutcome};
