//! Core library for cycle-consistent image/caption models: a reverse-mode
//! autodiff tape, the network definitions built on it, losses, metrics,
//! synthetic data generation, and the training loops.

pub mod autodiff;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod training;

pub use autodiff::{grad_check, Scalar, Tape, Tensor, Var};
pub use models::{Caption, ImageSample, ModelBundle, ModelConfig, Vocab};
pub use training::{LoadedData, TrainConfig, Trainer};
