//! Continual learning with modality-specific low-rank adapters on a toy network.
//!
//! A frozen random base network gains one LoRA branch per task on each
//! adapted layer. Branches of finished tasks are frozen, and each task's
//! forward pass only sees branches up to its own, so earlier tasks'
//! outputs are reproduced exactly. Training adds a similarity regularizer
//! that pulls a new branch toward earlier branches of the same modality and
//! away from branches of other modalities, plus an orthogonality penalty.
//!
//! Everything runs on [`Matrix`] (dense, row-major `f64`) and the tape in
//! [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod sweep;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
