//! Numerical core for one-shot voice conversion via representation
//! disentanglement.
//!
//! The crate is organized around a small reverse-mode differentiation
//! engine ([`graph::Graph`]) that records operations on flat row-major
//! tensors, plus the layers built on top of it:
//!
//! - [`model`]: content encoder, weight-shared speaker encoder pair,
//!   and an adaptive-instance-normalization decoder assembled from
//!   dilated pyramid convolution blocks.
//! - [`mi`]: mutual-information estimator combining a variational
//!   contrastive upper bound with a statistics-network lower bound,
//!   trained jointly under a bound-ordering hinge.
//! - [`train`]: the two-phase training iteration, loss assembly and
//!   deterministic per-step reporting.
//!
//! Everything is generic over [`Scalar`] so the same code path runs at
//! `f64` for gradient verification and `f32` for training and
//! inference. The crate is `no_std`-compatible (requires `alloc`); the
//! `std` feature (default) only switches float math to the platform
//! intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod error;
pub mod graph;
pub mod loss;
pub mod mi;
pub mod model;
pub mod params;
pub mod scalar;
pub mod shuffle;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use loss::{lambda_schedule, LossReport};
pub use mi::{Estimator, MiConfig, MiEstimates, MiStepReport};
pub use model::{siamese_loss, Model, ModelConfig, ParamBreakdown};
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{Ablation, IsolationProbe, TrainConfig, TrainState, TrainingPair};
