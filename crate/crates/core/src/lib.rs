//! A small CPU deep-learning framework built around one convolutional network
//! with two interchangeable classification heads: softmax cross-entropy and a
//! one-vs-all linear SVM trained with the (squared) hinge loss.
//!
//! Module map:
//!
//! - [`tensor`]: dense row-major `f64` arrays and the matrix kernels everything
//!   else is built on.
//! - [`rng`]: the seedable xoshiro256** generator used for initialization,
//!   shuffling and dropout.
//! - [`layers`]: forward/backward passes for convolution, ReLU, max-pooling,
//!   fully-connected and dropout layers.
//! - [`model`]: the base CNN (`conv-relu-pool` twice, `fc-relu-dropout-fc`).
//! - [`objectives`]: softmax cross-entropy, L1/L2-SVM losses, prediction and
//!   accuracy.
//! - [`optim`]: the Adam optimizer, with no schedule or clipping.
//! - [`dataset`]: IDX parsing, padding, batching and data acquisition.
//! - [`experiment`]: training/evaluation protocol, metrics files and model
//!   persistence.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
