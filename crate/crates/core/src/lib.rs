//! Segmentation micro-framework around a UNet whose encoder features pass
//! through multi-scale MLP (MMLP) blocks of grouped local token mixing.
//!
//! Layout:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, primitive operators.
//! - [`mixer`]: MLP-Mixer building blocks (patch embedding, channel/token
//!   mixing, classifier head).
//! - [`mmlp`]: channel grouping, patch cropping, local token mixing.
//! - [`models`]: UNet / MM-UNet / global-mixing ablation builders and
//!   parameter accounting.
//! - [`training`]: SGD with momentum, stair learning-rate schedule, metrics,
//!   training loop.
//! - [`data`]: phantom lens generator, PPM/PGM images, checkpoints.
//! - [`cli`]: the `mmunet` command-line tool.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mixer;
pub mod mmlp;
pub mod models;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Graph, Tensor, Var};
