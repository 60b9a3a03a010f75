//! Image-to-intrinsic inverse rendering with flow matching, at desk scale.
//!
//! The crate covers a procedural scene corpus, a small convolutional velocity
//! network with exact backpropagation and low-rank adapters, flow-matching and
//! diffusion training arms, a noise-conditioned generative renderer used as a
//! score-distillation reconstruction signal, analytic light fitting, and the
//! evaluation metrics.

pub mod ablation;
pub mod cli;
pub mod ddpm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fsutil;
pub mod genrender;
pub mod geom;
pub mod lightfit;
pub mod metrics;
pub mod model;
pub mod scenegen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
