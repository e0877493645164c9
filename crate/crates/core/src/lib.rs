//! Tropical-cyclone intensity estimation from single-band satellite images.
//!
//! The crate builds a convolutional regressor from first principles (tensors,
//! a reverse-mode tape, layer primitives), trains it with a storm- and
//! speed-balanced sampler, and combines networks into a bootstrap ensemble
//! and a Saffir-Simpson-gated mixture of experts. Grad-CAM heatmaps and a
//! metric report round out the pipeline.
//!
//! ```
//! use cyclone_core::dataset::synth::synth_generate;
//! use cyclone_core::eval::evaluate;
//! use cyclone_core::network::{Model, NetworkConfig};
//!
//! # fn main() -> cyclone_core::Result<()> {
//! let data = synth_generate(16, 64, 0)?;
//! let model = Model::<f32>::build(NetworkConfig::small(), 0)?;
//! let (report, predictions) = evaluate(&model, &data)?;
//! assert_eq!(predictions.len(), 16);
//! assert!(report.rmse.is_finite());
//! # Ok(())
//! # }
//! ```
//!
//! The guide under `book/` walks through each part; its code blocks are
//! compiled as doctests of this crate.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod models;
pub mod network;
pub mod predict;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};

// Every chapter of the guide becomes a doctest module, so `cargo test --doc`
// keeps the book honest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/explain.md")]
    mod explain {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
