//! Dual-prompt 3D segmentation on synthetic volumetric phantoms.
//!
//! A query-based mask-prediction network steered by two prompt families —
//! anatomical prompts (fixed-size 3D crops of example structures) and textual
//! prompts (category descriptions) — with hard Gumbel feature grouping for
//! the anatomical queries, group-masked prompt decoding for the segmentation
//! queries, and a dice/classification/contrastive training objective.
//!
//! All numeric code is generic over the scalar type via [`dpseg_tensor::Scalar`];
//! the CLI and the default aliases below run in `f64`.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod refer;
pub mod refiner;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Default scalar precision for training and evaluation.
pub type Real = f64;
/// Default-precision array.
pub type Array = dpseg_tensor::NdArray<Real>;
/// Default-precision labeled case.
pub type Case = synth::LabeledCase<Real>;
