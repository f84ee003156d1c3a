//! Metadata-conditioned diffusion models for targeted synthetic data.
//!
//! A denoising diffusion model is conditioned on a class label and on
//! categorical metadata (for example the tissue source site an image came
//! from). Because every attribute has its own embedding table, the model can
//! be asked for class x metadata combinations that were rare or absent in
//! training, which is what the augmentation plans in [`sampling`] exploit.
//!
//! Modules follow the pipeline: [`registry`] loads manifests, [`split`]
//! builds holdout and confounded splits, [`diffusion`] trains and samples,
//! [`sampling`] turns plans into synthetic manifests, [`evaluation`] scores
//! fidelity and downstream robustness, and [`study`] wires them into
//! reproducible experiments.

pub mod config;
pub mod diffusion;
pub mod evaluation;
mod error;
pub mod imaging;
pub mod ledger;
pub mod registry;
pub mod sampling;
pub mod seeds;
pub mod split;
pub mod study;
pub mod toy;

pub use error::{Error, Result};
