//! Evidential inter/intra fusion for multi-source regression.
//!
//! Each source dataset gets its own branch of local evidential regressors
//! whose Normal-Inverse-Gamma outputs are fused with MoNIG, a cross-dataset
//! branch mixes the branches' features, and a final MoNIG fusion across all
//! branches yields the prediction together with aleatoric and epistemic
//! uncertainty.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod nig;
pub mod partition;
pub mod report;
pub mod runner;
pub mod special;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
