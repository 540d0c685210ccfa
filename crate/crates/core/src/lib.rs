//! Spatially adaptive ridge regularizers for variational image reconstruction.

mod conv;
pub mod error;
pub mod filter_bank;
pub mod forward_models;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod phantoms;
pub mod potentials;
pub mod regularizer;
pub mod solver;
pub mod stability_lab;
pub mod training;

pub use error::{Error, Result};
