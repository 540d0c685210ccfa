//! File formats: binary grids, text checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod grid;

pub use checkpoint::{load_model, read_arrays, save_model, write_arrays};
pub use config::Config;
pub use grid::{read_grid, write_grid, GridImage};
