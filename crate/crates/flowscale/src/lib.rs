//! File formats, synthetic corpora and the command-line pipeline around
//! `flowscale-core`.

mod binary;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod grf;
pub mod grid;
pub mod manifest;
pub mod output;

pub use checkpoint::Checkpoint;
pub use commands::{cmd_evaluate, cmd_generate, cmd_sample, cmd_train};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use grf::generate_grf;
pub use grid::{read_grid, write_grid};
pub use manifest::Manifest;
