//! File formats, parallel grid search and the `fusegrid` command line on top
//! of [`fusegrid_core`].

pub mod cli;
pub mod error;
pub mod experiment;
pub mod io;
pub mod manifest;
pub mod runner;

pub use error::{Error, Result};
