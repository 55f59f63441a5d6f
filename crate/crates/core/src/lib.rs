//! Multi-view rigid registration of 3D point sets by expectation-maximisation.

pub mod cli;
pub mod em;
pub mod error;
pub mod geometry;
pub mod io;
pub mod spatial_index;
pub mod synthesis;

pub use error::{Error, Result};
