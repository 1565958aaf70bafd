//! Vision transformer with attention-gradient patch importance and
//! progressive patch selection, built on a small tensor and reverse-mode
//! autodiff core.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gala;
pub mod gradcheck;
pub mod model;
pub mod pps;
pub mod tensor;
pub mod train;
pub mod vit;
pub mod viz;

pub use error::{Error, Result};
