//! Retention-based semantic segmentation on the CPU.

pub mod backbone;
pub mod bench;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retention;
pub mod trainer;

pub use error::{Result, SegError};
