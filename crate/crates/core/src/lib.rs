pub mod calib_refine;
pub mod census;
pub mod dense;
pub mod error;
pub mod geometry;
pub mod image;
pub mod kv;
pub mod pipeline;
pub mod records;
pub mod synth;
pub mod template;
pub mod tracking;

pub use error::{Error, Result};
