pub mod editmodel;
pub mod error;
pub mod evalmetrics;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod propagation;
pub mod scene;

pub use error::{Error, Result};
