pub mod arch;
pub mod data;
pub mod error;
pub mod eval;
pub mod haze;
pub mod image;
pub mod losses;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
