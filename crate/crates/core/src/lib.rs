//! Deformable Gaussian splatting with lifecycle opacity and an adaptive
//! motion hierarchy.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod motion;
pub mod params;
pub mod raster;
pub mod scene;
pub mod train;

pub use error::{Error, ErrorKind, Result};
