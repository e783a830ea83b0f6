//! Liver segmentation for CT volumes: MetaImage I/O, HU windowing and
//! greyscale preprocessing, edge-enhancing diffusion, dual-resolution patch
//! sampling, a small dual-pathway 3D CNN with dense-CRF refinement, and
//! segmentation metrics.

pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod network;
pub mod preprocess;
pub mod sampler;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, Grid, LabelMask, Unit, Volume};
