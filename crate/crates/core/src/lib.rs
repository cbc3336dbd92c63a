//! Open-set instance segmentation for LiDAR-style point clouds.
//!
//! The pipeline rasterizes a point cloud into a bird's-eye-view occupancy
//! grid, runs a small convolutional network with a detection head and an
//! embedding head, associates points with thing and stuff prototypes, and
//! clusters whatever is left over into unknown instances. See the book in
//! `book/` for a walk-through of each stage.

mod codec;
pub mod error;
pub mod harness;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

// The book's listings run as doctests so that they cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/raster.md")]
    mod raster {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
