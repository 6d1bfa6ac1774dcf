//! Ring-array photoacoustic tomography reconstruction.
//!
//! Three reconstruction routes share one forward model:
//!
//! - [`ubp`]: universal back-projection, the analytic baseline;
//! - [`mb`]: model-based inversion, non-negative least squares with a total
//!   variation prior solved by projected gradient descent;
//! - [`inr`]: a neural field (multiresolution hash encoding + MLP) trained
//!   self-supervised through the forward model.
//!
//! [`phantom`] synthesizes test objects and sinograms, [`metrics`] scores the
//! results and [`io`] reads and writes the binary sinogram/image formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forward;
pub mod geometry;
pub mod inr;
pub mod io;
pub mod mb;
pub mod metrics;
pub mod phantom;
pub mod ubp;

pub use error::{Error, Result};
pub use forward::{ArcSamplingConfig, ForwardOperator, Ray, Representation};
pub use geometry::{
    subsample_projections, Acquisition, HeatImage, ImageGrid, Medium, Point2, RingGeometry,
    Sinogram,
};
