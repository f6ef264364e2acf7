//! Camera relocalization by relative pose regression, trained on views
//! synthesized at sampled poses from depth maps.
//!
//! Modules, bottom-up:
//!
//! * [`geometry`]: quaternions, poses, pinhole projection, relative and
//!   absolute pose conversion.
//! * [`dataset`]: scene records, procedural scene generation, descriptors,
//!   retrieval and the on-disk scene layout.
//! * [`synthesis`]: depth fusion and z-buffered forward warping into novel views.
//! * [`sampling`]: in-distribution and out-of-distribution pose sampling and
//!   training pair assembly.
//! * [`regressor`]: reverse-mode autodiff, the transformer and MLP relative
//!   pose heads, loss, Adam training and checkpoints.
//! * [`harness`]: localization metrics, yaw bias analysis and experiment
//!   templates.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod regressor;
pub mod sampling;
pub mod synthesis;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, PixelCoord, Point3, Pose, Quaternion, RelativePose};
