//! Arterial spin labeling perfusion processing.
//!
//! The crate turns a perfusion-weighted difference image and a proton-density
//! reference into absolute CBF maps, then masks, co-registers, partial-volume
//! corrects, normalizes and smooths them, and finally supports ROI summaries
//! and voxelwise group statistics. Every stage is a pure function over
//! [`Volume3D`] values; [`pipeline`] strings them together for batch runs.

// `!(x > 0.0)` is how NaN gets rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brainmask;
pub mod coregister;
pub mod error;
pub mod geometry;
pub mod glm;
pub mod morphology;
pub mod nifti;
pub mod phantom;
pub mod normalize;
pub mod pipeline;
pub mod pvc;
pub mod quantify;
pub mod resample;
pub mod roistats;
pub mod segment;
pub mod smooth;
pub mod util;
pub mod volume;

mod optimize;

pub use error::{Error, Result};
pub use geometry::{AffineParams, AffineTransform, RigidTransform};
pub use resample::{resample, Interpolation};
pub use volume::{set_origin_center_of_mass, BinaryMask, GridSpec, Volume3D};
