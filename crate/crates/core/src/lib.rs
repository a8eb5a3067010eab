//! Geometrical stochastic differential equations on matrix Lie groups,
//! stochastic transformations and their symmetry checks.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lie_groups;
pub mod linalg;
pub mod noise;
pub mod path;
pub mod planar;
pub mod reduction;
pub mod rng;
pub mod schemes;
pub mod sde;
pub mod stats;
pub mod symmetry;
pub mod transform;

pub use error::{Result, StosymError};
pub use lie_groups::{GroupDescriptor, GroupElement};
pub use noise::{CharacteristicTriplet, DriverKind, DriverSpec, JumpLaw, JumpMeasure};
pub use path::{CadlagPath, PathSpace, PathStyle};
pub use stats::TwoSampleResult;
