//! Pairwise 3D deformable registration that jointly estimates forward and
//! backward displacement fields and masks of voxels without valid
//! correspondence (resection cavities, recurrent tumour), using the
//! forward-backward consistency of the two fields to find them.
//!
//! Numeric routines are generic over [`Real`] (`f32` or `f64`); the
//! `*F64`/`*F32` aliases below name the common instantiations.

// `!(x > 0.0)` is how parameters reject NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod error;
pub mod eval;
pub mod fbc;
pub mod field;
pub mod filters;
pub mod interp;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod scalar;
pub mod selfcheck;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use fbc::{Alpha, FbError, FbcParams, MaskEstimate};
pub use field::DisplacementField;
pub use losses::{LossBreakdown, LossWeights};
pub use optimizer::{register_pair, run_multimodal, RegistrationConfig, RegistrationResult, TraceEntry};
pub use scalar::Real;
pub use volume::{CorrespondenceMask, ForegroundMask, Grid, Mask, Volume};

pub type VolumeF64 = Volume<f64>;
pub type VolumeF32 = Volume<f32>;
pub type FieldF64 = DisplacementField<f64>;
pub type FieldF32 = DisplacementField<f32>;
pub type RegistrationResultF64 = RegistrationResult<f64>;
pub type RegistrationResultF32 = RegistrationResult<f32>;
