//! Prior-free non-rigid structure from motion.
//!
//! 2D tracks of a deforming object seen by an affine camera are factorized
//! into a rigid part and `K` statistically independent 3D deformation
//! subspaces. The pipeline runs
//!
//! 1. rigid factorization of the centered tracks ([`factor`]),
//! 2. separation of the non-rigid residual into independent subspaces by
//!    ICA plus covariance pooling or by FastISA ([`ica`], [`isa`]),
//! 3. recovery of the per-subspace affinities and weights ([`block`]),
//! 4. alternating least squares refinement ([`refine`]).
//!
//! [`eval::reconstruct`] chains all of them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops mirror the matrix algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod block;
pub mod error;
pub mod eval;
pub mod factor;
pub mod ica;
pub mod io;
pub mod isa;
pub mod linalg;
pub mod model;
pub mod refine;
pub mod synth;

pub use nalgebra;

pub use error::{Error, Result, Stage};
pub use eval::{evaluate, inverse_snr, reconstruct, EvalReport, Method, PipelineConfig, Reconstruction};
pub use io::{ModelFile, TrackFile};
pub use model::{BlockMotion, MeasurementSet, NonRigidModel, RigidFactor, SubspaceSeparation};
pub use synth::{generate, SourceFamily, SynthParams, SynthScene};
