//! Shared fixtures for the stage benchmarks.

use nrsfm_core::factor::{self, TruncatedFactor, DEFAULT_RANK_TOL};
use nrsfm_core::{generate, MeasurementSet, RigidFactor, SynthParams};

/// A synthetic scene factored up to the separation stage.
pub struct Fixture {
    pub measurements: MeasurementSet,
    pub rigid: RigidFactor,
    pub residual: nrsfm_core::nalgebra::DMatrix<f64>,
    pub truncated: TruncatedFactor,
}

pub fn fixture(images: usize, points: usize, k: usize) -> Fixture {
    let scene = generate(&SynthParams::new(images, points, k).with_seed(7)).expect("valid scene");
    let measurements = factor::center(&scene.raw).expect("finite tracks");
    let (rigid, w0) = factor::rigid_factorize(&measurements).expect("rigid factor");
    let residual = factor::nonrigid_residual(&measurements, &w0).expect("residual");
    let truncated = factor::truncate(&residual, k, DEFAULT_RANK_TOL).expect("truncation");
    Fixture {
        measurements,
        rigid,
        residual,
        truncated,
    }
}
