//! Ground-truth scenes generated forward from known basis shapes, affine
//! cameras and mixing weights.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::factor;
use crate::isa;
use crate::linalg;
use crate::model::{reproject, BlockMotion, NonRigidModel, RigidFactor, SubspaceSeparation};

/// Distribution of the basis-shape coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFamily {
    /// Every coordinate row an independent Laplacian signal.
    LaplacianIid,
    /// Each 3-row block a spherically symmetric vector: uniform direction
    /// times a Laplacian radius. Dependent within a block, independent across.
    SphericalSubspace,
    /// Even blocks spherical, odd blocks Laplacian i.i.d.
    Mixed,
}

impl SourceFamily {
    pub const ALL: [SourceFamily; 3] = [
        SourceFamily::LaplacianIid,
        SourceFamily::SphericalSubspace,
        SourceFamily::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceFamily::LaplacianIid => "laplacian-iid",
            SourceFamily::SphericalSubspace => "spherical-subspace",
            SourceFamily::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SourceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown source family '{s}'")))
    }
}

/// Ratio between the deformation amplitudes of consecutive subspaces.
pub const AMPLITUDE_DECAY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub images: usize,
    pub points: usize,
    pub subspaces: usize,
    /// Standard deviation of the i.i.d. Gaussian pixel noise.
    pub noise_sigma: f64,
    pub family: SourceFamily,
    pub seed: u64,
    /// Deformation amplitude of the first subspace relative to the unit-scale
    /// rigid shape; later subspaces decay geometrically by [`AMPLITUDE_DECAY`].
    pub amplitude: f64,
    /// Confine every deformation to the object's first two coordinate axes,
    /// leaving each basis shape of rank 2.
    pub planar: bool,
}

impl SynthParams {
    pub fn new(images: usize, points: usize, subspaces: usize) -> SynthParams {
        SynthParams {
            images,
            points,
            subspaces,
            noise_sigma: 0.0,
            family: SourceFamily::SphericalSubspace,
            seed: 0,
            amplitude: 0.1,
            planar: false,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_family(mut self, family: SourceFamily) -> Self {
        self.family = family;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn planar(mut self, planar: bool) -> Self {
        self.planar = planar;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub truth: NonRigidModel,
    /// The basis-coefficient signals before scaling, `3K × J`.
    pub sources: DMatrix<f64>,
    pub raw: DMatrix<f64>,
    pub params: SynthParams,
}

impl SynthScene {
    /// Noise-free centered measurements (the truth reprojected).
    pub fn clean_centered(&self) -> DMatrix<f64> {
        reproject(&self.truth, false).expect("truth model is well-formed")
    }
}

fn laplace<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn spherical_block<R: Rng + ?Sized>(rng: &mut R, points: usize) -> DMatrix<f64> {
    let mut block = DMatrix::zeros(3, points);
    for j in 0..points {
        let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = dir.norm();
        let radius = laplace(rng);
        if n > 0.0 {
            block.set_column(j, &(dir * (radius / n)));
        }
    }
    block
}

/// Subtracts row means and scales rows to unit RMS.
fn standardize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        let rms = (row.norm_squared() / row.len() as f64).sqrt();
        if rms > 0.0 {
            row /= rms;
        }
    }
}

/// Spread of the per-frame camera rotations around the base view, in radians.
pub const VIEW_SPREAD: f64 = 0.35;

/// Affine camera `diag(s₁, s₂) · R[0..2]` with `R` a random rotation of about
/// [`VIEW_SPREAD`] radians away from `base`.
/// Symmetric whitening `(S Sᵀ / J)^{-1/2} S`: the rows become exactly
/// orthonormal up to `√J` while staying as close as possible to the originals.
fn whiten_rows(m: &mut DMatrix<f64>) {
    let j = m.ncols() as f64;
    let eig = (&*m * m.transpose() / j).symmetric_eigen();
    let inv_sqrt = eig
        .eigenvalues
        .map(|l| if l > 1e-12 { 1.0 / l.sqrt() } else { 0.0 });
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    *m = w * &*m;
}

fn random_projection<R: Rng + ?Sized>(rng: &mut R, base: &Rotation3<f64>) -> Matrix2x3<f64> {
    let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * VIEW_SPREAD;
    let rot = base * Rotation3::from_scaled_axis(axis);
    let s1: f64 = rng.random_range(0.5..1.5);
    let s2: f64 = rng.random_range(0.5..1.5);
    let r = rot.matrix();
    Matrix2x3::new(
        s1 * r[(0, 0)],
        s1 * r[(0, 1)],
        s1 * r[(0, 2)],
        s2 * r[(1, 0)],
        s2 * r[(1, 1)],
        s2 * r[(1, 2)],
    )
}

/// Per-frame Gram entries `M₀ⁱᵀ M₀ⁱ` (upper triangle), one column per frame.
fn gram_rows(motion: &DMatrix<f64>) -> DMatrix<f64> {
    let images = motion.nrows() / 2;
    let mut grams = DMatrix::zeros(6, images);
    for i in 0..images {
        let m = motion.fixed_view::<2, 3>(2 * i, 0);
        let gram = m.transpose() * m;
        for (row, (a, b)) in [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
            .into_iter()
            .enumerate()
        {
            grams[(row, i)] = gram[(a, b)];
        }
    }
    grams
}

/// Projects every weight column onto `{α : Σ_i αⁱ M₀ⁱᵀ M₀ⁱ = 0}`. The deformed
/// motion columns `α M₀` are then orthogonal to the columns of `M₀`, which
/// keeps the rank-3 factorization of the tracks on the rigid component.
///
/// When there are enough frames, column `k` is also made to satisfy
/// `Σ_i α_kⁱ α_lⁱ M₀ⁱᵀ M₀ⁱ = 0` for every `l < k`: the motion columns of
/// different subspaces are then uncorrelated over the image population, as
/// independent subspaces are in expectation.
fn decorrelate_weights(motion: &DMatrix<f64>, alpha: &mut DMatrix<f64>) {
    let (images, k) = alpha.shape();
    let grams = gram_rows(motion);
    let cross = images >= 12 * k;
    for kk in 0..k {
        let blocks = if cross { 1 + kk } else { 1 };
        let mut constraints = DMatrix::zeros(6 * blocks, images);
        constraints.rows_mut(0, 6).copy_from(&grams);
        for l in 1..blocks {
            for i in 0..images {
                let a = alpha[(i, l - 1)];
                for r in 0..6 {
                    constraints[(6 * l + r, i)] = a * grams[(r, i)];
                }
            }
        }
        let col = alpha.column(kk).into_owned();
        let (coef, _) = linalg::lstsq(&constraints.transpose(), &DMatrix::from_column_slice(images, 1, col.as_slice()), 1e-12);
        let fixed = col - constraints.transpose() * coef.column(0);
        alpha.set_column(kk, &fixed);
    }
}

/// Generates a scene whose measurements follow the affine non-rigid model
/// exactly, plus optional Gaussian noise.
pub fn generate(params: &SynthParams) -> Result<SynthScene> {
    let (images, points, k) = (params.images, params.points, params.subspaces);
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if images < 2 {
        return Err(Error::Config(format!("need at least 2 images, got {images}")));
    }
    if points < 3 * k + 3 {
        return Err(Error::Config(format!(
            "J = {points} < 3K + 3 = {}: rank constraint unreachable",
            3 * k + 3
        )));
    }
    if !(params.noise_sigma >= 0.0) || !params.noise_sigma.is_finite() {
        return Err(Error::Config("noise sigma must be finite and non-negative".into()));
    }
    if !params.amplitude.is_finite() {
        return Err(Error::Config("amplitude must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    // Mean shape: points on the unit sphere with a little radial jitter.
    let jitter = Normal::new(0.0, 0.05).expect("valid normal");
    let mut rigid_shape = DMatrix::zeros(3, points);
    for j in 0..points {
        let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let scale = (1.0 + jitter.sample(&mut rng)) / dir.norm().max(f64::MIN_POSITIVE);
        rigid_shape.set_column(j, &(dir * scale));
    }
    for mut row in rigid_shape.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }

    let mut sources = DMatrix::zeros(3 * k, points);
    for kk in 0..k {
        let spherical = match params.family {
            SourceFamily::SphericalSubspace => true,
            SourceFamily::LaplacianIid => false,
            SourceFamily::Mixed => kk % 2 == 0,
        };
        let block = if spherical {
            spherical_block(&mut rng, points)
        } else {
            DMatrix::from_fn(3, points, |_, _| laplace(&mut rng))
        };
        sources.rows_mut(3 * kk, 3).copy_from(&block);
    }
    standardize_rows(&mut sources);
    // Deformations orthogonal to the mean shape, so the rigid factor of the
    // noise-free tracks is exactly the mean shape.
    let (coef, _) = linalg::lstsq(
        &rigid_shape.transpose(),
        &sources.transpose(),
        1e-12,
    );
    sources -= coef.transpose() * &rigid_shape;
    whiten_rows(&mut sources);
    let mut basis = sources.clone();
    if params.planar {
        for kk in 0..k {
            basis.row_mut(3 * kk + 2).fill(0.0);
        }
    }

    let base = Rotation3::from_scaled_axis(
        Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * std::f64::consts::PI,
    );
    let mut motion = DMatrix::zeros(2 * images, 3);
    for i in 0..images {
        motion
            .fixed_view_mut::<2, 3>(2 * i, 0)
            .copy_from(&random_projection(&mut rng, &base));
    }
    let mut alpha = DMatrix::zeros(images, k);
    for kk in 0..k {
        let amp = params.amplitude * AMPLITUDE_DECAY.powi(kk as i32);
        for i in 0..images {
            alpha[(i, kk)] = amp * rng.sample::<f64, _>(StandardNormal);
        }
    }
    decorrelate_weights(&motion, &mut alpha);
    let translations: Vec<Vector2<f64>> = (0..images)
        .map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
        .collect();

    // Unit-norm identity affinities; the scale √3 moves into α.
    let unit = Matrix3::identity() / 3f64.sqrt();
    let blocks = BlockMotion {
        affinities: vec![unit; k],
        alpha: &alpha / 3f64.sqrt(),
        inverse_affinities: Some(vec![Matrix3::identity() * 3f64.sqrt(); k]),
    };
    let rigid = RigidFactor {
        motion,
        shape: rigid_shape,
    };
    let separated_motion = crate::model::assemble_motion(&rigid, &blocks)? * 3f64.sqrt();
    let nonrigid = &separated_motion * &basis;
    let covariance = isa::mode_covariance(&basis, &nonrigid)?.matrix;
    let truth = NonRigidModel {
        rigid,
        separation: SubspaceSeparation {
            subspaces: k,
            transform: DMatrix::identity(3 * k, 3 * k),
            motion: separated_motion,
            basis,
            covariance,
        },
        blocks,
        translations,
    };

    let mut raw = reproject(&truth, true)?;
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma)
            .map_err(|e| Error::Config(format!("invalid noise: {e}")))?;
        raw.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    Ok(SynthScene {
        truth,
        sources,
        raw,
        params: params.clone(),
    })
}

/// Centered noise-free measurements of a scene have at most `3K + 3` nonzero
/// singular values; returns `σ_{3K+4} / σ₁` (zero when that index does not exist).
pub fn rank_excess(centered: &DMatrix<f64>, k: usize) -> f64 {
    let svd = linalg::Svd::new(centered);
    let s = &svd.singular_values;
    if s.len() <= 3 * k + 3 || s[0] == 0.0 {
        return 0.0;
    }
    s[3 * k + 3] / s[0]
}

/// Convenience: centered measurements of a scene.
pub fn centered(scene: &SynthScene) -> Result<DMatrix<f64>> {
    Ok(factor::center(&scene.raw)?.centered().clone())
}
