//! Symmetric fixed-point FastICA for already-whitened signals.
//!
//! The rows of the truncated basis `B′/√J` are orthonormal, so the signals
//! enter with identity covariance and only an orthogonal rotation remains to
//! be estimated.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Non-Gaussianity contrast used by the fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    /// `g(u) = tanh(u)`.
    #[default]
    Tanh,
    /// `g(u) = u³` (kurtosis).
    Cube,
}

impl Contrast {
    fn apply(self, u: f64) -> (f64, f64) {
        match self {
            Contrast::Tanh => {
                let t = u.tanh();
                (t, 1.0 - t * t)
            }
            Contrast::Cube => (u * u * u, 3.0 * u * u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcaConfig {
    pub contrast: Contrast,
    /// Convergence threshold on `1 − |cos|` between successive unmixing rows.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        IcaConfig {
            contrast: Contrast::Tanh,
            tol: 1e-7,
            max_iter: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaResult {
    /// Orthogonal `3K × 3K` matrix with sources `B_ICA = Aᵀ B′`.
    pub transform: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

impl IcaResult {
    /// The separated sources `Aᵀ B′`.
    pub fn sources(&self, bp: &DMatrix<f64>) -> DMatrix<f64> {
        self.transform.transpose() * bp
    }
}

/// Tolerance on the whitening check of the input rows.
pub(crate) const WHITENING_TOL: f64 = 1e-6;

/// Splits the rows of `(1/J) B Bᵀ` into a leading orthonormal block and a
/// trailing all-zero block and returns the size of the leading block.
pub(crate) fn whitened_rank(bp: &DMatrix<f64>) -> Result<usize> {
    let n = bp.nrows();
    let j = bp.ncols() as f64;
    let gram = bp * bp.transpose() / j;
    let rank = (0..n).take_while(|&r| gram[(r, r)] > 0.5).count();
    for a in 0..n {
        for b in 0..n {
            let expected = if a == b && a < rank { 1.0 } else { 0.0 };
            if (gram[(a, b)] - expected).abs() > WHITENING_TOL {
                return Err(Error::Precondition(format!(
                    "input rows are not whitened: (1/J)·B·Bᵀ[{a},{b}] = {:.3e}, expected {expected}",
                    gram[(a, b)]
                )));
            }
        }
    }
    Ok(rank)
}

/// Estimates the orthogonal unmixing of whitened rows `bp` (`n × J`).
pub fn fast_ica(bp: &DMatrix<f64>, cfg: &IcaConfig) -> Result<IcaResult> {
    let n = bp.nrows();
    let j = bp.ncols();
    if n == 0 || j == 0 {
        return Err(Error::Dimension("ICA input must be non-empty".into()));
    }
    let rank = whitened_rank(bp)?;
    if j < 10 * n {
        log::warn!("ICA with only {j} samples for {n} components; estimates may be unreliable");
    }
    let mut transform = DMatrix::identity(n, n);
    if rank == 0 {
        return Ok(IcaResult {
            transform,
            iterations: 0,
            converged: true,
            seed: cfg.seed,
        });
    }

    let z = bp.rows(0, rank).into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = linalg::random_orthogonal(rank, &mut rng);
    let mut converged = false;
    let mut iterations = 0;
    let inv_j = 1.0 / j as f64;

    while iterations < cfg.max_iter {
        iterations += 1;
        let y = &w * &z;
        let mut g = DMatrix::zeros(rank, j);
        let mut mean_dg = vec![0.0; rank];
        for c in 0..j {
            for r in 0..rank {
                let (gv, dg) = cfg.contrast.apply(y[(r, c)]);
                g[(r, c)] = gv;
                mean_dg[r] += dg;
            }
        }
        let mut next = &g * z.transpose() * inv_j;
        for r in 0..rank {
            let scale = mean_dg[r] * inv_j;
            for c in 0..rank {
                next[(r, c)] -= scale * w[(r, c)];
            }
        }
        let next = linalg::symmetric_orthogonalize(&next);
        debug_assert!(linalg::orthonormality_defect(&next) < 1e-8);

        let change = (0..rank)
            .map(|r| 1.0 - next.row(r).dot(&w.row(r)).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA did not converge within {} sweeps", cfg.max_iter);
    }

    transform
        .view_mut((0, 0), (rank, rank))
        .copy_from(&w.transpose());
    Ok(IcaResult {
        transform,
        iterations,
        converged,
        seed: cfg.seed,
    })
}
