//! Recovery of the block-form motion matrix.
//!
//! Finds per-subspace affinities `D_k` (unit Frobenius norm) and weights `α_kⁱ`
//! minimizing `Σ_{i,k} ‖M_kⁱ D_k − α_kⁱ M₀ⁱ‖²_F` by iteratively reweighted least
//! squares: the first-view weights `α_k¹` are held fixed, the remaining
//! unknowns solved by linear least squares, and `α_k¹` rescaled by `1/‖d_k‖`
//! until every `d_k` comes out with unit norm.
//!
//! Vectorization is column-stacking throughout, so
//! `vec(M D) = blockdiag(M, M, M) · vec(D)`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::BlockMotion;

/// Coordinate-list sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, value)`, no duplicates.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.cols, "vector length must match column count");
        let mut y = DVector::zeros(self.rows);
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }
}

/// Column of `α_kⁱ` in the unknown vector `(d_1, …, d_K, α_1¹, …, α_K¹, α_1², …)`.
pub fn alpha_column(k_total: usize, i: usize, k: usize) -> usize {
    9 * k_total + i * k_total + k
}

fn check_inputs(m_isa: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<(usize, usize)> {
    let rows = m_isa.nrows();
    if !rows.is_multiple_of(2) || !m_isa.ncols().is_multiple_of(3) || m_isa.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "separated motion must be 2I×3K, got {}×{}",
            rows,
            m_isa.ncols()
        )));
    }
    if m0.shape() != (rows, 3) {
        return Err(Error::Dimension(format!(
            "rigid motion must be {rows}×3, got {}×{}",
            m0.nrows(),
            m0.ncols()
        )));
    }
    Ok((rows / 2, m_isa.ncols() / 3))
}

fn kron_block(m: &Matrix2x3<f64>) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(6, 9);
    for c in 0..3 {
        n.view_mut((2 * c, 3 * c), (2, 3)).copy_from(m);
    }
    n
}

fn vec_of(m: &Matrix2x3<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// The `6IK × (9+I)K` coefficient matrix `N` with
/// `‖N x‖² = Σ_{i,k} ‖M_kⁱ D_k − α_kⁱ M₀ⁱ‖²_F`.
/// Rows are ordered by image, then subspace.
pub fn build_system(m_isa: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<SparseMatrix> {
    let (images, k_total) = check_inputs(m_isa, m0)?;
    let mut entries = Vec::with_capacity(images * k_total * (18 + 6));
    for i in 0..images {
        let rigid = m0.fixed_view::<2, 3>(2 * i, 0);
        for k in 0..k_total {
            let row0 = 6 * (i * k_total + k);
            let block = m_isa.fixed_view::<2, 3>(2 * i, 3 * k);
            for c in 0..3 {
                for r in 0..2 {
                    for s in 0..3 {
                        let v = block[(r, s)];
                        if v != 0.0 {
                            entries.push((row0 + 2 * c + r, 9 * k + 3 * c + s, v));
                        }
                    }
                }
            }
            let col = alpha_column(k_total, i, k);
            for c in 0..3 {
                for r in 0..2 {
                    let v = rigid[(r, c)];
                    if v != 0.0 {
                        entries.push((row0 + 2 * c + r, col, -v));
                    }
                }
            }
        }
    }
    Ok(SparseMatrix {
        rows: 6 * images * k_total,
        cols: (9 + images) * k_total,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlsConfig {
    /// Converged once `max_k |‖d_k‖ − 1| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative singular-value cutoff of the reduced least-squares solve.
    pub rank_tol: f64,
    /// Replace the IRLS fixed point by the exact unit-norm minimizer when that
    /// lowers the objective. The IRLS iterate pins the first-view weight, so
    /// on noisy data it sits slightly above the constrained optimum.
    #[serde(default = "default_polish")]
    pub polish: bool,
}

fn default_polish() -> bool {
    true
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            tol: 1e-8,
            max_iter: 50,
            rank_tol: 1e-12,
            polish: true,
        }
    }
}

/// One IRLS iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlsState {
    /// `vec(D_k)` per subspace, as solved (before normalization).
    pub d_vecs: Vec<[f64; 9]>,
    /// First-view weights `α_k¹` used for this solve.
    pub alpha1: Vec<f64>,
    pub iteration: usize,
    /// Objective of the iterate after normalizing every `d_k` to unit norm.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrlsOutcome {
    pub blocks: BlockMotion,
    pub iterations: usize,
    pub converged: bool,
    /// Final objective with unit-norm affinities.
    pub residual: f64,
    /// Subspaces whose reduced system was rank-deficient.
    pub rank_deficient: Vec<bool>,
    /// Subspaces for which no affinity could be recovered at all (zero solution).
    pub degenerate: Vec<bool>,
    pub history: Vec<IrlsState>,
}

/// Relative singular value below which a direction of the stacked motion
/// block `[M_k¹; …; M_kᴵ]` is treated as absent.
const MOTION_NULL_TOL: f64 = 1e-10;

/// Per-subspace data of the reduced problem. The weights `α_kⁱ` of views
/// `i ≥ 2` are eliminated by projecting each 6-row block onto the orthogonal
/// complement of `vec(M₀ⁱ)`, which leaves a `6I × 9` system in `d_k` alone.
///
/// When the motion block has a null direction `n` (a planar subspace), every
/// `D = n vᵀ` fits with all weights zero. Such components are invisible in
/// `M_k D`, so `d_k` is confined to matrices whose columns lie in the row
/// space of the stacked block; `allowed` holds an orthonormal basis of that
/// set of `vec(D)`.
struct Reduced {
    lhs: DMatrix<f64>,
    allowed: DMatrix<f64>,
    first_rhs: DVector<f64>,
    blocks: Vec<DMatrix<f64>>,
    rigid_vecs: Vec<DVector<f64>>,
}

impl Reduced {
    fn new(m_isa: &DMatrix<f64>, m0: &DMatrix<f64>, k: usize) -> Reduced {
        let images = m0.nrows() / 2;
        let mut lhs: DMatrix<f64> = DMatrix::zeros(6 * images, 9);
        let mut blocks = Vec::with_capacity(images);
        let mut rigid_vecs = Vec::with_capacity(images);
        for i in 0..images {
            let n = kron_block(&m_isa.fixed_view::<2, 3>(2 * i, 3 * k).into_owned());
            let m = vec_of(&m0.fixed_view::<2, 3>(2 * i, 0).into_owned());
            let projected = if i == 0 {
                n.clone()
            } else {
                let norm2 = m.norm_squared();
                if norm2 > 0.0 {
                    &n - &m * (m.transpose() * &n) / norm2
                } else {
                    n.clone()
                }
            };
            lhs.rows_mut(6 * i, 6).copy_from(&projected);
            blocks.push(n);
            rigid_vecs.push(m);
        }
        let stacked = DMatrix::from_fn(2 * images, 3, |r, c| m_isa[(r, 3 * k + c)]);
        let svd = linalg::Svd::new(&stacked);
        let s = &svd.singular_values;
        let kept: Vec<usize> = (0..s.len().min(3))
            .filter(|&r| s[r] > MOTION_NULL_TOL * s[0])
            .collect();
        let allowed = if kept.is_empty() || kept.len() == 3 {
            DMatrix::identity(9, 9)
        } else {
            let mut q = DMatrix::zeros(9, 3 * kept.len());
            for c in 0..3 {
                for (j, &r) in kept.iter().enumerate() {
                    for t in 0..3 {
                        q[(3 * c + t, c * kept.len() + j)] = svd.v_t[(r, t)];
                    }
                }
            }
            q
        };
        if allowed.ncols() < 9 {
            lhs = &lhs * &allowed * allowed.transpose();
        }
        let first_rhs = rigid_vecs[0].clone();
        Reduced {
            lhs,
            allowed,
            first_rhs,
            blocks,
            rigid_vecs,
        }
    }

    /// Solves for `d_k` with `α_k¹` fixed; returns `d`, the rank, and all `α_kⁱ`.
    fn solve(&self, alpha1: f64, rank_tol: f64) -> (DVector<f64>, usize, Vec<f64>) {
        let mut rhs = DMatrix::zeros(self.lhs.nrows(), 1);
        rhs.view_mut((0, 0), (6, 1))
            .copy_from(&(&self.first_rhs * alpha1));
        let (x, rank) = linalg::lstsq(&self.lhs, &rhs, rank_tol);
        let d = x.column(0).into_owned();
        let alphas = self.alphas(&d, alpha1);
        (d, rank, alphas)
    }

    fn alphas(&self, d: &DVector<f64>, alpha1: f64) -> Vec<f64> {
        let mut alphas = Vec::with_capacity(self.blocks.len());
        alphas.push(alpha1);
        for i in 1..self.blocks.len() {
            let m = &self.rigid_vecs[i];
            let norm2 = m.norm_squared();
            alphas.push(if norm2 > 0.0 {
                m.dot(&(&self.blocks[i] * d)) / norm2
            } else {
                0.0
            });
        }
        alphas
    }

    /// Unit vector minimizing `Σ_i ‖P_i N_i d‖²` over all views, i.e. the
    /// objective with every weight (the first included) at its optimum.
    /// Among near-degenerate minimizers the one closest to `hint` is returned.
    fn constrained_minimizer(&self, hint: &DVector<f64>, rank_tol: f64) -> Option<DVector<f64>> {
        let mut stacked = self.lhs.clone();
        let (n, m) = (&self.blocks[0], &self.rigid_vecs[0]);
        let norm2 = m.norm_squared();
        if norm2 > 0.0 {
            stacked
                .rows_mut(0, 6)
                .copy_from(&(n - m * (m.transpose() * n) / norm2));
        }
        let p = self.allowed.ncols();
        let svd = linalg::Svd::new(&(stacked * &self.allowed));
        let s = &svd.singular_values;
        if s.len() < p || !(s[0] > 0.0) {
            return None;
        }
        let hint = self.allowed.transpose() * hint;
        let floor = s[p - 1] + rank_tol * s[0];
        let null: Vec<usize> = (0..p).filter(|&r| s[r] <= floor).collect();
        let mut y = DVector::zeros(p);
        for &r in &null {
            let v = svd.v_t.row(r).transpose();
            y += &v * v.dot(&hint);
        }
        if !(y.norm() > 1e-8 * hint.norm()) {
            y = svd.v_t.row(p - 1).transpose();
            if y.dot(&hint) < 0.0 {
                y.neg_mut();
            }
        }
        Some(&self.allowed * y.normalize())
    }

    fn fitted_alphas(&self, d: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .zip(&self.rigid_vecs)
            .map(|(n, m)| {
                let norm2 = m.norm_squared();
                if norm2 > 0.0 {
                    m.dot(&(n * d)) / norm2
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn residual(&self, d: &DVector<f64>, alphas: &[f64]) -> f64 {
        self.blocks
            .iter()
            .zip(&self.rigid_vecs)
            .zip(alphas)
            .map(|((n, m), &a)| (n * d - m * a).norm_squared())
            .sum()
    }
}

/// Objective `Σ_{i,k} ‖M_kⁱ D_k − α_kⁱ M₀ⁱ‖²_F` evaluated directly.
pub fn block_residual(
    m_isa: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    affinities: &[Matrix3<f64>],
    alpha: &DMatrix<f64>,
) -> f64 {
    let images = m0.nrows() / 2;
    let mut total = 0.0;
    for i in 0..images {
        let rigid = m0.fixed_view::<2, 3>(2 * i, 0);
        for (k, d) in affinities.iter().enumerate() {
            let block = m_isa.fixed_view::<2, 3>(2 * i, 3 * k);
            total += (block * d - rigid * alpha[(i, k)]).norm_squared();
        }
    }
    total
}

/// IRLS recovery of unit-norm affinities and mixing weights.
pub fn irls_recover(
    m_isa: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    cfg: &IrlsConfig,
) -> Result<IrlsOutcome> {
    let (images, k_total) = check_inputs(m_isa, m0)?;
    if images < 2 {
        return Err(Error::Underdetermined(
            "block recovery needs at least two images".into(),
        ));
    }
    if m0.iter().all(|&v| v == 0.0) {
        return Err(Error::Precondition(
            "rigid motion is identically zero".into(),
        ));
    }

    let reduced: Vec<Reduced> = (0..k_total).map(|k| Reduced::new(m_isa, m0, k)).collect();
    let mut alpha1 = vec![1.0 / k_total as f64; k_total];
    let mut history: Vec<IrlsState> = Vec::new();
    let mut rank_deficient = vec![false; k_total];
    let mut converged = false;
    let mut solution: Vec<(DVector<f64>, Vec<f64>)> = Vec::new();

    for iteration in 0..cfg.max_iter.max(1) {
        solution.clear();
        let mut max_dev: f64 = 0.0;
        let mut residual = 0.0;
        let mut d_vecs = Vec::with_capacity(k_total);
        for (k, red) in reduced.iter().enumerate() {
            let (d, rank, alphas) = red.solve(alpha1[k], cfg.rank_tol);
            if rank < 9 {
                rank_deficient[k] = true;
            }
            let norm = d.norm();
            max_dev = max_dev.max((norm - 1.0).abs());
            if norm > 0.0 && norm.is_finite() {
                let scaled: Vec<f64> = alphas.iter().map(|a| a / norm).collect();
                residual += red.residual(&(&d / norm), &scaled);
            }
            let mut packed = [0.0; 9];
            packed.copy_from_slice(d.as_slice());
            d_vecs.push(packed);
            solution.push((d, alphas));
        }
        if let Some(prev) = history.last() {
            if residual > prev.residual * (1.0 + 1e-9) + 1e-300 {
                log::warn!(
                    "IRLS residual increased from {:.3e} to {:.3e} at iteration {iteration}",
                    prev.residual,
                    residual
                );
            }
        }
        history.push(IrlsState {
            d_vecs,
            alpha1: alpha1.clone(),
            iteration,
            residual,
        });
        if max_dev < cfg.tol {
            converged = true;
            break;
        }
        for (k, (d, _)) in solution.iter().enumerate() {
            let norm = d.norm();
            if norm > 0.0 && norm.is_finite() {
                alpha1[k] /= norm;
            }
        }
        if solution.iter().all(|(d, _)| !(d.norm() > 0.0)) {
            break;
        }
    }
    if rank_deficient.iter().any(|&r| r) {
        log::warn!("reduced IRLS system is rank-deficient; using the minimum-norm solution");
    }
    if !converged {
        log::warn!("IRLS did not reach unit-norm affinities within {} iterations", cfg.max_iter);
    }

    if cfg.polish {
        for (k, red) in reduced.iter().enumerate() {
            let (d, alphas) = &solution[k];
            let norm = d.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                continue;
            }
            let unit = d / norm;
            let scaled: Vec<f64> = alphas.iter().map(|a| a / norm).collect();
            let current = red.residual(&unit, &scaled);
            if let Some(best) = red.constrained_minimizer(&unit, cfg.rank_tol) {
                let best_alphas = red.fitted_alphas(&best);
                if red.residual(&best, &best_alphas) <= current {
                    solution[k] = (best, best_alphas);
                }
            }
        }
    }

    let mut affinities = Vec::with_capacity(k_total);
    let mut alpha = DMatrix::zeros(images, k_total);
    let mut degenerate = vec![false; k_total];
    for (k, (d, alphas)) in solution.iter().enumerate() {
        let norm = d.norm();
        if norm > 0.0 && norm.is_finite() {
            affinities.push(Matrix3::from_column_slice(d.as_slice()) / norm);
            for i in 0..images {
                alpha[(i, k)] = alphas[i] / norm;
            }
        } else {
            log::warn!("no affinity recoverable for subspace {k}; motion block carries no energy");
            degenerate[k] = true;
            affinities.push(Matrix3::identity() / 3f64.sqrt());
        }
    }
    let residual = block_residual(m_isa, m0, &affinities, &alpha);
    Ok(IrlsOutcome {
        blocks: BlockMotion {
            affinities,
            alpha,
            inverse_affinities: None,
        },
        iterations: history.len(),
        converged,
        residual,
        rank_deficient,
        degenerate,
        history,
    })
}
