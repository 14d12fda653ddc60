//! Translation correction, rigid Tomasi–Kanade factorization and the
//! rank-3K truncation of the non-rigid residual.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::linalg::Svd;
use crate::model::{MeasurementSet, RigidFactor};

/// Default relative threshold (against σ₁) for counting a singular value as nonzero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Rank-3K factorization `ΔW ≈ M′ B′` with `M′ = U′S′/√J` and `B′ = √J V′ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedFactor {
    /// `2I × 3K`.
    pub motion: DMatrix<f64>,
    /// `3K × J`, rows orthogonal with `B′B′ᵀ = J·I`.
    pub basis: DMatrix<f64>,
    /// Singular values of the residual, descending (all of them, not only the kept ones).
    pub singular_values: DVector<f64>,
    /// Sum of squared singular values that were not kept.
    pub discarded_energy: f64,
    /// Number of kept singular values above `rank_tol · σ₁`.
    pub effective_rank: usize,
}

impl TruncatedFactor {
    pub fn subspaces(&self) -> usize {
        self.basis.nrows() / 3
    }
}

/// Removes the per-image centroid from raw tracks.
pub fn center(raw: &DMatrix<f64>) -> Result<MeasurementSet> {
    let (rows, cols) = raw.shape();
    if cols == 0 || rows == 0 {
        return Err(Error::InvalidInput(
            "measurement matrix must have at least one image and one point".into(),
        ));
    }
    if rows % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "measurement matrix needs an even number of rows (x/y pairs), got {rows}"
        )));
    }
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        // Column-major storage.
        let (r, c) = (pos % rows, pos / rows);
        return Err(Error::InvalidInput(format!(
            "non-finite measurement at row {r}, column {c}"
        )));
    }
    let means: Vec<f64> = raw.row_iter().map(|row| row.mean()).collect();
    let mut centered = raw.clone();
    for (r, mean) in means.iter().enumerate() {
        centered.row_mut(r).add_scalar_mut(-mean);
    }
    let translations = means
        .chunks_exact(2)
        .map(|xy| Vector2::new(xy[0], xy[1]))
        .collect();
    Ok(MeasurementSet {
        raw: raw.clone(),
        centered,
        translations,
    })
}

/// Best rank-3 affine factorization of the centered measurements,
/// `M₀ = U₀S₀/√J`, `B₀ = √J V₀ᵀ`. Returns the factor and `W₀ = M₀B₀`.
pub fn rigid_factorize(m: &MeasurementSet) -> Result<(RigidFactor, DMatrix<f64>)> {
    let w = m.centered();
    let (rows, cols) = w.shape();
    if rows < 3 || cols < 3 {
        return Err(Error::Config(format!(
            "rigid factorization needs 2I ≥ 3 and J ≥ 3, got 2I = {rows}, J = {cols}"
        )));
    }
    let svd = Svd::new(w);
    let rank = svd.rank(DEFAULT_RANK_TOL);
    if rank < 3 {
        log::warn!("degenerate rigid structure: measurement rank {rank} < 3");
    }
    let scale = (cols as f64).sqrt();
    let mut motion = DMatrix::zeros(rows, 3);
    let mut shape = DMatrix::zeros(3, cols);
    for r in 0..rank.min(3) {
        let s = svd.singular_values[r];
        motion.set_column(r, &(svd.u.column(r) * (s / scale)));
        shape.set_row(r, &(svd.v_t.row(r) * scale));
    }
    let approx = &motion * &shape;
    Ok((RigidFactor { motion, shape }, approx))
}

/// `ΔW = W − W₀`.
pub fn nonrigid_residual(m: &MeasurementSet, rigid_approx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.centered().shape() != rigid_approx.shape() {
        return Err(Error::Dimension(format!(
            "rigid approximation is {:?}, measurements are {:?}",
            rigid_approx.shape(),
            m.centered().shape()
        )));
    }
    Ok(m.centered() - rigid_approx)
}

/// Keeps the `3K` leading singular triplets of the residual.
///
/// Singular values at or below `rank_tol · σ₁` are zeroed in the motion factor
/// while the corresponding basis rows are kept, so `B′` always has orthogonal
/// rows even for degenerate data.
pub fn truncate(dw: &DMatrix<f64>, k: usize, rank_tol: f64) -> Result<TruncatedFactor> {
    let (rows, cols) = dw.shape();
    let keep = 3 * k;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if keep > rows.min(cols) {
        return Err(Error::Config(format!(
            "rank constraint unreachable: 3K = {keep} exceeds min(2I, J) = {}",
            rows.min(cols)
        )));
    }
    let svd = Svd::new(dw);
    let effective_rank = svd.rank(rank_tol).min(keep);
    if effective_rank < keep {
        log::warn!(
            "non-rigid residual has effective rank {effective_rank} < 3K = {keep}; \
             trailing components are zero-padded"
        );
    }
    let scale = (cols as f64).sqrt();
    let mut motion = DMatrix::zeros(rows, keep);
    let mut basis = DMatrix::zeros(keep, cols);
    for r in 0..keep {
        if r < effective_rank {
            let s = svd.singular_values[r];
            motion.set_column(r, &(svd.u.column(r) * (s / scale)));
        }
        basis.set_row(r, &(svd.v_t.row(r) * scale));
    }
    let discarded_energy = svd
        .singular_values
        .iter()
        .skip(keep)
        .map(|s| s * s)
        .sum();
    Ok(TruncatedFactor {
        motion,
        basis,
        singular_values: svd.singular_values,
        discarded_energy,
        effective_rank,
    })
}
