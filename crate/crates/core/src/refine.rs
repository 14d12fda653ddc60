//! Non-linear refinement of the block motion by alternating least squares.
//!
//! With `(1/√J) B_ISA` having orthonormal rows, the reprojection error splits
//! into `‖T − M₀^α E‖²_F` plus a term independent of the unknowns, where
//! `T = ΔW B_ISAᵀ / √J` and `E` is block-diagonal with `E_k = D_k⁻¹`. The
//! objective is linear in `E` for fixed `α` and vice versa.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{BlockMotion, SINGULAR_CONDITION};

/// Tolerance of the orthonormality check on `B_ISA`.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Stop when the relative objective decrease over one sweep falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative singular-value cutoff for the per-block `E_k` solves.
    pub rank_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            tol: 1e-10,
            max_iter: 200,
            rank_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefineTrace {
    /// Objective at the initialization followed by the value after every half-step.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Degeneracies met on the way (zero denominators, reinitialized columns, singular exits).
    pub notes: Vec<String>,
}

/// `T = (1/√J) ΔW B_ISAᵀ`.
pub fn target_matrix(dw: &DMatrix<f64>, b_isa: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if dw.ncols() != b_isa.ncols() {
        return Err(Error::Dimension(format!(
            "residual has {} points, basis has {}",
            dw.ncols(),
            b_isa.ncols()
        )));
    }
    let j = b_isa.ncols() as f64;
    let defect = linalg::orthonormality_defect(&(b_isa / j.sqrt()));
    if defect > ORTHONORMAL_TOL {
        return Err(Error::Precondition(format!(
            "rows of B_ISA/√J are not orthonormal (max deviation {defect:.3e}); \
             the bilinear reduction does not apply"
        )));
    }
    Ok(dw * b_isa.transpose() / j.sqrt())
}

/// `‖T − M₀^α E‖²_F` for block-diagonal `E`.
pub fn bilinear_objective(
    t: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    inverses: &[Matrix3<f64>],
    alpha: &DMatrix<f64>,
) -> f64 {
    let images = m0.nrows() / 2;
    let mut total = 0.0;
    for i in 0..images {
        let rigid = m0.fixed_view::<2, 3>(2 * i, 0);
        for (k, e) in inverses.iter().enumerate() {
            let target = t.fixed_view::<2, 3>(2 * i, 3 * k);
            total += (target - rigid * e * alpha[(i, k)]).norm_squared();
        }
    }
    total
}

fn initial_inverses(init: &BlockMotion, notes: &mut Vec<String>) -> Vec<Matrix3<f64>> {
    if let Some(inv) = &init.inverse_affinities {
        return inv.clone();
    }
    init.affinities
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let condition = linalg::condition_number(d);
            match d.try_inverse() {
                Some(inv) if condition < SINGULAR_CONDITION => inv,
                _ => {
                    notes.push(format!(
                        "initial D_{k} singular (condition {condition:.3e}); started from its pseudo-inverse"
                    ));
                    linalg::pseudo_inverse3(d)
                }
            }
        })
        .collect()
}

/// Alternating least squares on `‖T − M₀^α E‖²_F`: each sweep first solves every
/// `E_k` with `α` fixed, then every `α_kⁱ` in closed form with `E` fixed.
pub fn refine_als(
    t: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    init: &BlockMotion,
    cfg: &RefineConfig,
) -> Result<(BlockMotion, RefineTrace)> {
    let images = m0.nrows() / 2;
    let k_total = init.subspaces();
    if m0.shape() != (2 * images, 3) || !m0.nrows().is_multiple_of(2) {
        return Err(Error::Dimension("rigid motion must be 2I×3".into()));
    }
    if t.shape() != (2 * images, 3 * k_total) {
        return Err(Error::Dimension(format!(
            "target must be {}×{}, got {}×{}",
            2 * images,
            3 * k_total,
            t.nrows(),
            t.ncols()
        )));
    }
    if init.alpha.shape() != (images, k_total) {
        return Err(Error::Dimension("initial alpha must be I×K".into()));
    }

    let mut trace = RefineTrace::default();
    let mut inverses = initial_inverses(init, &mut trace.notes);
    let mut alpha = init.alpha.clone();
    let mut reinitialized = vec![false; k_total];
    let t_energy = t.norm_squared();
    let mut current = bilinear_objective(t, m0, &inverses, &alpha);
    trace.objectives.push(current);

    while trace.iterations < cfg.max_iter {
        trace.iterations += 1;
        let before = current;

        // (a) E_k from the stacked system [α_kⁱ M₀ⁱ]_i E_k = [T_kⁱ]_i.
        for (k, inverse) in inverses.iter_mut().enumerate() {
            let mut lhs = DMatrix::zeros(2 * images, 3);
            for i in 0..images {
                lhs.fixed_view_mut::<2, 3>(2 * i, 0)
                    .copy_from(&(m0.fixed_view::<2, 3>(2 * i, 0) * alpha[(i, k)]));
            }
            let rhs = t.columns(3 * k, 3).into_owned();
            let (solution, rank) = linalg::lstsq(&lhs, &rhs, cfg.rank_tol);
            if rank > 0 {
                *inverse = linalg::to_matrix3(&solution);
            }
        }
        trace
            .objectives
            .push(bilinear_objective(t, m0, &inverses, &alpha));

        // (b) α_kⁱ = ⟨T_kⁱ, M₀ⁱ E_k⟩ / ‖M₀ⁱ E_k‖².
        for i in 0..images {
            let rigid = m0.fixed_view::<2, 3>(2 * i, 0);
            for (k, inverse) in inverses.iter().enumerate() {
                let basis = rigid * inverse;
                let denom = basis.norm_squared();
                alpha[(i, k)] = if denom > 0.0 {
                    t.fixed_view::<2, 3>(2 * i, 3 * k).dot(&basis) / denom
                } else {
                    trace
                        .notes
                        .push(format!("‖M₀ⁱE_k‖ = 0 at image {i}, subspace {k}; α set to 0"));
                    0.0
                };
            }
        }
        current = bilinear_objective(t, m0, &inverses, &alpha);
        trace.objectives.push(current);

        let largest = alpha.amax();
        for k in 0..k_total {
            let column_max = alpha.column(k).amax();
            if !reinitialized[k] && column_max <= 1e-14 * largest && init.alpha.column(k).amax() > 0.0
            {
                reinitialized[k] = true;
                alpha.set_column(k, &init.alpha.column(k));
                trace
                    .notes
                    .push(format!("α column {k} collapsed to zero; reinitialized once"));
                current = bilinear_objective(t, m0, &inverses, &alpha);
            }
        }

        let decrease = before - current;
        if decrease <= cfg.tol * before.max(f64::EPSILON * t_energy) {
            trace.converged = true;
            break;
        }
    }

    let mut affinities = Vec::with_capacity(k_total);
    let mut stored_inverses = Vec::with_capacity(k_total);
    for (k, e) in inverses.iter().enumerate() {
        let condition = linalg::condition_number(e);
        let d = match e.try_inverse() {
            Some(d) if condition < SINGULAR_CONDITION => d,
            _ => {
                trace.notes.push(format!(
                    "E_{k} singular at exit (condition {condition:.3e}); D_{k} is its pseudo-inverse"
                ));
                log::warn!("refined affinity {k} is singular; reprojection uses D⁻¹ directly");
                linalg::pseudo_inverse3(e)
            }
        };
        let scale = d.norm();
        if scale > 0.0 {
            affinities.push(d / scale);
            stored_inverses.push(e * scale);
            for i in 0..images {
                alpha[(i, k)] /= scale;
            }
        } else {
            affinities.push(Matrix3::identity() / 3f64.sqrt());
            stored_inverses.push(*e);
        }
    }
    Ok((
        BlockMotion {
            affinities,
            alpha,
            inverse_affinities: Some(stored_inverses),
        },
        trace,
    ))
}
