//! Independent oracles shared by the integration tests and the acceptance run.
//!
//! None of these reuse the library's solvers: subspace angles go through
//! nalgebra's QR and SVD, matching is brute force, and the block objective is
//! minimized by plain projected gradient descent.

#![allow(dead_code)]

use itertools::Itertools;
use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Orthonormal basis (as columns) of the row space of `a`, via Gram–Schmidt.
fn row_space_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<nalgebra::DVector<f64>> = Vec::new();
    for r in 0..a.nrows() {
        let mut v = a.row(r).transpose();
        for _ in 0..2 {
            for q in &cols {
                let p = q.dot(&v);
                v -= q * p;
            }
        }
        let n = v.norm();
        if n > 1e-12 * a.norm() {
            cols.push(v / n);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Largest principal angle in degrees between the row spaces of `a` and `b`.
pub fn max_principal_angle_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = row_space_basis(a);
    let qb = row_space_basis(b);
    let cosines = (qa.transpose() * qb).singular_values();
    let smallest = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    smallest.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Worst block angle under the best matching of recovered 3-row blocks to
/// true ones, found by trying every permutation.
pub fn matched_subspace_angle_deg(recovered: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let k = truth.nrows() / 3;
    let angles: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    max_principal_angle_deg(
                        &recovered.rows(3 * a, 3).into_owned(),
                        &truth.rows(3 * b, 3).into_owned(),
                    )
                })
                .collect()
        })
        .collect();
    (0..k)
        .permutations(k)
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(a, &b)| angles[a][b])
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Amari performance index of a square matrix: zero exactly for scaled
/// permutation matrices.
pub fn amari_index(p: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let a = p.map(f64::abs);
    let mut total = 0.0;
    for i in 0..n {
        let row = a.row(i);
        total += row.sum() / row.max() - 1.0;
        let col = a.column(i);
        total += col.sum() / col.max() - 1.0;
    }
    total / (2.0 * n as f64 * (n as f64 - 1.0).max(1.0))
}

/// `Σ_{i,k} ‖M_kⁱ D_k − α_kⁱ M₀ⁱ‖²_F` by explicit loops over matrix entries.
pub fn block_objective_loops(
    m_isa: &DMatrix<f64>,
    m0: &DMatrix<f64>,
    d: &[Matrix3<f64>],
    alpha: &DMatrix<f64>,
) -> f64 {
    let mut total = 0.0;
    for i in 0..m0.nrows() / 2 {
        for (k, dk) in d.iter().enumerate() {
            for r in 0..2 {
                for c in 0..3 {
                    let mut v = 0.0;
                    for s in 0..3 {
                        v += m_isa[(2 * i + r, 3 * k + s)] * dk[(s, c)];
                    }
                    v -= alpha[(i, k)] * m0[(2 * i + r, c)];
                    total += v * v;
                }
            }
        }
    }
    total
}

/// Minimizes `Σ_i ‖M_kⁱ D − αⁱ M₀ⁱ‖²` over unit-Frobenius `D` and free `α` by
/// projected gradient descent on the sphere, with `α` eliminated in closed
/// form at every step. Returns the attained objective.
pub fn projected_gradient_block(m_isa: &DMatrix<f64>, m0: &DMatrix<f64>, k: usize, start: Matrix3<f64>) -> f64 {
    let images = m0.nrows() / 2;
    let blocks: Vec<nalgebra::Matrix2x3<f64>> = (0..images)
        .map(|i| m_isa.fixed_view::<2, 3>(2 * i, 3 * k).into_owned())
        .collect();
    let rigid: Vec<nalgebra::Matrix2x3<f64>> = (0..images)
        .map(|i| m0.fixed_view::<2, 3>(2 * i, 0).into_owned())
        .collect();
    let value_and_grad = |d: &Matrix3<f64>| {
        let mut f = 0.0;
        let mut g = Matrix3::zeros();
        for (n, m) in blocks.iter().zip(&rigid) {
            let p = n * d;
            let mm = m.norm_squared();
            let alpha = if mm > 0.0 { p.dot(m) / mm } else { 0.0 };
            let r = p - m * alpha;
            f += r.norm_squared();
            // Envelope theorem: α is optimal, so only the explicit D term remains.
            g += n.transpose() * r * 2.0;
        }
        (f, g)
    };
    let mut d = start / start.norm();
    let (mut f, _) = value_and_grad(&d);
    let mut step = 1.0;
    for _ in 0..200_000 {
        let (_, g) = value_and_grad(&d);
        let tangent = g - d * g.dot(&d);
        if tangent.norm() < 1e-15 * (1.0 + f.sqrt()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand = d - tangent * step;
            let cand = cand / cand.norm();
            let (fc, _) = value_and_grad(&cand);
            if fc <= f - 1e-4 * step * tangent.norm_squared() {
                d = cand;
                f = fc;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    f
}

/// Noise-free block-recovery instance `M_kⁱ = α_kⁱ M₀ⁱ D_k⁻¹` with
/// well-conditioned unit-norm affinities.
pub struct BlockInstance {
    pub m_isa: DMatrix<f64>,
    pub m0: DMatrix<f64>,
    pub d: Vec<Matrix3<f64>>,
    pub alpha: DMatrix<f64>,
}

pub fn block_instance(seed: u64, images: usize, k: usize) -> BlockInstance {
    let mut r = rng(seed);
    let m0 = gaussian(&mut r, 2 * images, 3);
    let d: Vec<Matrix3<f64>> = (0..k)
        .map(|_| {
            let x = Matrix3::from_fn(|_, _| r.sample::<f64, _>(StandardNormal)) * 0.3 + Matrix3::identity();
            x / x.norm()
        })
        .collect();
    let alpha = DMatrix::from_fn(images, k, |_, _| {
        let v: f64 = r.sample(StandardNormal);
        v + v.signum() * 0.2
    });
    let mut m_isa = DMatrix::zeros(2 * images, 3 * k);
    for i in 0..images {
        for kk in 0..k {
            let block = m0.fixed_view::<2, 3>(2 * i, 0) * d[kk].try_inverse().unwrap() * alpha[(i, kk)];
            m_isa.fixed_view_mut::<2, 3>(2 * i, 3 * kk).copy_from(&block);
        }
    }
    BlockInstance { m_isa, m0, d, alpha }
}
