//! Independent subspace analysis: grouping of the non-rigid components into
//! `K` independent three-dimensional subspaces.
//!
//! Two routes are provided. [`fast_isa`] estimates the subspaces directly
//! with a fixed-point iteration on the subspace-energy contrast, restarted
//! several times with the most likely restart kept. The alternative runs
//! [`crate::ica::fast_ica`] and pools its one-dimensional components with
//! [`greedy_pool`] on the [`mode_covariance`] of the projections.

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::TruncatedFactor;
use crate::ica::{self, IcaResult};
use crate::linalg;
use crate::model::SubspaceSeparation;

/// Largest problem [`exhaustive_pool`] accepts.
pub const EXHAUSTIVE_LIMIT: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCovariance {
    pub matrix: DMatrix<f64>,
    /// Sum of squared entries outside the 3×3 diagonal blocks.
    pub off_block_energy: f64,
}

impl ModeCovariance {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<ModeCovariance> {
        let n = matrix.nrows();
        if matrix.ncols() != n || !n.is_multiple_of(3) {
            return Err(Error::Dimension(format!(
                "mode covariance must be square with a multiple of 3 rows, got {}×{}",
                n,
                matrix.ncols()
            )));
        }
        let identity: Vec<usize> = (0..n).collect();
        let off_block_energy = off_block_energy(&matrix, &identity);
        Ok(ModeCovariance {
            matrix,
            off_block_energy,
        })
    }

    /// Off-block energy as a fraction of the total squared Frobenius norm.
    pub fn off_block_ratio(&self) -> f64 {
        let total = self.matrix.norm_squared();
        if total > 0.0 {
            self.off_block_energy / total
        } else {
            0.0
        }
    }
}

/// Component order: position `q` of the pooled basis holds original component `perm[q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooling {
    pub perm: Vec<usize>,
    /// Off-block energy of the permuted covariance.
    pub objective: f64,
}

/// Off-block energy of `C` after reordering its indices by `perm`.
pub fn off_block_energy(c: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = perm.len();
    let mut e = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a / 3 != b / 3 {
                let v = c[(perm[a], perm[b])];
                e += v * v;
            }
        }
    }
    e
}

/// `C = (1/J)·B ΔWᵀ ΔW Bᵀ − 1/(4I²J)·B ΔWᵀ 1 1ᵀ ΔW Bᵀ` for ICA sources `B` (`3K × J`)
/// and the non-rigid residual `ΔW` (`2I × J`).
pub fn mode_covariance(b_ica: &DMatrix<f64>, dw: &DMatrix<f64>) -> Result<ModeCovariance> {
    if b_ica.ncols() != dw.ncols() {
        return Err(Error::Dimension(format!(
            "sources have {} points, residual has {}",
            b_ica.ncols(),
            dw.ncols()
        )));
    }
    let j = dw.ncols() as f64;
    let images = (dw.nrows() / 2) as f64;
    let proj = b_ica * dw.transpose();
    let summed = proj.column_sum();
    let mut c = &proj * proj.transpose() / j;
    c -= &summed * summed.transpose() / (4.0 * images * images * j);
    let c = (&c + c.transpose()) * 0.5;
    ModeCovariance::from_matrix(c)
}

fn check_pool_shape(c: &ModeCovariance, k: usize) -> Result<usize> {
    let n = c.matrix.nrows();
    if n != 3 * k {
        return Err(Error::Dimension(format!(
            "covariance is {n}×{n}, expected 3K = {}",
            3 * k
        )));
    }
    Ok(n)
}

/// Off-block energy carried by the rows and columns `a` and `b`.
fn touched_energy(c: &DMatrix<f64>, perm: &[usize], a: usize, b: usize) -> f64 {
    let n = perm.len();
    let mut e = 0.0;
    for x in [a, b] {
        for y in 0..n {
            if x / 3 != y / 3 {
                let v = c[(perm[x], perm[y])];
                e += v * v;
            }
        }
    }
    for x in (0..n).filter(|&x| x != a && x != b) {
        for y in [a, b] {
            if x / 3 != y / 3 {
                let v = c[(perm[x], perm[y])];
                e += v * v;
            }
        }
    }
    e
}

/// Greedy pooling: repeatedly applies the index transposition with the largest
/// decrease of off-block energy until none improves. Ties keep the
/// lexicographically smallest pair.
pub fn greedy_pool(c: &ModeCovariance, k: usize) -> Result<Pooling> {
    let n = check_pool_shape(c, k)?;
    let mut perm: Vec<usize> = (0..n).collect();
    let threshold = 1e-13 * c.matrix.norm_squared();
    // Each accepted swap strictly lowers the energy, so this bound is never hit
    // unless rounding conspires; it keeps the loop finite regardless.
    let max_swaps = n * n * n + 16;
    for _ in 0..max_swaps {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            for b in (a + 1)..n {
                if a / 3 == b / 3 {
                    continue;
                }
                let before = touched_energy(&c.matrix, &perm, a, b);
                perm.swap(a, b);
                let after = touched_energy(&c.matrix, &perm, a, b);
                perm.swap(a, b);
                let delta = after - before;
                if delta < -threshold && best.is_none_or(|(_, _, d)| delta < d) {
                    best = Some((a, b, delta));
                }
            }
        }
        match best {
            Some((a, b, _)) => perm.swap(a, b),
            None => break,
        }
    }
    let objective = off_block_energy(&c.matrix, &perm);
    Ok(Pooling { perm, objective })
}

/// Brute-force minimum of the off-block energy over all index permutations.
pub fn exhaustive_pool(c: &ModeCovariance, k: usize) -> Result<Pooling> {
    let n = check_pool_shape(c, k)?;
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::Refused(format!(
            "exhaustive pooling over {n}! permutations (limit {EXHAUSTIVE_LIMIT} components)"
        )));
    }
    let mut best_perm: Vec<usize> = (0..n).collect();
    let mut best = off_block_energy(&c.matrix, &best_perm);
    for perm in (0..n).permutations(n) {
        let e = off_block_energy(&c.matrix, &perm);
        if e < best {
            best = e;
            best_perm = perm;
        }
    }
    Ok(Pooling {
        perm: best_perm,
        objective: best,
    })
}

/// Separation from ICA components reordered by `pooling`:
/// `B_ISA = P A_ICAᵀ B′`, `M_ISA = M′ A_ICA Pᵀ`.
pub fn pool_to_separation(
    icares: &IcaResult,
    pooling: &Pooling,
    motion: &DMatrix<f64>,
    basis: &DMatrix<f64>,
    covariance: &ModeCovariance,
) -> Result<SubspaceSeparation> {
    let n = icares.transform.nrows();
    if pooling.perm.len() != n
        || motion.ncols() != n
        || basis.nrows() != n
        || covariance.matrix.nrows() != n
    {
        return Err(Error::Dimension(format!(
            "pooling inputs disagree on 3K = {n}"
        )));
    }
    if !n.is_multiple_of(3) {
        return Err(Error::Dimension(format!("3K = {n} is not a multiple of 3")));
    }
    let transform = icares.transform.select_columns(pooling.perm.iter());
    let permuted_cov = DMatrix::from_fn(n, n, |a, b| {
        covariance.matrix[(pooling.perm[a], pooling.perm[b])]
    });
    Ok(SubspaceSeparation {
        subspaces: n / 3,
        motion: motion * &transform,
        basis: transform.transpose() * basis,
        transform,
        covariance: permuted_cov,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsaConfig {
    pub restarts: usize,
    /// Convergence threshold on the change of the subspace projectors.
    pub tol: f64,
    pub max_iter: usize,
    /// Smoothing inside `√(u + ε)`.
    pub epsilon: f64,
    /// Restart `r` is seeded with `seed + r`.
    pub seed: u64,
}

impl Default for IsaConfig {
    fn default() -> Self {
        IsaConfig {
            restarts: 10,
            tol: 1e-7,
            max_iter: 500,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// Outcome of every FastISA restart plus the selection made among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsaDiagnostics {
    pub log_likelihoods: Vec<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub selected: usize,
    pub selected_seed: u64,
}

impl IsaDiagnostics {
    pub fn any_converged(&self) -> bool {
        self.converged.iter().any(|&c| c)
    }
}

/// Model log-likelihood `Σ_j Σ_k −√(u_k(j) + ε)` of sources `y` (`3K × J`), with
/// `u_k(j)` the energy of sample `j` in subspace `k`. Normalization omitted.
pub fn isa_log_likelihood(y: &DMatrix<f64>, epsilon: f64) -> f64 {
    let k = y.nrows() / 3;
    let mut total = 0.0;
    for col in y.column_iter() {
        for kk in 0..k {
            let u: f64 = (0..3).map(|r| col[3 * kk + r].powi(2)).sum();
            total -= (u + epsilon).sqrt();
        }
    }
    total
}

struct Restart {
    unmixing: DMatrix<f64>,
    log_likelihood: f64,
    converged: bool,
    iterations: usize,
}

fn projector_change(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> f64 {
    (0..k)
        .map(|kk| {
            let pa = a.rows(3 * kk, 3).transpose() * a.rows(3 * kk, 3);
            let pb = b.rows(3 * kk, 3).transpose() * b.rows(3 * kk, 3);
            (pa - pb).norm_squared() / 4.0
        })
        .fold(0.0, f64::max)
}

fn fast_isa_restart(z: &DMatrix<f64>, k: usize, cfg: &IsaConfig, seed: u64) -> Restart {
    let n = z.nrows();
    let j = z.ncols();
    let inv_j = 1.0 / j as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = linalg::random_orthogonal(n, &mut rng);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        let y = &w * z;
        let mut weighted = DMatrix::zeros(n, j);
        let mut beta = vec![0.0; n];
        for c in 0..j {
            for kk in 0..k {
                let u: f64 = (0..3).map(|r| y[(3 * kk + r, c)].powi(2)).sum::<f64>() + cfg.epsilon;
                let root = u.sqrt();
                // G(u) = −√u  ⇒  g = −1/(2√u), g′ = 1/(4u√u).
                let g = -0.5 / root;
                let dg = 0.25 / (u * root);
                for r in 3 * kk..3 * kk + 3 {
                    let yr = y[(r, c)];
                    weighted[(r, c)] = yr * g;
                    beta[r] += g + 2.0 * yr * yr * dg;
                }
            }
        }
        let mut next = &weighted * z.transpose() * inv_j;
        for r in 0..n {
            let b = beta[r] * inv_j;
            for c in 0..n {
                next[(r, c)] -= b * w[(r, c)];
            }
        }
        let next = linalg::symmetric_orthogonalize(&next);
        debug_assert!(linalg::orthonormality_defect(&next) < 1e-8);
        let change = projector_change(&next, &w, k);
        w = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let log_likelihood = isa_log_likelihood(&(&w * z), cfg.epsilon);
    Restart {
        unmixing: w,
        log_likelihood,
        converged,
        iterations,
    }
}

/// FastISA on the truncated non-rigid factor, restarted `cfg.restarts` times;
/// the restart with the highest log-likelihood is kept (ties: lowest seed).
pub fn fast_isa(
    factor: &TruncatedFactor,
    dw: &DMatrix<f64>,
    cfg: &IsaConfig,
) -> Result<(SubspaceSeparation, IsaDiagnostics)> {
    let bp = &factor.basis;
    let n = bp.nrows();
    if n == 0 || !n.is_multiple_of(3) {
        return Err(Error::Dimension(format!(
            "ISA needs 3K rows, got {n}"
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::Config("FastISA needs at least one restart".into()));
    }
    ica::whitened_rank(bp)?;
    let k = n / 3;

    let restarts: Vec<Restart> = if k == 1 {
        // A single subspace: every rotation is a fixed point of the contrast.
        let w = DMatrix::identity(n, n);
        vec![Restart {
            log_likelihood: isa_log_likelihood(bp, cfg.epsilon),
            unmixing: w,
            converged: true,
            iterations: 0,
        }]
    } else {
        (0..cfg.restarts)
            .into_par_iter()
            .map(|r| fast_isa_restart(bp, k, cfg, cfg.seed.wrapping_add(r as u64)))
            .collect()
    };

    let mut selected = 0;
    for (r, restart) in restarts.iter().enumerate() {
        if restart.log_likelihood > restarts[selected].log_likelihood {
            selected = r;
        }
    }
    let diagnostics = IsaDiagnostics {
        log_likelihoods: restarts.iter().map(|r| r.log_likelihood).collect(),
        converged: restarts.iter().map(|r| r.converged).collect(),
        iterations: restarts.iter().map(|r| r.iterations).collect(),
        selected,
        selected_seed: cfg.seed.wrapping_add(selected as u64),
    };
    if !diagnostics.any_converged() {
        log::warn!(
            "no FastISA restart converged within {} iterations; keeping the most likely one",
            cfg.max_iter
        );
    }

    let transform = restarts[selected].unmixing.transpose();
    let basis = transform.transpose() * bp;
    let covariance = mode_covariance(&basis, dw)?.matrix;
    Ok((
        SubspaceSeparation {
            subspaces: k,
            motion: &factor.motion * &transform,
            basis,
            transform,
            covariance,
        },
        diagnostics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = gaussian(rng, n, n);
        (&a + a.transpose()) * 0.5
    }

    fn block_diagonal(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(3 * k, 3 * k);
        for kk in 0..k {
            let b = random_symmetric(rng, 3);
            c.view_mut((3 * kk, 3 * kk), (3, 3)).copy_from(&b);
        }
        c
    }

    fn conjugate(c: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
        let n = perm.len();
        DMatrix::from_fn(n, n, |a, b| c[(perm[a], perm[b])])
    }

    #[test]
    fn zero_residual_gives_zero_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = gaussian(&mut rng, 6, 10);
        let c = mode_covariance(&b, &DMatrix::zeros(8, 10)).unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(6, 6));
        assert_eq!(c.off_block_energy, 0.0);
    }

    #[test]
    fn covariance_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (images, j, n) = (2, 3, 3);
        let b = gaussian(&mut rng, n, j);
        let dw = gaussian(&mut rng, 2 * images, j);
        let c = mode_covariance(&b, &dw).unwrap();
        let rows = 2 * images;
        for a in 0..n {
            for q in 0..n {
                let mut first = 0.0;
                for r in 0..rows {
                    for p in 0..j {
                        for s in 0..j {
                            first += b[(a, p)] * dw[(r, p)] * dw[(r, s)] * b[(q, s)];
                        }
                    }
                }
                let mut second = 0.0;
                for r in 0..rows {
                    for t in 0..rows {
                        for p in 0..j {
                            for s in 0..j {
                                second += b[(a, p)] * dw[(r, p)] * dw[(t, s)] * b[(q, s)];
                            }
                        }
                    }
                }
                let expected = first / j as f64
                    - second / (4.0 * (images * images) as f64 * j as f64);
                assert!((c.matrix[(a, q)] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sources_orthogonal_to_residual_leave_only_mean_term() {
        // Rows of B orthogonal to ΔW's row space make B ΔWᵀ = 0.
        let dw = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 4, &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let c = mode_covariance(&b, &dw).unwrap();
        assert_eq!(c.matrix, DMatrix::zeros(3, 3));
    }

    #[test]
    fn covariance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = gaussian(&mut rng, 9, 40);
        let dw = gaussian(&mut rng, 12, 40);
        let c = mode_covariance(&b, &dw).unwrap();
        assert!(relative_error(&c.matrix.transpose(), &c.matrix) < 1e-10);
        let recomputed = off_block_energy(&c.matrix, &(0..9).collect::<Vec<_>>());
        assert_eq!(recomputed, c.off_block_energy);
    }

    #[test]
    fn block_diagonal_is_left_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ModeCovariance::from_matrix(block_diagonal(&mut rng, 3)).unwrap();
        let pool = greedy_pool(&c, 3).unwrap();
        assert_eq!(pool.perm, (0..9).collect::<Vec<_>>());
        assert_eq!(pool.objective, 0.0);
    }

    #[test]
    fn greedy_undoes_a_known_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2, 3, 4] {
            let base = block_diagonal(&mut rng, k);
            let mut shuffle: Vec<usize> = (0..3 * k).collect();
            for i in (1..shuffle.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffle.swap(i, j);
            }
            let c = ModeCovariance::from_matrix(conjugate(&base, &shuffle)).unwrap();
            let pool = greedy_pool(&c, k).unwrap();
            assert!(pool.objective < 1e-20, "K={k}: objective {}", pool.objective);
        }
    }

    #[test]
    fn greedy_never_worse_than_identity_and_exhaustive_never_worse_than_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let c = ModeCovariance::from_matrix(random_symmetric(&mut rng, 6)).unwrap();
            let g = greedy_pool(&c, 2).unwrap();
            let e = exhaustive_pool(&c, 2).unwrap();
            assert!(g.objective <= c.off_block_energy);
            assert!(e.objective <= g.objective + 1e-12);
            let mut sorted = g.perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn exhaustive_single_block_and_refusal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c1 = ModeCovariance::from_matrix(random_symmetric(&mut rng, 3)).unwrap();
        let p = exhaustive_pool(&c1, 1).unwrap();
        assert_eq!(p.perm, vec![0, 1, 2]);
        assert_eq!(p.objective, 0.0);
        let c4 = ModeCovariance::from_matrix(random_symmetric(&mut rng, 12)).unwrap();
        assert!(matches!(exhaustive_pool(&c4, 4), Err(Error::Refused(_))));
        assert!(matches!(greedy_pool(&c4, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_preserves_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let motion = gaussian(&mut rng, 10, 6);
        let basis = gaussian(&mut rng, 6, 30);
        let ica = IcaResult {
            transform: linalg::random_orthogonal(6, &mut rng),
            iterations: 1,
            converged: true,
            seed: 0,
        };
        let cov = ModeCovariance::from_matrix(random_symmetric(&mut rng, 6)).unwrap();
        let identity = Pooling {
            perm: (0..6).collect(),
            objective: cov.off_block_energy,
        };
        let sep = pool_to_separation(&ica, &identity, &motion, &basis, &cov).unwrap();
        assert_eq!(sep.basis, ica.sources(&basis));

        let pooling = Pooling {
            perm: vec![4, 0, 5, 2, 1, 3],
            objective: 0.0,
        };
        let sep = pool_to_separation(&ica, &pooling, &motion, &basis, &cov).unwrap();
        let original = &motion * &basis;
        assert!(relative_error(&(&sep.motion * &sep.basis), &original) < 1e-10);
        assert!(linalg::orthonormality_defect(&sep.transform) < 1e-12);
        let sources = ica.sources(&basis);
        for (q, &p) in pooling.perm.iter().enumerate() {
            assert_eq!(sep.basis.row(q), sources.row(p));
            assert_eq!(sep.covariance[(q, q)], cov.matrix[(p, p)]);
        }
    }

    #[test]
    fn single_subspace_isa_is_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw = gaussian(&mut rng, 8, 50);
        let factor = crate::factor::truncate(&raw, 1, 1e-10).unwrap();
        let (sep, diag) = fast_isa(&factor, &raw, &IsaConfig::default()).unwrap();
        assert!(linalg::orthonormality_defect(&sep.transform) < 1e-12);
        assert!(
            relative_error(&(&sep.motion * &sep.basis), &(&factor.motion * &factor.basis)) < 1e-10
        );
        assert_eq!(diag.log_likelihoods.len(), 1);
    }

    #[test]
    fn likelihood_selection_picks_the_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = gaussian(&mut rng, 12, 300);
        let factor = crate::factor::truncate(&raw, 2, 1e-10).unwrap();
        let cfg = IsaConfig {
            restarts: 4,
            max_iter: 100,
            ..IsaConfig::default()
        };
        let (sep, diag) = fast_isa(&factor, &raw, &cfg).unwrap();
        let best = diag
            .log_likelihoods
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(diag.log_likelihoods[diag.selected], best);
        assert!(linalg::orthonormality_defect(&sep.transform) < 1e-10);
        assert!(
            relative_error(&(&sep.motion * &sep.basis), &(&factor.motion * &factor.basis)) < 1e-10
        );
    }
}
