//! Dense linear-algebra helpers shared by the pipeline stages.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Unordered thin SVD from faer. nalgebra's bidiagonal SVD loses accuracy on
/// rank-deficient input, which is the normal case for degenerate tracks.
fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = a.shape();
    let n = rows.min(cols);
    if n == 0 {
        return (DMatrix::zeros(rows, 0), DVector::zeros(0), DMatrix::zeros(0, cols));
    }
    let m = faer::Mat::<f64>::from_fn(rows, cols, |r, c| a[(r, c)]);
    let svd = m
        .thin_svd()
        .expect("SVD iteration failed to converge on finite input");
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    (
        DMatrix::from_fn(rows, n, |r, c| u[(r, c)]),
        DVector::from_fn(n, |r, _| s[r]),
        DMatrix::from_fn(n, cols, |r, c| v[(c, r)]),
    )
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ` with singular values in
/// descending order and a deterministic sign convention: the entry of largest
/// magnitude in every right singular vector is positive (ties go to the lowest
/// index), with the matching left vector flipped alongside.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn new(a: &DMatrix<f64>) -> Svd {
        let (rows, cols) = a.shape();
        let n = rows.min(cols);
        if n == 0 {
            return Svd {
                u: DMatrix::zeros(rows, 0),
                singular_values: DVector::zeros(0),
                v_t: DMatrix::zeros(0, cols),
            };
        }
        let (u_raw, s_raw, v_t_raw) = thin_svd(a);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| s_raw[y].total_cmp(&s_raw[x]).then(x.cmp(&y)));

        let mut u = DMatrix::zeros(rows, n);
        let mut v_t = DMatrix::zeros(n, cols);
        let mut s = DVector::zeros(n);
        for (dst, &src) in order.iter().enumerate() {
            s[dst] = s_raw[src];
            let mut v_row = v_t_raw.row(src).into_owned();
            let mut u_col = u_raw.column(src).into_owned();
            let mut pivot = 0;
            for c in 1..cols {
                if v_row[c].abs() > v_row[pivot].abs() {
                    pivot = c;
                }
            }
            if v_row[pivot] < 0.0 {
                v_row.neg_mut();
                u_col.neg_mut();
            }
            v_t.set_row(dst, &v_row);
            u.set_column(dst, &u_col);
        }
        Svd {
            u,
            singular_values: s,
            v_t,
        }
    }

    /// Number of singular values strictly above `rel_tol · σ₁`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let Some(&top) = self.singular_values.as_slice().first() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .filter(|&&s| s > rel_tol * top)
            .count()
    }
}

/// Minimum-norm least-squares solution of `A X = B` through a truncated
/// pseudo-inverse. Singular values at or below `rel_tol · σ₁` are discarded.
/// Returns the solution and the numerical rank of `A`.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let svd = Svd::new(a);
    let rank = svd.rank(rel_tol);
    let mut x = DMatrix::zeros(a.ncols(), b.ncols());
    if rank == 0 {
        return (x, 0);
    }
    let ut_b = svd.u.columns(0, rank).transpose() * b;
    for r in 0..rank {
        let inv = 1.0 / svd.singular_values[r];
        let scaled = ut_b.row(r) * inv;
        x += svd.v_t.row(r).transpose() * scaled;
    }
    (x, rank)
}

/// Nearest matrix with orthonormal rows, `(W Wᵀ)^{-1/2} W`, computed as `U Vᵀ`
/// from the SVD of `W`.
pub fn symmetric_orthogonalize(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (u, _, v_t) = thin_svd(w);
    u * v_t
}

/// Haar-distributed random orthogonal matrix from the QR factorization of a
/// Gaussian matrix, with the diagonal sign of `R` folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Largest deviation of `A Aᵀ` from the identity.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let gram = a * a.transpose();
    let id = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
    (gram - id).amax()
}

/// `‖A − B‖_F / ‖B‖_F`, or the absolute difference when `B` is zero.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Ratio of largest to smallest singular value; infinite for a singular matrix.
pub fn condition_number(m: &Matrix3<f64>) -> f64 {
    let (_, s, _) = thin_svd(&DMatrix::from_column_slice(3, 3, m.as_slice()));
    let max = s.max();
    let min = s.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Moore–Penrose pseudo-inverse of a 3×3 matrix.
pub fn pseudo_inverse3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let dynamic = DMatrix::from_column_slice(3, 3, m.as_slice());
    let (x, _) = lstsq(&dynamic, &DMatrix::identity(3, 3), 1e-12);
    Matrix3::from_column_slice(x.as_slice())
}

pub(crate) fn to_matrix3(m: &DMatrix<f64>) -> Matrix3<f64> {
    debug_assert_eq!(m.shape(), (3, 3));
    Matrix3::from_column_slice(m.as_slice())
}
