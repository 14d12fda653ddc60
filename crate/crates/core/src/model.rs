//! Domain types and the reprojection algebra.
//!
//! Matrices follow one layout throughout: image `i` owns the row pair
//! `(2i, 2i + 1)` holding its x and y tracks, and every column is one point.
//! Motion matrices are therefore `2I × 3·(blocks)` and shape matrices
//! `3·(blocks) × J`.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2};

use crate::error::{Error, Result};
use crate::linalg;

/// Affinities whose condition number exceeds this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Raw and translation-corrected 2D tracks of `I` images and `J` points.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub(crate) raw: DMatrix<f64>,
    pub(crate) centered: DMatrix<f64>,
    pub(crate) translations: Vec<Vector2<f64>>,
}

impl MeasurementSet {
    pub fn image_count(&self) -> usize {
        self.raw.nrows() / 2
    }

    pub fn point_count(&self) -> usize {
        self.raw.ncols()
    }

    /// Measurements as observed, `2I × J`.
    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// Measurements with the per-image centroid removed.
    pub fn centered(&self) -> &DMatrix<f64> {
        &self.centered
    }

    pub fn translations(&self) -> &[Vector2<f64>] {
        &self.translations
    }
}

/// Rigid affine factorization `W₀ = M₀ B₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidFactor {
    /// Stacked 2×3 projections, `2I × 3`.
    pub motion: DMatrix<f64>,
    /// Mean rigid shape, `3 × J`.
    pub shape: DMatrix<f64>,
}

impl RigidFactor {
    pub fn image_count(&self) -> usize {
        self.motion.nrows() / 2
    }

    /// Projection of image `i`.
    pub fn projection(&self, i: usize) -> Matrix2x3<f64> {
        self.motion.fixed_view::<2, 3>(2 * i, 0).into_owned()
    }
}

/// Output of independent subspace analysis: the rank-3K non-rigid factor
/// rotated so that consecutive row triples of `basis` are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSeparation {
    pub subspaces: usize,
    /// Orthogonal `3K × 3K` transform `A` with `basis = Aᵀ B′` and `motion = M′ A`.
    pub transform: DMatrix<f64>,
    /// `2I × 3K`.
    pub motion: DMatrix<f64>,
    /// `3K × J`.
    pub basis: DMatrix<f64>,
    /// Mode covariance of the separated components, `3K × 3K`.
    pub covariance: DMatrix<f64>,
}

impl SubspaceSeparation {
    /// Rows `3k..3k+3` of the separated basis.
    pub fn block_basis(&self, k: usize) -> DMatrix<f64> {
        self.basis.rows(3 * k, 3).into_owned()
    }

    /// The 2×3 motion block `M_kⁱ`.
    pub fn motion_block(&self, i: usize, k: usize) -> Matrix2x3<f64> {
        self.motion.fixed_view::<2, 3>(2 * i, 3 * k).into_owned()
    }
}

/// Block-form motion: per-subspace affinities `D_k` and mixing weights `α_kⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMotion {
    pub affinities: Vec<Matrix3<f64>>,
    /// `I × K`, entry `(i, k)` is `α_kⁱ`.
    pub alpha: DMatrix<f64>,
    /// Explicit `D_k⁻¹`. Refinement optimizes the inverse directly and stores
    /// it here, so reprojection never has to invert a near-singular affinity.
    pub inverse_affinities: Option<Vec<Matrix3<f64>>>,
}

impl BlockMotion {
    pub fn subspaces(&self) -> usize {
        self.affinities.len()
    }

    /// `D_k⁻¹`, from the stored inverse when present.
    pub fn inverse_affinity(&self, k: usize) -> Result<Matrix3<f64>> {
        if let Some(inv) = &self.inverse_affinities {
            return Ok(inv[k]);
        }
        let d = &self.affinities[k];
        let condition = linalg::condition_number(d);
        if !(condition < SINGULAR_CONDITION) {
            return Err(Error::SingularAffinity { k, condition });
        }
        d.try_inverse()
            .ok_or(Error::SingularAffinity { k, condition })
    }

    /// Condition numbers of all affinities.
    pub fn conditions(&self) -> Vec<f64> {
        self.affinities.iter().map(linalg::condition_number).collect()
    }
}

/// A complete affine non-rigid reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct NonRigidModel {
    pub rigid: RigidFactor,
    pub separation: SubspaceSeparation,
    pub blocks: BlockMotion,
    pub translations: Vec<Vector2<f64>>,
}

impl NonRigidModel {
    pub fn image_count(&self) -> usize {
        self.rigid.image_count()
    }

    pub fn point_count(&self) -> usize {
        self.rigid.shape.ncols()
    }

    pub fn subspaces(&self) -> usize {
        self.blocks.subspaces()
    }

    /// Checks that every component agrees on `I`, `J` and `K`.
    pub fn validate(&self) -> Result<()> {
        let i = self.image_count();
        let j = self.point_count();
        let k = self.subspaces();
        let fail = |what: &str| Err(Error::Dimension(what.to_string()));
        if self.rigid.motion.shape() != (2 * i, 3) || self.rigid.shape.nrows() != 3 {
            return fail("rigid factor must be 2I×3 and 3×J");
        }
        if self.separation.subspaces != k {
            return fail("separation and block motion disagree on K");
        }
        if self.separation.basis.shape() != (3 * k, j) {
            return fail("separated basis must be 3K×J");
        }
        if self.blocks.alpha.shape() != (i, k) {
            return fail("alpha must be I×K");
        }
        if let Some(inv) = &self.blocks.inverse_affinities {
            if inv.len() != k {
                return fail("inverse affinities must have K entries");
            }
        }
        if self.translations.len() != i {
            return fail("one translation per image required");
        }
        Ok(())
    }

    /// `D⁻¹ B_ISA` stacked, `3K × J`: the basis shapes in the rigid coordinate frame.
    pub fn rigid_frame_basis(&self) -> Result<DMatrix<f64>> {
        let k = self.subspaces();
        let mut out = DMatrix::zeros(3 * k, self.point_count());
        for kk in 0..k {
            let inv = self.blocks.inverse_affinity(kk)?;
            let inv = DMatrix::from_column_slice(3, 3, inv.as_slice());
            out.rows_mut(3 * kk, 3)
                .copy_from(&(inv * self.separation.basis.rows(3 * kk, 3)));
        }
        Ok(out)
    }
}

/// `M₀^α`: block `(i, k)` is `α_kⁱ · M₀ⁱ`.
pub fn assemble_motion(rigid: &RigidFactor, blocks: &BlockMotion) -> Result<DMatrix<f64>> {
    let images = rigid.image_count();
    let k = blocks.subspaces();
    if rigid.motion.ncols() != 3 || !rigid.motion.nrows().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "rigid motion must be 2I×3, got {}×{}",
            rigid.motion.nrows(),
            rigid.motion.ncols()
        )));
    }
    if blocks.alpha.shape() != (images, k) {
        return Err(Error::Dimension(format!(
            "alpha must be {images}×{k}, got {}×{}",
            blocks.alpha.nrows(),
            blocks.alpha.ncols()
        )));
    }
    let mut out = DMatrix::zeros(2 * images, 3 * k);
    for i in 0..images {
        let m0 = rigid.motion.fixed_view::<2, 3>(2 * i, 0);
        for kk in 0..k {
            out.fixed_view_mut::<2, 3>(2 * i, 3 * kk)
                .copy_from(&(m0 * blocks.alpha[(i, kk)]));
        }
    }
    Ok(out)
}

/// Model prediction `Ŵ = M₀B₀ + M₀^α D⁻¹ B_ISA`, in centered coordinates unless
/// `with_translations` is set.
pub fn reproject(model: &NonRigidModel, with_translations: bool) -> Result<DMatrix<f64>> {
    model.validate()?;
    let motion = assemble_motion(&model.rigid, &model.blocks)?;
    let basis = model.rigid_frame_basis()?;
    let mut w = &model.rigid.motion * &model.rigid.shape;
    if model.subspaces() > 0 {
        w += motion * basis;
    }
    if with_translations {
        for (i, t) in model.translations.iter().enumerate() {
            w.row_mut(2 * i).add_scalar_mut(t.x);
            w.row_mut(2 * i + 1).add_scalar_mut(t.y);
        }
    }
    Ok(w)
}
