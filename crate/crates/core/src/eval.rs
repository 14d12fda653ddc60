//! End-to-end reconstruction and reprojection metrics.
//!
//! The headline metric is the inverse SNR in percent,
//! `100 · ‖W − Ŵ‖_F / ‖W‖_F`, evaluated on translation-corrected measurements
//! over all frames at once. Per-frame RMSE is reported alongside so that a
//! frame-averaged view can be derived.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::block::{self, IrlsConfig};
use crate::error::{Error, Result, Stage};
use crate::factor::{self, DEFAULT_RANK_TOL};
use crate::ica::{self, IcaConfig};
use crate::isa::{self, IsaConfig, IsaDiagnostics, ModeCovariance};
use crate::model::{reproject, MeasurementSet, NonRigidModel};
use crate::refine::{self, RefineConfig, RefineTrace};

/// Subspace separation route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// FastISA with multiple restarts.
    Isa1,
    /// FastICA followed by greedy covariance pooling.
    #[default]
    Isa2,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Isa1 => "isa1",
            Method::Isa2 => "isa2",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isa1" => Ok(Method::Isa1),
            "isa2" => Ok(Method::Isa2),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub subspaces: usize,
    pub method: Method,
    pub rank_tol: f64,
    pub ica: IcaConfig,
    pub isa: IsaConfig,
    pub irls: IrlsConfig,
    pub refine: RefineConfig,
    /// Seeds the ICA initialization and the FastISA restarts.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(subspaces: usize, method: Method) -> PipelineConfig {
        PipelineConfig {
            subspaces,
            method,
            rank_tol: DEFAULT_RANK_TOL,
            ica: IcaConfig::default(),
            isa: IsaConfig::default(),
            irls: IrlsConfig::default(),
            refine: RefineConfig::default(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Diagnostics kept from every stage of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub effective_rank: usize,
    pub discarded_energy: f64,
    pub ica_iterations: Option<usize>,
    pub ica_converged: Option<bool>,
    pub pooling_objective: Option<f64>,
    pub isa: Option<IsaDiagnostics>,
    pub irls_iterations: usize,
    pub irls_converged: bool,
    pub irls_residual: f64,
    pub irls_rank_deficient: bool,
    /// Bilinear objective at the IRLS estimate and after refinement.
    pub refine: RefineTrace,
    pub affinity_conditions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub model: NonRigidModel,
    /// The model before refinement, with the IRLS block motion.
    pub initial_model: NonRigidModel,
    pub diagnostics: PipelineDiagnostics,
    pub timings: Vec<StageTiming>,
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs factorization, subspace separation, block recovery and refinement.
pub fn reconstruct(m: &MeasurementSet, cfg: &PipelineConfig) -> Result<Reconstruction> {
    let k = cfg.subspaces;
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let dims = m.image_count() * 2;
    let points = m.point_count();
    if 3 * k + 3 > dims.min(points) {
        return Err(Error::Config(format!(
            "rank constraint 3K+3 = {} exceeds min(2I, J) = {}",
            3 * k + 3,
            dims.min(points)
        )));
    }
    let mut timings = Vec::new();

    let (rigid, dw, truncated) = timed(&mut timings, "factorization", || {
        let (rigid, w0) = factor::rigid_factorize(m)?;
        let dw = factor::nonrigid_residual(m, &w0)?;
        let truncated = factor::truncate(&dw, k, cfg.rank_tol)?;
        Ok((rigid, dw, truncated))
    })
    .map_err(|e| e.at(Stage::Factorization))?;

    let mut ica_iterations = None;
    let mut ica_converged = None;
    let mut pooling_objective = None;
    let mut isa_diag = None;
    let separation = timed(&mut timings, "separation", || match cfg.method {
        Method::Isa2 => {
            let ica_cfg = IcaConfig {
                seed: cfg.seed,
                ..cfg.ica.clone()
            };
            let icares = ica::fast_ica(&truncated.basis, &ica_cfg)?;
            ica_iterations = Some(icares.iterations);
            ica_converged = Some(icares.converged);
            let cov = isa::mode_covariance(&icares.sources(&truncated.basis), &dw)?;
            let pooling = isa::greedy_pool(&cov, k)?;
            pooling_objective = Some(pooling.objective);
            isa::pool_to_separation(&icares, &pooling, &truncated.motion, &truncated.basis, &cov)
        }
        Method::Isa1 => {
            let isa_cfg = IsaConfig {
                seed: cfg.seed,
                ..cfg.isa.clone()
            };
            let (sep, diag) = isa::fast_isa(&truncated, &dw, &isa_cfg)?;
            isa_diag = Some(diag);
            Ok(sep)
        }
    })
    .map_err(|e| e.at(Stage::Separation))?;

    let irls = timed(&mut timings, "block-recovery", || {
        block::irls_recover(&separation.motion, &rigid.motion, &cfg.irls)
    })
    .map_err(|e| e.at(Stage::BlockRecovery))?;

    let (refined, trace) = timed(&mut timings, "refinement", || {
        // With (1/J) B Bᵀ = I the target equals √J M₀^α E on exact data, so the
        // ALS runs on T/√J to keep E = D⁻¹ in the scale used by reprojection.
        let t = refine::target_matrix(&dw, &separation.basis)?;
        let scaled = t / (points as f64).sqrt();
        refine::refine_als(&scaled, &rigid.motion, &irls.blocks, &cfg.refine)
    })
    .map_err(|e| e.at(Stage::Refinement))?;

    let initial_model = NonRigidModel {
        rigid: rigid.clone(),
        separation: separation.clone(),
        blocks: irls.blocks.clone(),
        translations: m.translations().to_vec(),
    };
    let model = NonRigidModel {
        rigid,
        separation,
        blocks: refined,
        translations: m.translations().to_vec(),
    };
    let diagnostics = PipelineDiagnostics {
        effective_rank: truncated.effective_rank,
        discarded_energy: truncated.discarded_energy,
        ica_iterations,
        ica_converged,
        pooling_objective,
        isa: isa_diag,
        irls_iterations: irls.iterations,
        irls_converged: irls.converged,
        irls_residual: irls.residual,
        irls_rank_deficient: irls.rank_deficient.iter().any(|&r| r),
        affinity_conditions: model.blocks.conditions(),
        refine: trace,
    };
    Ok(Reconstruction {
        model,
        initial_model,
        diagnostics,
        timings,
    })
}

/// `100 · ‖W − Ŵ‖_F / ‖W‖_F`.
pub fn inverse_snr(w: &DMatrix<f64>, what: &DMatrix<f64>) -> Result<f64> {
    if w.shape() != what.shape() {
        return Err(Error::Dimension(format!(
            "measurements are {:?}, reprojection is {:?}",
            w.shape(),
            what.shape()
        )));
    }
    let signal = w.norm();
    if !(signal > 0.0) {
        return Err(Error::UndefinedMetric(
            "inverse SNR of an all-zero measurement matrix".into(),
        ));
    }
    Ok(100.0 * (w - what).norm() / signal)
}

/// Root-mean-square 2D reprojection error of every frame, in pixels.
pub fn per_frame_rmse(w: &DMatrix<f64>, what: &DMatrix<f64>) -> Vec<f64> {
    let points = w.ncols() as f64;
    (0..w.nrows() / 2)
        .map(|i| {
            let diff = w.rows(2 * i, 2) - what.rows(2 * i, 2);
            (diff.norm_squared() / points).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub inverse_snr_percent: f64,
    pub per_frame_rmse: Vec<f64>,
    pub off_block_energy_ratio: f64,
    #[serde(default)]
    pub timings: Vec<StageTiming>,
}

impl EvalReport {
    /// Equality of everything except the wall-clock timings.
    pub fn same_scores(&self, other: &EvalReport) -> bool {
        self.inverse_snr_percent == other.inverse_snr_percent
            && self.per_frame_rmse == other.per_frame_rmse
            && self.off_block_energy_ratio == other.off_block_energy_ratio
    }
}

/// Scores a model against measurements, in centered space unless `raw_space` is set.
pub fn evaluate(m: &MeasurementSet, model: &NonRigidModel, raw_space: bool) -> Result<EvalReport> {
    if model.image_count() != m.image_count() || model.point_count() != m.point_count() {
        return Err(Error::Dimension(format!(
            "model is {} images × {} points, measurements are {} × {}",
            model.image_count(),
            model.point_count(),
            m.image_count(),
            m.point_count()
        )));
    }
    let what = reproject(model, raw_space)?;
    let w = if raw_space { m.raw() } else { m.centered() };
    let cov = ModeCovariance::from_matrix(model.separation.covariance.clone())?;
    Ok(EvalReport {
        inverse_snr_percent: inverse_snr(w, &what)?,
        per_frame_rmse: per_frame_rmse(w, &what),
        off_block_energy_ratio: cov.off_block_ratio(),
        timings: Vec::new(),
    })
}
