use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use nrsfm_core::io::{basis_shapes_csv, matrix_csv, write_atomic};
use nrsfm_core::model::reproject;
use nrsfm_core::synth::rank_excess;
use nrsfm_core::{
    evaluate, factor, generate, reconstruct, Error, EvalReport, Method, ModelFile, PipelineConfig, SourceFamily,
    SynthParams, TrackFile,
};

mod report;

#[derive(Parser)]
#[command(name = "nrsfm", version, about = "Prior-free non-rigid structure from motion")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruct a model from a track file.
    Reconstruct(ReconstructArgs),
    /// Generate a synthetic scene with known ground truth.
    Synth(SynthArgs),
    /// Score a model against tracks and export derived data.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ReconstructArgs {
    tracks: PathBuf,
    /// Number of 3D deformation subspaces.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = Method::Isa2)]
    method: Method,
    #[arg(long, env = "NRSFM_SEED", default_value_t = 0)]
    seed: u64,
    /// Where to write the model file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the evaluation report as JSON to this path.
    #[arg(long)]
    report_json: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    tolerances: Tolerances,
}

#[derive(Args)]
struct Tolerances {
    /// Relative singular-value cutoff of the rank-3K truncation.
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long)]
    ica_tol: Option<f64>,
    #[arg(long)]
    ica_max_iter: Option<usize>,
    /// FastISA restarts (ISA1 only).
    #[arg(long)]
    isa_restarts: Option<usize>,
    #[arg(long)]
    isa_tol: Option<f64>,
    #[arg(long)]
    isa_max_iter: Option<usize>,
    #[arg(long)]
    irls_tol: Option<f64>,
    #[arg(long)]
    irls_max_iter: Option<usize>,
    /// Keep the literal IRLS fixed point instead of the exact unit-norm minimizer.
    #[arg(long)]
    no_polish: bool,
    #[arg(long)]
    refine_tol: Option<f64>,
    #[arg(long)]
    refine_max_iter: Option<usize>,
}

impl Tolerances {
    fn apply(&self, cfg: &mut PipelineConfig) {
        fn set<T: Copy>(slot: &mut T, value: Option<T>) {
            if let Some(v) = value {
                *slot = v;
            }
        }
        set(&mut cfg.rank_tol, self.rank_tol);
        set(&mut cfg.ica.tol, self.ica_tol);
        set(&mut cfg.ica.max_iter, self.ica_max_iter);
        set(&mut cfg.isa.restarts, self.isa_restarts);
        set(&mut cfg.isa.tol, self.isa_tol);
        set(&mut cfg.isa.max_iter, self.isa_max_iter);
        set(&mut cfg.irls.tol, self.irls_tol);
        set(&mut cfg.irls.max_iter, self.irls_max_iter);
        set(&mut cfg.refine.tol, self.refine_tol);
        set(&mut cfg.refine.max_iter, self.refine_max_iter);
        if self.no_polish {
            cfg.irls.polish = false;
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    i: usize,
    #[arg(long)]
    j: usize,
    #[arg(long)]
    k: usize,
    /// Standard deviation of the pixel noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = SourceFamily::SphericalSubspace)]
    family: SourceFamily,
    #[arg(long, env = "NRSFM_SEED", default_value_t = 0)]
    seed: u64,
    /// Deformation amplitude of the first subspace.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Confine deformations to a plane.
    #[arg(long)]
    planar: bool,
    #[arg(long)]
    out_tracks: PathBuf,
    #[arg(long)]
    out_truth: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    tracks: PathBuf,
    /// Model to score; without one only `--check-rank` is available.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Check that the centered tracks have rank at most 3K+3 for this K.
    #[arg(long, value_name = "K")]
    check_rank: Option<usize>,
    /// Score uncentered tracks against the reprojection with translations.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    covariance_csv: Option<PathBuf>,
    /// Per-frame reprojections, in the track file layout.
    #[arg(long)]
    reprojection_csv: Option<PathBuf>,
    /// Basis shapes as B0 ± α_k B_k offsets.
    #[arg(long)]
    basis_csv: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

/// Relative bound on `σ_{3K+4}/σ₁` accepted by `--check-rank`.
const RANK_CHECK_TOL: f64 = 1e-8;

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Parse { .. } | Error::Json(_) | Error::Io(_) => 2,
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

fn error_json(err: &Error) -> serde_json::Value {
    let stage = match err {
        Error::Stage { stage, .. } => Some(stage.to_string()),
        _ => None,
    };
    let kind = match err.root() {
        Error::Dimension(_) => "dimension",
        Error::InvalidInput(_) => "invalid-input",
        Error::Config(_) => "config",
        Error::Precondition(_) => "precondition",
        Error::SingularAffinity { .. } => "singular-affinity",
        Error::Underdetermined(_) => "underdetermined",
        Error::UndefinedMetric(_) => "undefined-metric",
        Error::Refused(_) => "refused",
        Error::Parse { .. } => "parse",
        Error::Stage { .. } => "stage",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    json!({
        "error": kind,
        "stage": stage,
        "message": err.to_string(),
        "exit_code": exit_code(err),
    })
}

fn emit_report(report: &EvalReport, as_json: bool) -> Result<(), Error> {
    if as_json {
        println!("{}", serde_json::to_string_pretty(report)?);
    } else {
        print!("{}", report::table(report));
    }
    Ok(())
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<(), Error> {
    let tracks = TrackFile::load(&args.tracks)?;
    let m = factor::center(&tracks.tracks)?;
    let mut cfg = PipelineConfig::new(args.k, args.method).with_seed(args.seed);
    args.tolerances.apply(&mut cfg);
    info!(
        "reconstructing {} frames × {} points with K={} ({})",
        m.image_count(),
        m.point_count(),
        args.k,
        args.method
    );
    let rec = reconstruct(&m, &cfg)?;
    let mut report = evaluate(&m, &rec.model, false)?;
    report.timings = rec.timings.clone();
    if let Some(path) = &args.out {
        let file = ModelFile::from_model(
            &rec.model,
            serde_json::to_value(&cfg)?,
            serde_json::to_value(&rec.diagnostics)?,
        );
        file.save(path)?;
        info!("model written to {}", path.display());
    }
    if let Some(path) = &args.report_json {
        write_json(path, &report)?;
    }
    emit_report(&report, args.json)
}

fn write_json(path: &Path, report: &EvalReport) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    let mut params = SynthParams::new(args.i, args.j, args.k)
        .with_noise(args.noise)
        .with_family(args.family)
        .with_seed(args.seed)
        .planar(args.planar);
    if let Some(a) = args.amplitude {
        params = params.with_amplitude(a);
    }
    let scene = generate(&params)?;
    TrackFile::new(scene.raw.clone()).save(&args.out_tracks)?;
    if let Some(path) = &args.out_truth {
        let file = ModelFile::from_model(
            &scene.truth,
            serde_json::to_value(&params)?,
            serde_json::Value::Null,
        );
        file.save(path)?;
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<bool, Error> {
    let tracks = TrackFile::load(&args.tracks)?;
    let m = factor::center(&tracks.tracks)?;
    let mut ok = true;
    let mut rank_result = None;
    if let Some(k) = args.check_rank {
        let excess = rank_excess(m.centered(), k);
        ok = excess < RANK_CHECK_TOL;
        rank_result = Some((k, excess, ok));
        if !args.json {
            println!(
                "rank check (K={k}): sigma_{}/sigma_1 = {excess:.3e} {}",
                3 * k + 4,
                if ok { "ok" } else { "FAILED" }
            );
        }
    }
    let Some(model_path) = &args.model else {
        if args.check_rank.is_none() {
            return Err(Error::Config("eval needs --model or --check-rank".into()));
        }
        if args.json {
            let (k, excess, pass) = rank_result.expect("checked above");
            println!("{}", json!({ "rank_check": { "k": k, "ratio": excess, "ok": pass } }));
        }
        return Ok(ok);
    };
    let model = ModelFile::load(model_path)?.to_model()?;
    let report = evaluate(&m, &model, args.raw)?;
    if let Some(path) = &args.covariance_csv {
        write_atomic(path, matrix_csv(&model.separation.covariance).as_bytes())?;
    }
    if let Some(path) = &args.reprojection_csv {
        TrackFile::new(reproject(&model, args.raw)?).save(path)?;
    }
    if let Some(path) = &args.basis_csv {
        write_atomic(path, basis_shapes_csv(&model)?.as_bytes())?;
    }
    if args.json {
        let mut value = serde_json::to_value(&report)?;
        if let Some((k, excess, pass)) = rank_result {
            value["rank_check"] = json!({ "k": k, "ratio": excess, "ok": pass });
        }
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        emit_report(&report, false)?;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Reconstruct(args) => run_reconstruct(args).map(|()| true),
        Command::Synth(args) => run_synth(args).map(|()| true),
        Command::Eval(args) => run_eval(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
