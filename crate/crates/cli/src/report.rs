use std::fmt::Write;

use nrsfm_core::EvalReport;

/// Human-readable summary of an evaluation report.
pub fn table(report: &EvalReport) -> String {
    let rmse = &report.per_frame_rmse;
    let mean = rmse.iter().sum::<f64>() / rmse.len().max(1) as f64;
    let (worst_frame, worst) = rmse
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mut out = String::new();
    let _ = writeln!(out, "{:<28}{:>14.6}", "inverse SNR (%)", report.inverse_snr_percent);
    let _ = writeln!(out, "{:<28}{:>14.6e}", "mean frame RMSE (px)", mean);
    let _ = writeln!(out, "{:<28}{:>14.6e}  (frame {worst_frame})", "worst frame RMSE (px)", worst);
    let _ = writeln!(out, "{:<28}{:>14.6}", "off-block energy ratio", report.off_block_energy_ratio);
    for t in &report.timings {
        let _ = writeln!(out, "{:<28}{:>14.4}", format!("time {} (s)", t.stage), t.seconds);
    }
    out
}
