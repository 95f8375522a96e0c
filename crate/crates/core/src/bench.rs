//! Solver benchmark: every ADMM variant on one planning problem.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::coupled::ContactSystem;
use crate::error::Result;
use crate::mpc::{run_scenario, Mode};
use crate::scenario::Scenario;
use crate::trajopt::{self, AdmmConfig, ConvergenceTrace, ProblemSpec, Variant};

/// Outcome of one variant on the benchmark problem.
#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    /// `Err` holds the solver's error message; the other variants still run.
    pub outcome: std::result::Result<VariantResult, String>,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub trace: ConvergenceTrace,
    pub converged: bool,
    pub wall_ms: f64,
}

impl VariantResult {
    /// Cost per ADMM iteration divided by the first iteration's cost.
    pub fn normalized_cost(&self) -> Vec<f64> {
        let c0 = self.trace.rows.first().map_or(1.0, |r| r.cost);
        let scale = if c0.abs() > 0.0 { c0 } else { 1.0 };
        self.trace.rows.iter().map(|r| r.cost / scale).collect()
    }

    /// `(cumulative DDP iterations, max primal residual)` per ADMM iteration.
    pub fn residual_curve(&self) -> Vec<(usize, f64)> {
        self.trace
            .rows
            .iter()
            .map(|r| (r.cumulative_ddp_iters, r.max_residual()))
            .collect()
    }

    pub fn final_residual(&self) -> f64 {
        self.trace.last().map_or(f64::INFINITY, |r| r.max_residual())
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub tolerance: f64,
    pub runs: Vec<VariantRun>,
}

/// One line of the summary table.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub admm_iters: usize,
    pub ddp_iters: usize,
    pub ddp_iters_to_tol: Option<usize>,
    pub final_residual: f64,
    pub wall_ms: f64,
    pub error: Option<String>,
}

/// Row of a per-variant curve file.
#[derive(Debug, Clone, Serialize)]
struct CurveRow {
    iteration: usize,
    cumulative_ddp_iters: usize,
    normalized_cost: f64,
    max_residual: f64,
    r_ik: f64,
    r_j: f64,
    r_u: f64,
    r_f: f64,
}

/// Runs each variant from the same cold start on `spec` with `base` as the solver settings,
/// stopping at `tolerance` or `max_iters` ADMM iterations.
pub fn bench_solvers(
    sys: &ContactSystem,
    spec: &ProblemSpec,
    base: &AdmmConfig,
    variants: &[Variant],
    tolerance: f64,
    max_iters: usize,
) -> BenchReport {
    let runs = variants
        .iter()
        .map(|&variant| {
            let cfg = AdmmConfig {
                variant,
                tolerance,
                max_iters,
                ..base.clone()
            };
            let start = Instant::now();
            let outcome = trajopt::solve(sys, spec, &cfg, None)
                .map(|sol| VariantResult {
                    trace: sol.trace,
                    converged: sol.converged,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                })
                .map_err(|e| e.to_string());
            VariantRun { variant, outcome }
        })
        .collect();
    BenchReport { tolerance, runs }
}

impl BenchReport {
    pub fn run(&self, variant: Variant) -> Option<&VariantResult> {
        self.runs
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn ddp_iters_to_tol(&self, variant: Variant) -> Option<usize> {
        self.run(variant).and_then(|r| r.trace.ddp_iters_to(self.tolerance))
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.runs
            .iter()
            .map(|run| match &run.outcome {
                Ok(r) => SummaryRow {
                    variant: run.variant.to_string(),
                    admm_iters: r.trace.len(),
                    ddp_iters: r.trace.last().map_or(0, |t| t.cumulative_ddp_iters),
                    ddp_iters_to_tol: r.trace.ddp_iters_to(self.tolerance),
                    final_residual: r.final_residual(),
                    wall_ms: r.wall_ms,
                    error: None,
                },
                Err(e) => SummaryRow {
                    variant: run.variant.to_string(),
                    admm_iters: 0,
                    ddp_iters: 0,
                    ddp_iters_to_tol: None,
                    final_residual: f64::NAN,
                    wall_ms: f64::NAN,
                    error: Some(e.clone()),
                },
            })
            .collect()
    }

    /// Fixed-width table of the summary for terminal output.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>12} {:>12} {:>10}",
            "variant", "admm", "ddp", "ddp_to_tol", "final_res", "time_ms"
        );
        for row in self.summary() {
            if let Some(e) = &row.error {
                let _ = writeln!(s, "{:<12} failed: {e}", row.variant);
                continue;
            }
            let to_tol = row.ddp_iters_to_tol.map_or("-".to_string(), |n| n.to_string());
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>6} {:>12} {:>12.3e} {:>10.1}",
                row.variant, row.admm_iters, row.ddp_iters, to_tol, row.final_residual, row.wall_ms
            );
        }
        s
    }

    /// Writes `summary.csv` plus `<variant>_trace.csv` (raw trace) and `<variant>_curves.csv`
    /// (normalized cost and residuals against cumulative DDP iterations) into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(|e| csv_err("summary.csv", &e))?;
        for row in self.summary() {
            w.serialize(row).map_err(|e| csv_err("summary.csv", &e))?;
        }
        w.flush()?;
        for run in &self.runs {
            let Ok(r) = &run.outcome else { continue };
            r.trace.save(&dir.join(format!("{}_trace.csv", run.variant)))?;
            let name = format!("{}_curves.csv", run.variant);
            let mut w = csv::Writer::from_path(dir.join(&name)).map_err(|e| csv_err(&name, &e))?;
            for (row, c) in r.trace.rows.iter().zip(r.normalized_cost()) {
                w.serialize(CurveRow {
                    iteration: row.iteration,
                    cumulative_ddp_iters: row.cumulative_ddp_iters,
                    normalized_cost: c,
                    max_residual: row.max_residual(),
                    r_ik: row.r_ik,
                    r_j: row.r_j,
                    r_u: row.r_u,
                    r_f: row.r_f,
                })
                .map_err(|e| csv_err(&name, &e))?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_err(name: &str, e: &csv::Error) -> crate::Error {
    crate::trajopt::trace::csv_error(name, e)
}

/// RMSE of one closed-loop mode.
#[derive(Debug, Clone, Serialize)]
pub struct TrackingRow {
    pub mode: String,
    pub path_rmse_m: f64,
    pub force_rmse_n: f64,
    pub failed_cycles: usize,
}

/// Runs `scenario` in each mode. With `out`, writes `<mode>_log.csv`, `<mode>_cycles.csv`
/// and `tracking_summary.csv` into that directory.
pub fn run_tracking(scenario: &Scenario, modes: &[Mode], out: Option<&Path>) -> Result<Vec<TrackingRow>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let log = run_scenario(scenario, mode)?;
        if let Some(dir) = out {
            log.save(&dir.join(format!("{mode}_log.csv")))?;
            log.save_cycles(&dir.join(format!("{mode}_cycles.csv")))?;
        }
        let m = log.metrics();
        rows.push(TrackingRow {
            mode: mode.to_string(),
            path_rmse_m: m.path_rmse,
            force_rmse_n: m.force_rmse,
            failed_cycles: log.cycles.iter().filter(|c| c.failed).count(),
        });
    }
    if let Some(dir) = out {
        let name = "tracking_summary.csv";
        let mut w = csv::Writer::from_path(dir.join(name)).map_err(|e| csv_err(name, &e))?;
        for r in &rows {
            w.serialize(r).map_err(|e| csv_err(name, &e))?;
        }
        w.flush()?;
    }
    Ok(rows)
}

pub fn tracking_table(rows: &[TrackingRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>12} {:>12}", "mode", "path_m", "force_N");
    for r in rows {
        let _ = writeln!(s, "{:<16} {:>12.3e} {:>12.4}", r.mode, r.path_rmse_m, r.force_rmse_n);
    }
    s
}
