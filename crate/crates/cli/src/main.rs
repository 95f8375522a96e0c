use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hertzmpc::bench::{bench_solvers, run_tracking, tracking_table};
use hertzmpc::mpc::Mode;
use hertzmpc::scenario::Scenario;
use hertzmpc::soft_contact::ContactParams;
use hertzmpc::sysid::{identify, synthetic_sweep, FitOptions, IdDataset, SweepConfig};
use hertzmpc::trajopt::Variant;

#[derive(Parser)]
#[command(name = "hertzmpc", version, about = "Soft-contact trajectory optimization and MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the ADMM variants on one planning window.
    Bench(BenchArgs),
    /// Closed-loop path tracking in one or more controller modes.
    Track(TrackArgs),
    /// Fit contact parameters to a logged dataset.
    Sysid(SysidArgs),
    /// Generate a synthetic dataset, fit it and compare with the generating parameters.
    IdentDemo(IdentDemoArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a shipped scenario (circle, eight, line, nominal).
    #[arg(long)]
    config: Option<String>,
    /// Plant noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with a nonzero code if the run's checks fail.
    #[arg(long = "assert")]
    assert: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Variants to run (repeat or comma-separate); all by default.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    /// Residual tolerance.
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    /// ADMM iteration cap per variant.
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    common: Common,
    /// Controller modes (repeat or comma-separate); all by default.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Mode>,
    /// Simulated compute delay of each re-solve (control steps).
    #[arg(long)]
    delay_steps: Option<usize>,
    /// Simulated duration override (s).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct SysidArgs {
    /// Dataset CSV with columns t, F_z, v_x, v_y, F_fric_x, F_fric_y, d.
    data: PathBuf,
    /// Contact parameter file supplying the tool modulus, Poisson ratios and radius.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the fitted contact parameters (TOML).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with a nonzero code if R^2 < 0.9.
    #[arg(long = "assert")]
    assert: bool,
}

#[derive(Args)]
struct IdentDemoArgs {
    /// Contact parameter file used as ground truth; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative multiplicative noise on friction and indentation.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Output directory for the dataset and fitted parameters.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with a nonzero code unless mu and k_d are within 10 % and R^2 >= 0.9.
    #[arg(long = "assert")]
    assert: bool,
}

type CliResult = Result<bool, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Bench(a) => bench(a),
        Command::Track(a) => track(a),
        Command::Sysid(a) => sysid(a),
        Command::IdentDemo(a) => ident_demo(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(common: &Common, default: &str) -> Result<Scenario, String> {
    let name = common.config.as_deref().unwrap_or(default);
    let mut sc = if Path::new(name).exists() {
        Scenario::from_file(name)
    } else {
        Scenario::builtin(name)
    }
    .map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        sc.plant.seed = seed;
    }
    Ok(sc)
}

fn check(label: &str, ok: bool) -> bool {
    println!("[{}] {label}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn bench(a: BenchArgs) -> CliResult {
    let sc = load_scenario(&a.common, "nominal")?;
    let variants = if a.variant.is_empty() { Variant::ALL.to_vec() } else { a.variant };
    let sys = sc.system().map_err(|e| e.to_string())?;
    let spec = sc.nominal_problem(&sys).map_err(|e| e.to_string())?;
    let report = bench_solvers(&sys, &spec, &sc.solver, &variants, a.tolerance, a.max_iters);
    print!("{}", report.summary_table());
    if let Some(dir) = &a.common.out {
        report.write_csv(dir).map_err(|e| e.to_string())?;
    }
    if !a.common.assert {
        return Ok(true);
    }
    let it = |v| report.ddp_iters_to_tol(v).unwrap_or(usize::MAX);
    let fin = |v| report.run(v).map_or(f64::NAN, |r| r.final_residual());
    let mut ok = report.runs.iter().all(|r| r.outcome.is_ok());
    ok &= check(
        "consensus < sequential < two_block in DDP iterations to tolerance",
        it(Variant::Consensus) < it(Variant::Sequential) && it(Variant::Sequential) < it(Variant::TwoBlock),
    );
    ok &= check(
        "vanilla final residual above consensus",
        fin(Variant::Vanilla) > fin(Variant::Consensus),
    );
    Ok(ok)
}

fn track(a: TrackArgs) -> CliResult {
    let mut sc = load_scenario(&a.common, "circle")?;
    if let Some(d) = a.delay_steps {
        sc.mpc.delay_steps = d;
    }
    if let Some(t) = a.duration {
        sc.duration = t;
    }
    sc.validate().map_err(|e| e.to_string())?;
    let modes = if a.mode.is_empty() { Mode::ALL.to_vec() } else { a.mode };
    let rows = run_tracking(&sc, &modes, a.common.out.as_deref()).map_err(|e| e.to_string())?;
    println!("scenario {} ({} s)", sc.name, sc.duration);
    print!("{}", tracking_table(&rows));
    if !a.common.assert {
        return Ok(true);
    }
    let force = |m: Mode| rows.iter().find(|r| r.mode == m.name()).map(|r| r.force_rmse_n);
    match (force(Mode::MpcFc), force(Mode::OpenLoopNoFc)) {
        (Some(mpc), Some(open)) => Ok(check("MPC+FC force RMSE below open loop without FC", mpc < open)),
        _ => Err("--assert needs both mpc_fc and open_loop_no_fc modes".into()),
    }
}

fn load_params(path: Option<&Path>) -> Result<ContactParams, String> {
    match path {
        Some(p) => ContactParams::from_file(p).map_err(|e| e.to_string()),
        None => Ok(ContactParams::default()),
    }
}

fn sysid(a: SysidArgs) -> CliResult {
    let data = IdDataset::load(&a.data).map_err(|e| e.to_string())?;
    let base = load_params(a.config.as_deref())?;
    let report = identify(&data, &base, &FitOptions::default()).map_err(|e| e.to_string())?;
    println!("{} samples", data.samples.len());
    println!("{}", report.summary());
    if let Some(out) = &a.out {
        std::fs::write(out, report.params.to_toml_string()).map_err(|e| e.to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(!a.assert || check("R^2 >= 0.9", report.friction.r_squared >= 0.9))
}

fn ident_demo(a: IdentDemoArgs) -> CliResult {
    let truth = load_params(a.config.as_deref())?;
    let cfg = SweepConfig {
        noise: a.noise,
        seed: a.seed,
        ..SweepConfig::default()
    };
    let data = synthetic_sweep(&truth, &cfg).map_err(|e| e.to_string())?;
    let report = identify(&data, &truth, &FitOptions::default()).map_err(|e| e.to_string())?;
    println!("{}", report.summary());
    let rel = |a: f64, b: f64| (a / b - 1.0).abs();
    println!(
        "true mu = {:.4}, k_d = {:.4}, E2 = {:.4e}; relative errors {:.2e}, {:.2e}, {:.2e}",
        truth.mu,
        truth.k_d,
        truth.e2,
        rel(report.params.mu, truth.mu),
        rel(report.params.k_d, truth.k_d),
        rel(report.params.e2, truth.e2)
    );
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        data.save(&dir.join("dataset.csv")).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("fitted.toml"), report.params.to_toml_string()).map_err(|e| e.to_string())?;
    }
    if !a.assert {
        return Ok(true);
    }
    let ok = check("mu within 10 %", rel(report.params.mu, truth.mu) < 0.1)
        & check("k_d within 10 %", rel(report.params.k_d, truth.k_d) < 0.1)
        & check("R^2 >= 0.9", report.friction.r_squared >= 0.9);
    Ok(ok)
}
