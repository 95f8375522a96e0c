//! Receding-horizon execution on a virtual clock: warm-started re-solves, compute
//! delay truncation, and the feed-forward + joint PD + force-correction control law.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::coupled::{AugmentedState, ContactSystem};
use crate::error::{Error, Result};
use crate::plant::Plant;
use crate::rigid_body::{ChainFrames, ManipulatorModel};
use crate::scenario::Scenario;
use crate::soft_contact::SurfaceFrame;
use crate::trajopt::admm::{self, AdmmSolution, Initialization};
use crate::trajopt::projection::clamp;
use crate::trajopt::trace::csv_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Planning horizon H (steps).
    pub horizon: usize,
    /// Time between re-solves (s).
    pub replan_period: f64,
    /// Force-correction update period (s).
    pub fc_period: f64,
    /// Simulated compute delay T (steps) on the virtual clock.
    pub delay_steps: usize,
    /// Measure the compute delay from the solver's wall time instead.
    pub wall_clock: bool,
    /// Natural frequency of the joint PD, critically damped per joint (rad/s).
    pub feedback_bandwidth: f64,
    /// Diagonal of the compliance in the contact frame (tangential x, y, normal).
    pub compliance: [f64; 3],
    /// Cutoff of the first-order force low-pass filter (Hz).
    pub fc_cutoff: f64,
    /// Cutoff of the joint-velocity low-pass filter feeding the re-solves (Hz).
    pub state_cutoff: f64,
    /// ADMM iterations per re-solve.
    pub admm_iters: usize,
    /// DDP iterations per ADMM iteration.
    pub ddp_iters: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            replan_period: 0.2,
            fc_period: 0.01,
            delay_steps: 0,
            wall_clock: false,
            feedback_bandwidth: 10.0,
            compliance: [0.0, 0.0, 3.0],
            fc_cutoff: 50.0,
            state_cutoff: 5.0,
            admm_iters: 5,
            ddp_iters: 10,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fc_period > 0.0 && self.fc_period < self.replan_period) {
            return Err(Error::invalid("mpc.fc_period", "must be positive and below the replan period"));
        }
        if self.horizon == 0 || self.admm_iters == 0 || self.ddp_iters == 0 {
            return Err(Error::invalid("mpc", "horizon and iteration caps must be positive"));
        }
        if !(self.feedback_bandwidth >= 0.0) || !self.compliance.iter().all(|c| *c >= 0.0) {
            return Err(Error::invalid("mpc", "gains and compliance must be non-negative"));
        }
        if !(self.fc_cutoff > 0.0) || !(self.state_cutoff > 0.0) {
            return Err(Error::invalid("mpc", "filter cutoffs must be positive"));
        }
        Ok(())
    }
}

/// Diagonal joint PD gains.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGains {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
}

impl FeedbackGains {
    /// `kp_i = M_ii w^2`, `kd_i = 2 M_ii w` from the mass-matrix diagonal at `q`.
    pub fn critically_damped(model: &ManipulatorModel, q: &DVector<f64>, bandwidth: f64) -> Result<Self> {
        let m = crate::rigid_body::mass_matrix(model, q)?;
        let d = m.diagonal();
        Ok(Self {
            kp: &d * (bandwidth * bandwidth),
            kd: &d * (2.0 * bandwidth),
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            kp: DVector::zeros(n),
            kd: DVector::zeros(n),
        }
    }
}

/// Planned quantities at the current instant.
#[derive(Debug, Clone)]
pub struct PlanPoint {
    pub u: DVector<f64>,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub f_e: Vector3<f64>,
}

/// `u* = u + Kp (q_plan - q) + Kd (qdot_plan - qdot) + J^T f(C (F_plan - F_meas))`, where
/// `C` is the contact-frame compliance diagonal and `f` maps a contact-frame force to the
/// world force on the surface.
pub fn compose_control(
    plan: &PlanPoint,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    f_meas: Option<&Vector3<f64>>,
    jacobian: &DMatrix<f64>,
    frame: &SurfaceFrame,
    gains: &FeedbackGains,
    compliance: &[f64; 3],
) -> DVector<f64> {
    let mut u = &plan.u
        + gains.kp.component_mul(&(&plan.q - q))
        + gains.kd.component_mul(&(&plan.qdot - qdot));
    if let Some(f) = f_meas {
        let e = (plan.f_e - f).component_mul(&Vector3::from(*compliance));
        let df = frame.world_force(&e);
        u += jacobian.tr_mul(&DVector::from_column_slice(df.as_slice()));
    }
    u
}

/// Controller arrangement of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Offline plan, joint PD only.
    OpenLoopNoFc,
    /// Offline plan with the force-correction layer.
    OpenLoopFc,
    /// Receding-horizon re-planning with the force-correction layer.
    MpcFc,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::OpenLoopNoFc, Mode::OpenLoopFc, Mode::MpcFc];

    pub fn name(self) -> &'static str {
        match self {
            Mode::OpenLoopNoFc => "open_loop_no_fc",
            Mode::OpenLoopFc => "open_loop_fc",
            Mode::MpcFc => "mpc_fc",
        }
    }

    pub fn force_control(self) -> bool {
        self != Mode::OpenLoopNoFc
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::invalid("mode", format!("unknown '{s}' (expected open_loop_no_fc, open_loop_fc or mpc_fc)")))
    }
}

/// Plan snapshot handed from the planner to the executor.
#[derive(Debug, Clone)]
pub struct Plan {
    pub id: usize,
    /// Control step at which index 0 of the plan applies.
    pub start_step: usize,
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
}

impl Plan {
    fn point(&self, n: usize, index: usize, frac: f64) -> (usize, PlanPoint) {
        let i = index.min(self.us.len() - 1);
        let a = &self.xs[i];
        let b = &self.xs[(i + 1).min(self.xs.len() - 1)];
        let x = a * (1.0 - frac) + b * frac;
        (
            i,
            PlanPoint {
                u: self.us[i].clone(),
                q: x.rows(0, n).into_owned(),
                qdot: x.rows(n, n).into_owned(),
                f_e: x.fixed_rows::<3>(2 * n).into_owned(),
            },
        )
    }
}

/// One executor sample (logged at every force-correction tick).
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub plan_id: usize,
    pub plan_index: usize,
    pub q: DVector<f64>,
    pub tool: Vector3<f64>,
    pub tool_desired: Vector3<f64>,
    pub fz_desired: f64,
    pub fz_actual: f64,
    pub fz_measured: f64,
    pub friction: [f64; 2],
    pub u: DVector<f64>,
}

/// One planner cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub plan_id: usize,
    pub start_step: usize,
    pub delay_steps: usize,
    pub solve_ms: f64,
    pub admm_iters: usize,
    pub ddp_iters: usize,
    pub converged: bool,
    pub overrun: bool,
    /// The solve returned an error; the executor kept the active plan.
    #[serde(default)]
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecutionLog {
    pub rows: Vec<LogRow>,
    pub cycles: Vec<CycleRecord>,
}

/// Root-mean-square tracking errors of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    /// In-plane contact-point error (m).
    pub path_rmse: f64,
    /// Normal-force error against the desired force (N).
    pub force_rmse: f64,
}

impl ExecutionLog {
    pub fn metrics(&self) -> TrackingMetrics {
        let n = self.rows.len().max(1) as f64;
        let (mut p, mut f) = (0.0, 0.0);
        for r in &self.rows {
            let e = r.tool - r.tool_desired;
            p += e.x * e.x + e.y * e.y;
            f += (r.fz_actual - r.fz_desired).powi(2);
        }
        TrackingMetrics {
            path_rmse: (p / n).sqrt(),
            force_rmse: (f / n).sqrt(),
        }
    }

    /// Copy with wall-clock solve times zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            rows: self.rows.clone(),
            cycles: self
                .cycles
                .iter()
                .map(|c| CycleRecord { solve_ms: 0.0, ..c.clone() })
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.rows.first().map(|r| r.q.len()).unwrap_or(0);
        let mut header: Vec<String> = ["t", "plan_id", "plan_index"].map(String::from).to_vec();
        header.extend((0..n).map(|i| format!("q{i}")));
        header.extend(["x", "y", "z", "x_d", "y_d", "z_d", "fz_desired", "fz_actual", "fz_measured", "f_fric_x", "f_fric_y"].map(String::from));
        header.extend((0..n).map(|i| format!("u{i}")));
        w.write_record(&header).map_err(|e| csv_error("log", &e))?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string(), r.plan_id.to_string(), r.plan_index.to_string()];
            rec.extend(r.q.iter().map(f64::to_string));
            rec.extend(r.tool.iter().chain(r.tool_desired.iter()).map(f64::to_string));
            rec.extend([r.fz_desired, r.fz_actual, r.fz_measured, r.friction[0], r.friction[1]].map(|v| v.to_string()));
            rec.extend(r.u.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| csv_error("log", &e))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the sample table written by [`write_csv`](Self::write_csv) (cycles are not part of it).
    pub fn read_csv<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r.headers().map_err(|e| csv_error(source_name, &e))?.len();
        if width < 14 || (width - 14) % 2 != 0 {
            return Err(Error::Csv {
                source_name: source_name.to_string(),
                line: 1,
                message: format!("unexpected column count {width}"),
            });
        }
        let n = (width - 14) / 2;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(source_name, &e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let bad = |msg: String| Error::Csv {
                source_name: source_name.to_string(),
                line,
                message: msg,
            };
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != width {
                return Err(bad(format!("expected {width} fields, found {}", vals.len())));
            }
            let o = 3 + n;
            rows.push(LogRow {
                t: vals[0],
                plan_id: vals[1] as usize,
                plan_index: vals[2] as usize,
                q: DVector::from_column_slice(&vals[3..o]),
                tool: Vector3::new(vals[o], vals[o + 1], vals[o + 2]),
                tool_desired: Vector3::new(vals[o + 3], vals[o + 4], vals[o + 5]),
                fz_desired: vals[o + 6],
                fz_actual: vals[o + 7],
                fz_measured: vals[o + 8],
                friction: [vals[o + 9], vals[o + 10]],
                u: DVector::from_column_slice(&vals[o + 11..o + 11 + n]),
            });
        }
        Ok(Self { rows, cycles: Vec::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, &path.display().to_string())
    }

    pub fn save_cycles(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error("cycles", &e))?;
        for c in &self.cycles {
            w.serialize(c).map_err(|e| csv_error("cycles", &e))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solver settings of a receding-horizon cycle.
pub fn cycle_config(scenario: &Scenario) -> admm::AdmmConfig {
    let mut cfg = scenario.solver.clone();
    cfg.max_iters = scenario.mpc.admm_iters;
    cfg.ddp.max_iters = scenario.mpc.ddp_iters;
    cfg
}

/// Re-solves the window starting at `t0` from `x0`, warm-started by `previous`
/// advanced by `shift` steps, falling back to a cold start if that fails.
pub fn mpc_cycle(
    sys: &ContactSystem,
    scenario: &Scenario,
    t0: f64,
    x0: AugmentedState,
    previous: Option<(&AdmmSolution, usize)>,
) -> Result<AdmmSolution> {
    let spec = scenario.problem_window(sys, t0, x0, scenario.mpc.horizon);
    let cfg = cycle_config(scenario);
    match previous {
        // A warm start that no longer fits the measured state can diverge; retry cold.
        Some((p, shift)) => admm::solve(sys, &spec, &cfg, Some(Initialization::shifted(p, shift)))
            .or_else(|_| admm::solve(sys, &spec, &cfg, None)),
        None => admm::solve(sys, &spec, &cfg, None),
    }
}

/// Offline plan over the whole run, built from consecutive windows each starting at
/// the model-predicted state of the previous one (no measurements).
pub fn offline_plan(sys: &ContactSystem, scenario: &Scenario, steps: usize) -> Result<Plan> {
    let h = scenario.mpc.horizon;
    let commit = (h / 2).max(1);
    let mut x0 = scenario.initial_state(sys)?;
    let mut xs = vec![x0.to_vector()];
    let mut us = Vec::with_capacity(steps);
    let mut previous: Option<AdmmSolution> = None;
    while us.len() < steps {
        let k = us.len();
        let sol = mpc_cycle(sys, scenario, k as f64 * scenario.dt, x0.clone(), previous.as_ref().map(|p| (p, commit)))?;
        let take = commit.min(steps - k);
        us.extend_from_slice(&sol.us[..take]);
        xs.extend_from_slice(&sol.xs[1..=take]);
        x0 = AugmentedState::from_vector(&sol.xs[take], sys.n_joints())?;
        previous = Some(sol);
    }
    Ok(Plan {
        id: 0,
        start_step: 0,
        xs,
        us,
    })
}

fn plan_from(sol: &AdmmSolution, id: usize, start_step: usize) -> Plan {
    Plan {
        id,
        start_step,
        xs: sol.xs.clone(),
        us: sol.us.clone(),
    }
}

/// First-order low-pass filter.
#[derive(Debug, Clone)]
struct LowPass<T> {
    value: T,
    alpha: f64,
}

impl<T> LowPass<T>
where
    T: Clone + std::ops::AddAssign<T>,
    for<'a> &'a T: std::ops::Sub<&'a T, Output = T>,
    T: std::ops::Mul<f64, Output = T>,
{
    fn new(initial: T, cutoff_hz: f64, sample: f64) -> Self {
        let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff_hz);
        Self {
            value: initial,
            alpha: sample / (sample + tau),
        }
    }

    fn update(&mut self, x: &T) {
        let step = (x - &self.value) * self.alpha;
        self.value += step;
    }
}

/// Single-slot hand-over from planner to executor: `(delivery step, solution, plan)`.
struct Mailbox {
    pending: Option<(usize, AdmmSolution, Plan)>,
}

impl Mailbox {
    fn deliver(&mut self, k: usize, active: &mut Plan, solution: &mut Option<(AdmmSolution, usize)>) {
        if matches!(&self.pending, Some((deliver, _, _)) if *deliver <= k) {
            let (_, sol, plan) = self.pending.take().expect("checked");
            *solution = Some((sol, plan.start_step));
            *active = plan;
        }
    }
}

/// Runs `scenario` closed-loop in `mode` on the virtual clock.
pub fn run_scenario(scenario: &Scenario, mode: Mode) -> Result<ExecutionLog> {
    let sys = scenario.system()?;
    let cfg = &scenario.mpc;
    let n = sys.n_joints();
    let dt = scenario.dt;
    let steps = (scenario.duration / dt).round() as usize;
    let fc_ticks = (dt / cfg.fc_period).round().max(1.0) as usize;
    let replan_steps = (cfg.replan_period / dt).round().max(1.0) as usize;
    let substeps = (scenario.plant.substeps / fc_ticks).max(1);
    let tick = dt / fc_ticks as f64;
    let h = tick / substeps as f64;

    let x0 = scenario.initial_state(&sys)?;
    let mut plant = Plant::new(&sys, scenario.surface_height, &scenario.plant, x0.q.clone(), x0.qdot.clone())?;
    let gains = FeedbackGains::critically_damped(&sys.model, &x0.q, cfg.feedback_bandwidth)?;
    let (u_lo, u_hi) = (sys.model.u_lower(), sys.model.u_upper());

    let mut log = ExecutionLog::default();
    let mut solution: Option<(AdmmSolution, usize)> = None;
    let mut active = match mode {
        Mode::MpcFc => {
            let started = Instant::now();
            let sol = mpc_cycle(&sys, scenario, 0.0, x0.clone(), None)?;
            log.cycles.push(cycle_record(0, 0, 0, started, &sol, false));
            let plan = plan_from(&sol, 0, 0);
            solution = Some((sol, 0));
            plan
        }
        _ => offline_plan(&sys, scenario, steps)?,
    };
    let mut mailbox = Mailbox { pending: None };
    let mut next_id = 1;
    let mut filter = LowPass::new(x0.f_e, cfg.fc_cutoff, h);
    let mut qdot_filter = LowPass::new(x0.qdot.clone(), cfg.state_cutoff, h);

    for k in 0..steps {
        let t = k as f64 * dt;
        mailbox.deliver(k, &mut active, &mut solution);
        if mode == Mode::MpcFc && k > 0 && k % replan_steps == 0 {
            if mailbox.pending.is_some() {
                log.cycles.push(CycleRecord {
                    plan_id: next_id,
                    start_step: k,
                    delay_steps: 0,
                    solve_ms: 0.0,
                    admm_iters: 0,
                    ddp_iters: 0,
                    converged: false,
                    overrun: true,
                    failed: false,
                });
                next_id += 1;
            } else {
                let mut f = filter.value;
                f.z = f.z.max(1.5 * sys.params.f_floor);
                let xs = AugmentedState::new(plant.state.q.clone(), qdot_filter.value.clone(), f);
                let prev = solution.as_ref().map(|(s, start)| (s, k - start));
                let started = Instant::now();
                match mpc_cycle(&sys, scenario, t, xs, prev) {
                    Ok(sol) => {
                        let delay = if cfg.wall_clock {
                            (started.elapsed().as_secs_f64() / dt).ceil() as usize
                        } else {
                            cfg.delay_steps
                        };
                        let overrun = delay > replan_steps;
                        log.cycles.push(cycle_record(next_id, k, delay, started, &sol, overrun));
                        if !overrun {
                            let plan = plan_from(&sol, next_id, k);
                            mailbox.pending = Some((k + delay, sol, plan));
                        }
                    }
                    // A failed re-solve leaves the active plan in force.
                    Err(_) => log.cycles.push(CycleRecord {
                        plan_id: next_id,
                        start_step: k,
                        delay_steps: 0,
                        solve_ms: started.elapsed().as_secs_f64() * 1e3,
                        admm_iters: 0,
                        ddp_iters: 0,
                        converged: false,
                        overrun: false,
                        failed: true,
                    }),
                }
                next_id += 1;
            }
            mailbox.deliver(k, &mut active, &mut solution);
        }

        let index = k - active.start_step;
        for j in 0..fc_ticks {
            let tt = t + j as f64 * tick;
            let (idx, point) = active.point(n, index, j as f64 / fc_ticks as f64);
            let frames = ChainFrames::compute(&sys.model, &plant.state.q)?;
            let jac = frames.position_jacobian(&sys.model);
            let f_meas = filter.value;
            let u = compose_control(
                &point,
                &plant.state.q,
                &plant.state.qdot,
                mode.force_control().then_some(&f_meas),
                &jac,
                &sys.frame,
                &gains,
                &cfg.compliance,
            );
            let u = clamp(&u, &u_lo, &u_hi);
            let reading = plant.reading()?;
            let (desired, fz_d, _) = scenario.desired(tt);
            log.rows.push(LogRow {
                t: tt,
                plan_id: active.id,
                plan_index: idx,
                q: plant.state.q.clone(),
                tool: reading.tool,
                tool_desired: desired,
                fz_desired: fz_d,
                fz_actual: reading.force.z,
                fz_measured: f_meas.z,
                friction: [reading.force.x, reading.force.y],
                u: u.clone(),
            });
            for _ in 0..substeps {
                let m = plant.advance(&u, h, 1)?;
                filter.update(&m);
                qdot_filter.update(&plant.state.qdot);
            }
        }
    }
    Ok(log)
}

fn cycle_record(id: usize, start: usize, delay: usize, started: Instant, sol: &AdmmSolution, overrun: bool) -> CycleRecord {
    CycleRecord {
        plan_id: id,
        start_step: start,
        delay_steps: delay,
        solve_ms: started.elapsed().as_secs_f64() * 1e3,
        admm_iters: sol.iterations(),
        ddp_iters: sol.ddp_iterations,
        converged: sol.converged,
        overrun,
        failed: false,
    }
}
