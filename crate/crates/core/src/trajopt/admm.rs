//! ADMM orchestration of the dynamics (DDP), inverse-kinematics and projection
//! blocks, in consensus, sequential and two-block topologies, plus a penalty-only
//! DDP baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ddp::{ddp_solve, DdpOptions, DdpSolution, WarmStart};
use super::ik::{ik_solve, ik_track, path_velocities, IkOptions};
use super::problem::{nominal_contact_force, ContactCost, PlannerDynamics, ProblemSpec, Pull};
use super::projection::{clamp, project_lambda};
use super::trace::{ConvergenceTrace, TraceRow};
use crate::coupled::ContactSystem;
use crate::error::{Error, Result};
use crate::rigid_body::{inverse_dynamics, ChainFrames};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// IK and dynamics copies tied through the projection copy.
    Consensus,
    /// Dynamics copy tied to both the IK copy and the projection copy.
    Sequential,
    /// Pose cost inside the dynamics block, projection as the only other block.
    TwoBlock,
    /// Single DDP on the task cost plus constraint penalties.
    Vanilla,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Consensus,
        Variant::Sequential,
        Variant::TwoBlock,
        Variant::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Consensus => "consensus",
            Variant::Sequential => "sequential",
            Variant::TwoBlock => "two_block",
            Variant::Vanilla => "vanilla",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "variant",
                    &format!("unknown '{s}' (expected consensus, sequential, two_block or vanilla)"),
                )
            })
    }
}

/// Solver settings (TOML `[solver]` table).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub variant: Variant,
    pub rho_j: f64,
    pub rho_u: f64,
    pub rho_f: f64,
    /// Outer iterations (DDP chunks for the penalty baseline).
    pub max_iters: usize,
    /// Primal residual threshold (RMS over the horizon).
    pub tolerance: f64,
    pub ddp: DdpOptions,
    pub ik_max_iters: usize,
    pub init: InitKind,
    /// Natural frequency of the joint PD used to build the tracking initial rollout (rad/s).
    pub init_bandwidth: f64,
}

/// Cold-start strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Static holding torques at `x0`; copies hold `x0`.
    Hold,
    /// PD-stabilized rollout around an IK track of the pose targets; copies follow it.
    Track,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Consensus,
            rho_j: 1.0,
            rho_u: 1.0,
            rho_f: 1.0,
            max_iters: 5,
            tolerance: 1e-2,
            ddp: DdpOptions::default(),
            ik_max_iters: 50,
            init: InitKind::Hold,
            init_bandwidth: 20.0,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("rho_j", self.rho_j), ("rho_u", self.rho_u), ("rho_f", self.rho_f)] {
            if !(v > 0.0) {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        if self.max_iters == 0 || self.ddp.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        Ok(())
    }

    fn ik_options(&self) -> IkOptions {
        IkOptions {
            max_iters: self.ik_max_iters,
            ..IkOptions::default()
        }
    }
}

/// Scaled dual variables.
#[derive(Debug, Clone)]
pub struct Duals {
    pub v_ik: Vec<DVector<f64>>,
    pub v_j: Vec<DVector<f64>>,
    pub v_u: Vec<DVector<f64>>,
    pub v_f: Vec<DVector<f64>>,
}

impl Duals {
    pub fn zeros(n: usize, horizon: usize) -> Self {
        let z = |len, count| vec![DVector::zeros(len); count];
        Self {
            v_ik: z(n, horizon + 1),
            v_j: z(n, horizon + 1),
            v_u: z(n, horizon),
            v_f: z(n + 3, horizon + 1),
        }
    }
}

/// Starting point of a solve: warm start of the dynamics block, IK and projection
/// copies and duals.
#[derive(Debug, Clone)]
pub struct Initialization {
    pub warm: WarmStart,
    pub q_hat: Vec<DVector<f64>>,
    pub q_bar: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub lambda_bar: Vec<DVector<f64>>,
    pub duals: Duals,
}

/// Cold start selected by `config.init`; duals are zero in both cases.
pub fn initialize(sys: &ContactSystem, spec: &ProblemSpec, config: &AdmmConfig) -> Result<Initialization> {
    match config.init {
        InitKind::Hold => initialize_hold(sys, spec),
        InitKind::Track => initialize_track(sys, spec, config),
    }
}

/// Gravity and contact-force compensation at `x0` for every step; all copies hold `x0`.
pub fn initialize_hold(sys: &ContactSystem, spec: &ProblemSpec) -> Result<Initialization> {
    let n = sys.n_joints();
    let horizon = spec.horizon();
    let x0 = &spec.x0;
    let frames = ChainFrames::compute(&sys.model, &x0.q)?;
    let jac = frames.position_jacobian(&sys.model);
    let u = crate::rigid_body::gravity_torques(&sys.model, &x0.q)? + jac.tr_mul(&sys.frame.world_force(&x0.f_e));
    let mut lam = DVector::zeros(n + 3);
    lam.fixed_rows_mut::<3>(n).copy_from(&x0.f_e);
    let q_bar = clamp(&x0.q, &spec.limits.q_lower, &spec.limits.q_upper);
    Ok(Initialization {
        warm: WarmStart::open_loop(vec![u.clone(); horizon]),
        q_hat: vec![x0.q.clone(); horizon + 1],
        q_bar: vec![q_bar; horizon + 1],
        u_bar: vec![clamp(&u, &spec.limits.u_lower, &spec.limits.u_upper); horizon],
        lambda_bar: vec![lam; horizon + 1],
        duals: Duals::zeros(n, horizon),
    })
}

/// IK along the pose targets, a PD-stabilized inverse-dynamics rollout around it,
/// copies set from that reference.
pub fn initialize_track(sys: &ContactSystem, spec: &ProblemSpec, config: &AdmmConfig) -> Result<Initialization> {
    let n = sys.n_joints();
    let horizon = spec.horizon();
    let track = ik_track(
        &sys.model,
        &spec.pose_targets,
        &spec.x0.q,
        spec.weights.w_p.max(1.0),
        1e-3,
        &config.ik_options(),
    )?;
    let q_ref = track.qs;
    let qd_ref = path_velocities(&q_ref, spec.dt);
    let qdd_ref = path_velocities(&qd_ref, spec.dt);

    let kp = config.init_bandwidth * config.init_bandwidth;
    let kd = 2.0 * config.init_bandwidth;
    let dynamics = PlannerDynamics { sys, dt: spec.dt };
    let mut x = spec.x0.to_vector();
    let mut us = Vec::with_capacity(horizon);
    let mut lambda_bar = Vec::with_capacity(horizon + 1);
    for i in 0..=horizon {
        let frames = ChainFrames::compute(&sys.model, &q_ref[i])?;
        let jac = frames.position_jacobian(&sys.model);
        let v = &jac * &qd_ref[i];
        let f_nom = if spec.force_targets[i] > 0.0 {
            nominal_contact_force(sys, spec.force_targets[i], &nalgebra::Vector3::new(v[0], v[1], v[2]))
        } else {
            nalgebra::Vector3::zeros()
        };
        let mut lam = DVector::zeros(n + 3);
        lam.rows_mut(0, n).copy_from(&qd_ref[i]);
        lam.fixed_rows_mut::<3>(n).copy_from(&f_nom);
        lambda_bar.push(lam);
        if i == horizon {
            break;
        }
        let mass = frames.mass_matrix(&sys.model);
        let q = x.rows(0, n).into_owned();
        let qd = x.rows(n, n).into_owned();
        let f_world = sys.frame.world_force(&x.fixed_rows::<3>(2 * n).into_owned());
        let pd = &mass * ((&q_ref[i] - &q) * kp + (&qd_ref[i] - &qd) * kd);
        let u = inverse_dynamics(&sys.model, &q_ref[i], &qd_ref[i], &qdd_ref[i])? + jac.tr_mul(&f_world) + pd;
        x = dynamics_step(&dynamics, &x, &u)?;
        us.push(u);
    }
    let q_bar = q_ref
        .iter()
        .map(|q| clamp(q, &spec.limits.q_lower, &spec.limits.q_upper))
        .collect();
    let u_bar = us
        .iter()
        .map(|u| clamp(u, &spec.limits.u_lower, &spec.limits.u_upper))
        .collect();
    Ok(Initialization {
        warm: WarmStart::open_loop(us),
        q_hat: q_ref,
        q_bar,
        u_bar,
        lambda_bar,
        duals: Duals::zeros(n, horizon),
    })
}

fn dynamics_step(d: &PlannerDynamics<'_>, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    use super::ddp::DdpDynamics;
    d.step(x, u)
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub variant: Variant,
    /// Dynamics-block states `x_0..x_N`.
    pub xs: Vec<DVector<f64>>,
    /// Dynamics-block controls `u_0..u_{N-1}`.
    pub us: Vec<DVector<f64>>,
    /// Feedback gains of the last DDP backward pass.
    pub gains: Vec<DMatrix<f64>>,
    pub q_hat: Vec<DVector<f64>>,
    pub q_bar: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub lambda_bar: Vec<DVector<f64>>,
    pub duals: Duals,
    pub trace: ConvergenceTrace,
    pub converged: bool,
    pub ddp_iterations: usize,
}

impl AdmmSolution {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn joint_positions(&self, n: usize) -> Vec<DVector<f64>> {
        self.xs.iter().map(|x| x.rows(0, n).into_owned()).collect()
    }
}

fn rms(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

fn sub(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn add(a: &[DVector<f64>], b: &[DVector<f64>]) -> Vec<DVector<f64>> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Working state shared by the ADMM variants.
struct Solver<'a> {
    sys: &'a ContactSystem,
    spec: &'a ProblemSpec,
    config: &'a AdmmConfig,
    n: usize,
    started: Instant,
    trace: ConvergenceTrace,
    ddp_iterations: usize,
}

impl<'a> Solver<'a> {
    fn kappa(&self, i: usize) -> Option<f64> {
        self.spec.sliding_constraint.then(|| self.spec.path_radius[i])
    }

    fn qs(&self, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| x.rows(0, self.n).into_owned()).collect()
    }

    fn lambdas(&self, xs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| x.rows(self.n, self.n + 3).into_owned()).collect()
    }

    /// IK block `w_p |FK(q) - x_d|^2 + w_posture |q - q_posture|^2 + rho/2 |q - ref|^2`,
    /// with the posture term folded into the attractor.
    fn ik_block(&self, refs: &[DVector<f64>], rho: f64) -> Result<Vec<DVector<f64>>> {
        let w = 2.0 * self.spec.weights.w_posture;
        let refs: Vec<_> = refs.iter().map(|r| (r * rho + &self.spec.posture * w) / (rho + w)).collect();
        let cfg = self.config;
        Ok(ik_solve(&self.sys.model, &self.spec.pose_targets, &refs, self.spec.weights.w_p, rho + w, &cfg.ik_options())?.qs)
    }

    fn project_q(&self, q: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let lim = &self.spec.limits;
        q.iter().map(|q| clamp(q, &lim.q_lower, &lim.q_upper)).collect()
    }

    fn project_u(&self, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let lim = &self.spec.limits;
        u.iter().map(|u| clamp(u, &lim.u_lower, &lim.u_upper)).collect()
    }

    fn project_lambda(&self, q_bar: &[DVector<f64>], lambda: &[DVector<f64>]) -> Vec<DVector<f64>> {
        lambda
            .iter()
            .enumerate()
            .map(|(i, l)| project_lambda(self.sys, &q_bar[i], l, self.kappa(i)))
            .collect()
    }

    fn ddp(&mut self, cost: &ContactCost<'_>, warm: &WarmStart) -> Result<DdpSolution> {
        let dynamics = PlannerDynamics {
            sys: self.sys,
            dt: self.spec.dt,
        };
        let sol = ddp_solve(&dynamics, cost, &self.spec.x0.to_vector(), warm, &self.config.ddp)?;
        self.ddp_iterations += sol.iterations;
        Ok(sol)
    }

    fn record(&mut self, iteration: usize, xs: &[DVector<f64>], us: &[DVector<f64>], r: [f64; 4]) -> bool {
        let cost = ContactCost::tracking(self.sys, self.spec).objective(xs, us);
        let row = TraceRow {
            iteration,
            cost,
            r_ik: r[0],
            r_j: r[1],
            r_u: r[2],
            r_f: r[3],
            cumulative_ddp_iters: self.ddp_iterations,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        self.trace.rows.push(row);
        row.max_residual() <= self.config.tolerance
    }

    fn pulls(&self, target_q: Vec<Pull>, u_t: Vec<DVector<f64>>, l_t: Vec<DVector<f64>>) -> ContactCost<'a> {
        ContactCost {
            sys: self.sys,
            spec: self.spec,
            q_pulls: target_q,
            u_pull: Some(Pull {
                weight: self.config.rho_u,
                targets: u_t,
            }),
            lambda_pull: Some(Pull {
                weight: self.config.rho_f,
                targets: l_t,
            }),
            pose: false,
            penalties: false,
        }
    }
}

fn next_warm(sol: &DdpSolution) -> WarmStart {
    WarmStart {
        us: sol.us.clone(),
        feedback: Some((sol.xs.clone(), sol.gains.clone())),
    }
}

/// Solves `spec` with the variant selected in `config`.
pub fn solve(
    sys: &ContactSystem,
    spec: &ProblemSpec,
    config: &AdmmConfig,
    init: Option<Initialization>,
) -> Result<AdmmSolution> {
    spec.validate(sys)?;
    config.validate()?;
    let started = Instant::now();
    let init = match init {
        Some(i) => i,
        None => initialize(sys, spec, config)?,
    };
    let mut s = Solver {
        sys,
        spec,
        config,
        n: sys.n_joints(),
        started,
        trace: ConvergenceTrace::default(),
        ddp_iterations: 0,
    };
    match config.variant {
        Variant::Vanilla => vanilla(&mut s, init),
        v => admm(&mut s, init, v),
    }
}

fn admm(s: &mut Solver<'_>, init: Initialization, variant: Variant) -> Result<AdmmSolution> {
    let cfg = s.config;
    let Initialization {
        mut warm,
        mut q_hat,
        mut q_bar,
        mut u_bar,
        mut lambda_bar,
        mut duals,
    } = init;
    let mut last: Option<DdpSolution> = None;
    let mut converged = false;
    for k in 0..cfg.max_iters {
        let q_pulls = match variant {
            Variant::Sequential => vec![
                Pull {
                    weight: cfg.rho_j,
                    targets: sub(&q_hat, &duals.v_ik),
                },
                Pull {
                    weight: cfg.rho_j,
                    targets: sub(&q_bar, &duals.v_j),
                },
            ],
            _ => vec![Pull {
                weight: cfg.rho_j,
                targets: sub(&q_bar, &duals.v_j),
            }],
        };
        let mut cost = s.pulls(q_pulls, sub(&u_bar, &duals.v_u), sub(&lambda_bar, &duals.v_f));
        cost.pose = variant == Variant::TwoBlock;
        let sol = s.ddp(&cost, &warm)?;
        let q = s.qs(&sol.xs);
        let lambda = s.lambdas(&sol.xs);

        let r_ik;
        match variant {
            Variant::Consensus => {
                // IK reads the iteration-k copies only, so it is independent of the DDP block.
                let refs = sub(&q_bar, &duals.v_ik);
                q_hat = s.ik_block(&refs, cfg.rho_j)?;
                let blend: Vec<_> = add(&q_hat, &duals.v_ik)
                    .iter()
                    .zip(add(&q, &duals.v_j))
                    .map(|(a, b)| (a + b) * 0.5)
                    .collect();
                q_bar = s.project_q(&blend);
                duals.v_ik = add(&duals.v_ik, &sub(&q_hat, &q_bar));
                r_ik = rms(&q_hat, &q_bar);
            }
            Variant::Sequential => {
                let refs = add(&q, &duals.v_ik);
                q_hat = s.ik_block(&refs, cfg.rho_j)?;
                q_bar = s.project_q(&add(&q, &duals.v_j));
                duals.v_ik = add(&duals.v_ik, &sub(&q, &q_hat));
                r_ik = rms(&q, &q_hat);
            }
            _ => {
                q_bar = s.project_q(&add(&q, &duals.v_j));
                r_ik = 0.0;
            }
        }
        u_bar = s.project_u(&add(&sol.us, &duals.v_u));
        lambda_bar = s.project_lambda(&q_bar, &add(&lambda, &duals.v_f));
        duals.v_j = add(&duals.v_j, &sub(&q, &q_bar));
        duals.v_u = add(&duals.v_u, &sub(&sol.us, &u_bar));
        duals.v_f = add(&duals.v_f, &sub(&lambda, &lambda_bar));

        let residuals = [r_ik, rms(&q, &q_bar), rms(&sol.us, &u_bar), rms(&lambda, &lambda_bar)];
        converged = s.record(k, &sol.xs, &sol.us, residuals);
        warm = next_warm(&sol);
        last = Some(sol);
        if converged {
            break;
        }
    }
    let sol = last.expect("at least one iteration");
    Ok(AdmmSolution {
        variant,
        xs: sol.xs,
        us: sol.us,
        gains: sol.gains,
        q_hat,
        q_bar,
        u_bar,
        lambda_bar,
        duals,
        trace: std::mem::take(&mut s.trace),
        converged,
        ddp_iterations: s.ddp_iterations,
    })
}

/// Penalty-only DDP run in chunks of `ddp.max_iters`. Residuals measure the distance
/// of the trajectory to its own projection and to the IK block's answer.
fn vanilla(s: &mut Solver<'_>, init: Initialization) -> Result<AdmmSolution> {
    let cfg = s.config;
    let mut cost = ContactCost::tracking(s.sys, s.spec);
    cost.pose = true;
    cost.penalties = true;
    let mut warm = init.warm;
    let mut last: Option<DdpSolution> = None;
    let mut converged = false;
    let mut q_hat = init.q_hat;
    let mut q_bar = init.q_bar;
    let mut u_bar = init.u_bar;
    let mut lambda_bar = init.lambda_bar;
    for k in 0..cfg.max_iters {
        let sol = s.ddp(&cost, &warm)?;
        let q = s.qs(&sol.xs);
        let lambda = s.lambdas(&sol.xs);
        q_hat = s.ik_block(&q, cfg.rho_j)?;
        q_bar = s.project_q(&q);
        u_bar = s.project_u(&sol.us);
        lambda_bar = s.project_lambda(&q_bar, &lambda);
        let residuals = [
            rms(&q, &q_hat),
            rms(&q, &q_bar),
            rms(&sol.us, &u_bar),
            rms(&lambda, &lambda_bar),
        ];
        converged = s.record(k, &sol.xs, &sol.us, residuals);
        let stalled = sol.converged;
        warm = next_warm(&sol);
        last = Some(sol);
        if converged || stalled {
            break;
        }
    }
    let sol = last.expect("at least one iteration");
    Ok(AdmmSolution {
        variant: Variant::Vanilla,
        xs: sol.xs,
        us: sol.us,
        gains: sol.gains,
        q_hat,
        q_bar,
        u_bar,
        lambda_bar,
        duals: init.duals,
        trace: std::mem::take(&mut s.trace),
        converged,
        ddp_iterations: s.ddp_iterations,
    })
}

/// Loads an [`AdmmConfig`] from TOML.
pub fn config_from_toml_str(text: &str, source_name: &str) -> Result<AdmmConfig> {
    let cfg: AdmmConfig = toml::from_str(text).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_from_file(path: &Path) -> Result<AdmmConfig> {
    config_from_toml_str(&std::fs::read_to_string(path)?, &path.display().to_string())
}

fn shift_pad<T: Clone>(v: &[T], shift: usize, len: usize) -> Vec<T> {
    (0..len)
        .map(|i| v[(i + shift).min(v.len() - 1)].clone())
        .collect()
}

impl Initialization {
    /// Warm start for a window starting `shift` steps after `previous`'s window:
    /// every sequence is advanced by `shift` and padded with its last element.
    pub fn shifted(previous: &AdmmSolution, shift: usize) -> Self {
        let h = previous.us.len();
        let d = &previous.duals;
        Self {
            warm: WarmStart {
                us: shift_pad(&previous.us, shift, h),
                feedback: Some((
                    shift_pad(&previous.xs, shift, h + 1),
                    shift_pad(&previous.gains, shift, h),
                )),
            },
            q_hat: shift_pad(&previous.q_hat, shift, h + 1),
            q_bar: shift_pad(&previous.q_bar, shift, h + 1),
            u_bar: shift_pad(&previous.u_bar, shift, h),
            lambda_bar: shift_pad(&previous.lambda_bar, shift, h + 1),
            duals: Duals {
                v_ik: shift_pad(&d.v_ik, shift, h + 1),
                v_j: shift_pad(&d.v_j, shift, h + 1),
                v_u: shift_pad(&d.v_u, shift, h),
                v_f: shift_pad(&d.v_f, shift, h + 1),
            },
        }
    }
}
