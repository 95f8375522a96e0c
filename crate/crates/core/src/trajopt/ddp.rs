//! Iterative LQR / DDP (Gauss-Newton dynamics expansion) with feedback rollouts,
//! backtracking line search and Levenberg regularization of `Q_uu`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete-time dynamics seen by the solver.
pub trait DdpDynamics {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(A, B)` with `x+ ~ A dx + B du`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Second-order expansion of one stage cost.
#[derive(Debug, Clone)]
pub struct StageExpansion {
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

impl StageExpansion {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }
}

/// Additive trajectory cost: stages `0..N` on `(x_i, u_i)` and a terminal term on `x_N`.
pub trait DdpCost {
    fn stage(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn stage_expansion(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageExpansion;
    fn terminal(&self, x: &DVector<f64>) -> f64;
    /// `(l_x, l_xx)` of the terminal term.
    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpOptions {
    pub max_iters: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub rel_tol: f64,
    pub reg_init: f64,
    pub reg_factor: f64,
    pub reg_max: f64,
    /// Line-search step sizes are `2^-k` for `k = 0..=line_search_steps`.
    pub line_search_steps: u32,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            rel_tol: 1e-6,
            reg_init: 1e-6,
            reg_factor: 10.0,
            reg_max: 1e6,
            line_search_steps: 10,
        }
    }
}

/// Rollout, feedback policy and bookkeeping of one solve.
#[derive(Debug, Clone)]
pub struct DdpSolution {
    /// States `x_0..x_N`.
    pub xs: Vec<DVector<f64>>,
    /// Applied controls `u_0..u_{N-1}`.
    pub us: Vec<DVector<f64>>,
    /// Feedback gains from the last backward pass (`du = K dx`).
    pub gains: Vec<DMatrix<f64>>,
    pub cost: f64,
    /// Cost of the warm-start rollout.
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Warm start: controls, optionally with a reference state trajectory and gains so that
/// the first rollout applies `u_i + K_i (x_i - xref_i)`.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub us: Vec<DVector<f64>>,
    pub feedback: Option<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)>,
}

impl WarmStart {
    pub fn open_loop(us: Vec<DVector<f64>>) -> Self {
        Self { us, feedback: None }
    }
}

pub fn trajectory_cost<C: DdpCost>(cost: &C, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
    let stages: f64 = us
        .iter()
        .enumerate()
        .map(|(i, u)| cost.stage(i, &xs[i], u))
        .sum();
    stages + cost.terminal(&xs[us.len()])
}

/// Forward simulation with optional affine feedback around a reference.
fn rollout<D: DdpDynamics>(
    dynamics: &D,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
    feedback: Option<(&[DVector<f64>], &[DMatrix<f64>])>,
    ff: Option<(&[DVector<f64>], f64)>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    let mut applied = Vec::with_capacity(us.len());
    xs.push(x0.clone());
    for i in 0..us.len() {
        let mut u = us[i].clone();
        if let Some((k, alpha)) = ff {
            u += &k[i] * alpha;
        }
        if let Some((xref, gains)) = feedback {
            u += &gains[i] * (&xs[i] - &xref[i]);
        }
        let next = dynamics.step(&xs[i], &u)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rollout", "non-finite state"));
        }
        applied.push(u);
        xs.push(next);
    }
    Ok((xs, applied))
}

struct BackwardPass {
    k: Vec<DVector<f64>>,
    gains: Vec<DMatrix<f64>>,
    /// Expected decrease terms `(sum k^T Q_u, sum 1/2 k^T Q_uu k)`.
    expected: (f64, f64),
}

fn backward_pass<C: DdpCost>(
    cost: &C,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    lin: &[(DMatrix<f64>, DMatrix<f64>)],
    reg: f64,
) -> Option<BackwardPass> {
    let n = us.len();
    let (mut vx, mut vxx) = cost.terminal_expansion(&xs[n]);
    let mut k = vec![DVector::zeros(0); n];
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    let mut expected = (0.0, 0.0);
    for i in (0..n).rev() {
        let (a, b) = &lin[i];
        let e = cost.stage_expansion(i, &xs[i], &us[i]);
        let vxx_a = &vxx * a;
        let vxx_b = &vxx * b;
        let qx = &e.lx + a.tr_mul(&vx);
        let qu = &e.lu + b.tr_mul(&vx);
        let qxx = &e.lxx + a.tr_mul(&vxx_a);
        let mut quu = &e.luu + b.tr_mul(&vxx_b);
        let qux = &e.lux + b.tr_mul(&vxx_a);
        for d in 0..quu.nrows() {
            quu[(d, d)] += reg;
        }
        let quu = 0.5 * (&quu + quu.transpose());
        let chol = quu.clone().cholesky()?;
        let ki = -chol.solve(&qu);
        let gi = -chol.solve(&qux);
        expected.0 += ki.dot(&qu);
        expected.1 += 0.5 * ki.dot(&(&quu * &ki));
        vx = &qx + gi.tr_mul(&(&quu * &ki)) + gi.tr_mul(&qu) + qux.tr_mul(&ki);
        let v = &qxx + gi.tr_mul(&(&quu * &gi)) + gi.tr_mul(&qux) + qux.tr_mul(&gi);
        vxx = 0.5 * (&v + v.transpose());
        k[i] = ki;
        gains[i] = gi;
    }
    Some(BackwardPass { k, gains, expected })
}

/// Minimizes `cost` subject to `dynamics` from `x0`, starting at `warm`.
pub fn ddp_solve<D: DdpDynamics, C: DdpCost>(
    dynamics: &D,
    cost: &C,
    x0: &DVector<f64>,
    warm: &WarmStart,
    options: &DdpOptions,
) -> Result<DdpSolution> {
    let feedback = warm
        .feedback
        .as_ref()
        .map(|(xr, g)| (xr.as_slice(), g.as_slice()));
    // A stale feedback reference can destabilize the first rollout; fall back to open loop.
    let (mut xs, mut us) = match rollout(dynamics, x0, &warm.us, feedback, None) {
        Ok(r) => r,
        Err(e) if feedback.is_some() => rollout(dynamics, x0, &warm.us, None, None).map_err(|_| e)?,
        Err(e) => return Err(e),
    };
    let mut current = trajectory_cost(cost, &xs, &us);
    let initial_cost = current;
    let nu = dynamics.control_dim();
    let nx = dynamics.state_dim();
    let mut gains = vec![DMatrix::zeros(nu, nx); us.len()];
    let mut reg = options.reg_init;
    let mut iterations = 0;
    let mut converged = false;
    if us.is_empty() {
        return Ok(DdpSolution {
            xs,
            us,
            gains,
            cost: current,
            initial_cost,
            iterations,
            converged: true,
        });
    }

    while iterations < options.max_iters {
        let lin = xs[..us.len()]
            .iter()
            .zip(&us)
            .map(|(x, u)| dynamics.linearize(x, u))
            .collect::<Result<Vec<_>>>()?;
        iterations += 1;
        // Backward pass, escalating regularization until Q_uu is positive definite.
        let bp = loop {
            match backward_pass(cost, &xs, &us, &lin, reg) {
                Some(bp) => break bp,
                None => {
                    reg *= options.reg_factor;
                    if reg > options.reg_max {
                        return Err(Error::BackwardPass {
                            max_reg: options.reg_max,
                        });
                    }
                }
            }
        };
        let expected_decrease = -(bp.expected.0 + bp.expected.1);
        if expected_decrease <= 0.1 * options.rel_tol * current.abs().max(1e-12) {
            gains = bp.gains;
            converged = true;
            break;
        }

        let mut accepted = None;
        for s in 0..=options.line_search_steps {
            let alpha = 0.5f64.powi(s as i32);
            let Ok((new_xs, new_us)) = rollout(
                dynamics,
                x0,
                &us,
                Some((&xs, &bp.gains)),
                Some((&bp.k, alpha)),
            ) else {
                continue;
            };
            let c = trajectory_cost(cost, &new_xs, &new_us);
            if c.is_finite() && c < current {
                accepted = Some((new_xs, new_us, c));
                break;
            }
        }
        match accepted {
            Some((new_xs, new_us, c)) => {
                let decrease = current - c;
                xs = new_xs;
                us = new_us;
                gains = bp.gains;
                reg = (reg / options.reg_factor).max(options.reg_init);
                let rel = decrease / current.abs().max(1e-12);
                current = c;
                if rel < options.rel_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                gains = bp.gains;
                reg *= options.reg_factor;
                if reg > options.reg_max {
                    // No descent possible at any step size: a local minimum to working precision.
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(DdpSolution {
        xs,
        us,
        gains,
        cost: current,
        initial_cost,
        iterations,
        converged,
    })
}
