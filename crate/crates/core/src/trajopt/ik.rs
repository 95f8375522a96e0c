//! Damped differential inverse kinematics with a joint-space attractor.

use nalgebra::{DVector, Vector3};

use crate::error::Result;
use crate::rigid_body::{ChainFrames, ManipulatorModel};

#[derive(Debug, Clone)]
pub struct IkOptions {
    pub max_iters: usize,
    /// Stop when the update norm falls below this (rad).
    pub step_tol: f64,
    /// Initial Levenberg damping added to the Gauss-Newton Hessian.
    pub damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            step_tol: 1e-10,
            damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IkPoint {
    pub q: DVector<f64>,
    /// Position error `|FK(q) - target|` (m).
    pub error: f64,
    pub converged: bool,
}

fn objective(model: &ManipulatorModel, q: &DVector<f64>, target: &Vector3<f64>, q_ref: &DVector<f64>, w_p: f64, rho: f64) -> Result<(f64, Vector3<f64>, ChainFrames)> {
    let frames = ChainFrames::compute(model, q)?;
    let e = frames.tool.translation.vector - target;
    let value = w_p * e.norm_squared() + 0.5 * rho * (q - q_ref).norm_squared();
    Ok((value, e, frames))
}

/// Minimizes `w_p |FK(q) - target|^2 + rho/2 |q - q_ref|^2` by Levenberg-Marquardt,
/// starting from `start`.
pub fn ik_point(
    model: &ManipulatorModel,
    target: &Vector3<f64>,
    q_ref: &DVector<f64>,
    start: &DVector<f64>,
    w_p: f64,
    rho: f64,
    options: &IkOptions,
) -> Result<IkPoint> {
    let n = model.n_joints();
    model.check_dim("q_ref", q_ref)?;
    model.check_dim("start", start)?;
    let mut q = start.clone();
    let (mut value, mut e, mut frames) = objective(model, &q, target, q_ref, w_p, rho)?;
    let mut mu = options.damping;
    let mut converged = false;
    for _ in 0..options.max_iters {
        let jac = frames.position_jacobian(model);
        let ev = DVector::from_column_slice(e.as_slice());
        let grad = jac.tr_mul(&ev) * (2.0 * w_p) + (&q - q_ref) * rho;
        let mut h = jac.tr_mul(&jac) * (2.0 * w_p);
        for k in 0..n {
            h[(k, k)] += rho;
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut hd = h.clone();
            for k in 0..n {
                hd[(k, k)] += mu;
            }
            let Some(chol) = hd.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = -chol.solve(&grad);
            let trial = &q + &step;
            let (tv, te, tf) = objective(model, &trial, target, q_ref, w_p, rho)?;
            if tv <= value {
                let small = step.norm() < options.step_tol;
                q = trial;
                value = tv;
                e = te;
                frames = tf;
                mu = (mu * 0.1).max(options.damping);
                improved = true;
                if small {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved || converged {
            // No descent at any damping: stationary to working precision.
            converged = true;
            break;
        }
    }
    Ok(IkPoint {
        q,
        error: e.norm(),
        converged,
    })
}

/// IK block result over the horizon.
#[derive(Debug, Clone)]
pub struct IkSolution {
    pub qs: Vec<DVector<f64>>,
    pub max_error: f64,
    pub converged: bool,
}

/// Per-step IK with attractors `refs[i]`, each step starting from its attractor.
pub fn ik_solve(
    model: &ManipulatorModel,
    targets: &[Vector3<f64>],
    refs: &[DVector<f64>],
    w_p: f64,
    rho: f64,
    options: &IkOptions,
) -> Result<IkSolution> {
    let mut qs = Vec::with_capacity(targets.len());
    let mut max_error: f64 = 0.0;
    let mut converged = true;
    for (t, r) in targets.iter().zip(refs) {
        let p = ik_point(model, t, r, r, w_p, rho, options)?;
        max_error = max_error.max(p.error);
        converged &= p.converged;
        qs.push(p.q);
    }
    Ok(IkSolution {
        qs,
        max_error,
        converged,
    })
}

/// Follows a target sequence from `q_start`, each step attracted weakly to the
/// previous solution so the branch stays continuous.
pub fn ik_track(
    model: &ManipulatorModel,
    targets: &[Vector3<f64>],
    q_start: &DVector<f64>,
    w_p: f64,
    rho: f64,
    options: &IkOptions,
) -> Result<IkSolution> {
    let mut qs = Vec::with_capacity(targets.len());
    let mut prev = q_start.clone();
    let mut max_error: f64 = 0.0;
    let mut converged = true;
    for t in targets {
        let p = ik_point(model, t, &prev, &prev, w_p, rho, options)?;
        max_error = max_error.max(p.error);
        converged &= p.converged;
        prev = p.q.clone();
        qs.push(p.q);
    }
    Ok(IkSolution {
        qs,
        max_error,
        converged,
    })
}

/// Central finite-difference joint velocities of a sampled joint path.
pub fn path_velocities(qs: &[DVector<f64>], dt: f64) -> Vec<DVector<f64>> {
    let n = qs.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                return DVector::zeros(qs[i].len());
            }
            let (a, b, h) = match i {
                0 => (0, 1, dt),
                _ if i == n - 1 => (n - 2, n - 1, dt),
                _ => (i - 1, i + 1, 2.0 * dt),
            };
            (&qs[b] - &qs[a]) / h
        })
        .collect()
}
