//! Tracking problem definition and the DDP-facing dynamics and cost.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::ddp::{DdpCost, DdpDynamics, StageExpansion};
use crate::coupled::{AugmentedState, ContactSystem};
use crate::error::{Error, Result};
use crate::rigid_body::ChainFrames;
use crate::soft_contact;

/// Cost weights of the tracking task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    /// Normal-force tracking weight `Q_F` (1/N^2).
    pub q_f: f64,
    /// Control weight `R_ctrl` (diagonal).
    pub r_ctrl: f64,
    /// Contact-point position weight `W_p` (1/m^2).
    pub w_p: f64,
    /// Joint-velocity regularization `w_qdot |qdot|^2`; zero leaves the task cost unchanged.
    pub w_qdot: f64,
    /// Posture regularization `w_posture |q - q_posture|^2`, part of the pose task;
    /// holds the redundant joints near a reference configuration.
    pub w_posture: f64,
    /// Quadratic penalty on constraint violations (penalty-only solver).
    pub penalty: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            q_f: 1.0,
            r_ctrl: 1e-4,
            w_p: 1e4,
            w_qdot: 0.0,
            w_posture: 0.0,
            penalty: 1e3,
        }
    }
}

/// Box limits on joints and torques.
#[derive(Debug, Clone, PartialEq)]
pub struct Limits {
    pub q_lower: DVector<f64>,
    pub q_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
}

impl Limits {
    pub fn from_model(model: &crate::rigid_body::ManipulatorModel) -> Self {
        Self {
            q_lower: model.q_lower(),
            q_upper: model.q_upper(),
            u_lower: model.u_lower(),
            u_upper: model.u_upper(),
        }
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            q_lower: DVector::from_element(n, f64::NEG_INFINITY),
            q_upper: DVector::from_element(n, f64::INFINITY),
            u_lower: DVector::from_element(n, f64::NEG_INFINITY),
            u_upper: DVector::from_element(n, f64::INFINITY),
        }
    }
}

/// Simultaneous motion and force tracking over a finite horizon.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub dt: f64,
    pub x0: AugmentedState,
    /// Desired contact-point positions `x_e^d[0..=N]` (world).
    pub pose_targets: Vec<Vector3<f64>>,
    /// Desired normal force `F^d[0..=N]`.
    pub force_targets: Vec<f64>,
    /// Path radius of curvature per step (m); infinite on straight segments.
    pub path_radius: Vec<f64>,
    pub weights: Weights,
    pub limits: Limits,
    /// Whether the sliding constraint is part of the feasible set.
    pub sliding_constraint: bool,
    /// Reference configuration of the posture term.
    pub posture: DVector<f64>,
}

impl ProblemSpec {
    pub fn horizon(&self) -> usize {
        self.pose_targets.len().saturating_sub(1)
    }

    pub fn validate(&self, sys: &ContactSystem) -> Result<()> {
        let n = sys.n_joints();
        let len = self.pose_targets.len();
        if len < 2 {
            return Err(Error::invalid("pose_targets", "need at least two knots"));
        }
        for (what, got) in [
            ("force_targets", self.force_targets.len()),
            ("path_radius", self.path_radius.len()),
        ] {
            if got != len {
                return Err(Error::Dimension {
                    what,
                    expected: len,
                    got,
                });
            }
        }
        if self.x0.q.len() != n || self.x0.qdot.len() != n {
            return Err(Error::Dimension {
                what: "x0",
                expected: n,
                got: self.x0.q.len(),
            });
        }
        if self.posture.len() != n {
            return Err(Error::Dimension {
                what: "posture",
                expected: n,
                got: self.posture.len(),
            });
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        let w = &self.weights;
        if w.q_f < 0.0 || w.w_p < 0.0 || w.penalty < 0.0 || w.w_qdot < 0.0 || w.w_posture < 0.0 {
            return Err(Error::invalid("weights", "must be non-negative"));
        }
        if !(w.r_ctrl > 0.0) {
            return Err(Error::invalid("weights.r_ctrl", "must be positive"));
        }
        Ok(())
    }
}

/// Planner dynamics: the coupled system at a fixed step.
pub struct PlannerDynamics<'a> {
    pub sys: &'a ContactSystem,
    pub dt: f64,
}

impl DdpDynamics for PlannerDynamics<'_> {
    fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.sys.n_joints()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.sys.step_vec(x, u, self.dt)
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let s = AugmentedState::from_vector(x, self.sys.n_joints())?;
        self.sys.linearize_unchecked(&s, u, self.dt)
    }
}

/// Quadratic attraction `(weight / 2) |z_i - target_i|^2`.
#[derive(Debug, Clone)]
pub struct Pull {
    pub weight: f64,
    pub targets: Vec<DVector<f64>>,
}

/// Tracking cost plus the ADMM attraction terms of one block.
pub struct ContactCost<'a> {
    pub sys: &'a ContactSystem,
    pub spec: &'a ProblemSpec,
    /// Attractions on `q` (knots `0..=N`).
    pub q_pulls: Vec<Pull>,
    /// Attraction on `u` (knots `0..N`).
    pub u_pull: Option<Pull>,
    /// Attraction on `lambda = (qdot, F_e)` (knots `0..=N`).
    pub lambda_pull: Option<Pull>,
    /// Include the contact-point position cost.
    pub pose: bool,
    /// Include quadratic constraint-violation penalties.
    pub penalties: bool,
}

impl<'a> ContactCost<'a> {
    pub fn tracking(sys: &'a ContactSystem, spec: &'a ProblemSpec) -> Self {
        Self {
            sys,
            spec,
            q_pulls: Vec::new(),
            u_pull: None,
            lambda_pull: None,
            pose: false,
            penalties: false,
        }
    }

    fn n(&self) -> usize {
        self.sys.n_joints()
    }

    fn state_terms(&self, i: usize, x: &DVector<f64>, exp: Option<&mut StageExpansion>) -> f64 {
        let n = self.n();
        let w = &self.spec.weights;
        let mut value = 0.0;
        let mut lx = DVector::zeros(x.len());
        let mut lxx = DMatrix::zeros(x.len(), x.len());

        let df = x[2 * n + 2] - self.spec.force_targets[i];
        value += w.q_f * df * df;
        lx[2 * n + 2] += 2.0 * w.q_f * df;
        lxx[(2 * n + 2, 2 * n + 2)] += 2.0 * w.q_f;

        if w.w_qdot > 0.0 {
            let qd = x.rows(n, n);
            value += w.w_qdot * qd.norm_squared();
            lx.rows_mut(n, n).add_assign(&(qd * (2.0 * w.w_qdot)));
            for k in n..2 * n {
                lxx[(k, k)] += 2.0 * w.w_qdot;
            }
        }

        let q = x.rows(0, n).into_owned();
        if self.pose && w.w_posture > 0.0 {
            let d = &q - &self.spec.posture;
            value += w.w_posture * d.norm_squared();
            lx.rows_mut(0, n).add_assign(&(&d * (2.0 * w.w_posture)));
            for k in 0..n {
                lxx[(k, k)] += 2.0 * w.w_posture;
            }
        }
        if self.pose {
            let frames = ChainFrames::compute(&self.sys.model, &q).expect("dimension checked");
            let e = frames.tool.translation.vector - self.spec.pose_targets[i];
            value += w.w_p * e.norm_squared();
            if exp.is_some() {
                let jac = frames.position_jacobian(&self.sys.model);
                let ev = DVector::from_column_slice(e.as_slice());
                let g = jac.tr_mul(&ev) * (2.0 * w.w_p);
                let h = jac.tr_mul(&jac) * (2.0 * w.w_p);
                lx.rows_mut(0, n).add_assign(&g);
                lxx.view_mut((0, 0), (n, n)).add_assign(&h);
            }
        }

        for pull in &self.q_pulls {
            let d = &q - &pull.targets[i];
            value += 0.5 * pull.weight * d.norm_squared();
            lx.rows_mut(0, n).add_assign(&(&d * pull.weight));
            for k in 0..n {
                lxx[(k, k)] += pull.weight;
            }
        }
        if let Some(pull) = &self.lambda_pull {
            let d = x.rows(n, n + 3) - &pull.targets[i];
            value += 0.5 * pull.weight * d.norm_squared();
            lx.rows_mut(n, n + 3).add_assign(&(&d * pull.weight));
            for k in n..2 * n + 3 {
                lxx[(k, k)] += pull.weight;
            }
        }

        if self.penalties {
            let lim = &self.spec.limits;
            for k in 0..n {
                let viol = (x[k] - lim.q_upper[k]).max(0.0) - (lim.q_lower[k] - x[k]).max(0.0);
                if viol != 0.0 {
                    value += w.penalty * viol * viol;
                    lx[k] += 2.0 * w.penalty * viol;
                    lxx[(k, k)] += 2.0 * w.penalty;
                }
            }
            if self.spec.sliding_constraint {
                value += self.speed_penalty(i, x, &mut lx, &mut lxx);
            }
        }

        if let Some(e) = exp {
            e.lx += lx;
            e.lxx += lxx;
        }
        value
    }

    /// `penalty * max(0, |v| - v*)^2` with `m_eff` and `J` frozen at the current `q`.
    fn speed_penalty(
        &self,
        i: usize,
        x: &DVector<f64>,
        lx: &mut DVector<f64>,
        lxx: &mut DMatrix<f64>,
    ) -> f64 {
        let n = self.n();
        let kappa = self.spec.path_radius[i];
        if !kappa.is_finite() {
            return 0.0;
        }
        let q = x.rows(0, n).into_owned();
        let qd = x.rows(n, n).into_owned();
        let f_z = x[2 * n + 2];
        let Ok(info) = super::projection::speed_limit(self.sys, &q, &qd, f_z, kappa) else {
            return 0.0;
        };
        let Some(info) = info else { return 0.0 };
        let excess = info.speed - info.v_star;
        if excess <= 0.0 {
            return 0.0;
        }
        let w = self.spec.weights.penalty;
        // d|v|/dqdot = J^T v / |v|; dv*/dF_z = v* / (2 F_z).
        let mut g = DVector::zeros(x.len());
        let dir = info.jacobian.tr_mul(&(info.velocity / info.speed));
        g.rows_mut(n, n).copy_from(&dir);
        if f_z > 0.0 {
            g[2 * n + 2] = -info.v_star / (2.0 * f_z);
        }
        *lx += &g * (2.0 * w * excess);
        *lxx += &g * g.transpose() * (2.0 * w);
        w * excess * excess
    }

    fn control_terms(&self, u: &DVector<f64>, exp: Option<&mut StageExpansion>) -> f64 {
        let w = &self.spec.weights;
        let n = u.len();
        let mut value = w.r_ctrl * u.norm_squared();
        let mut lu = u * (2.0 * w.r_ctrl);
        let mut luu = DMatrix::identity(n, n) * (2.0 * w.r_ctrl);
        if self.penalties {
            let lim = &self.spec.limits;
            for k in 0..n {
                let viol = (u[k] - lim.u_upper[k]).max(0.0) - (lim.u_lower[k] - u[k]).max(0.0);
                if viol != 0.0 {
                    value += w.penalty * viol * viol;
                    lu[k] += 2.0 * w.penalty * viol;
                    luu[(k, k)] += 2.0 * w.penalty;
                }
            }
        }
        if let Some(e) = exp {
            e.lu += lu;
            e.luu += luu;
        }
        value
    }

    fn control_pull(&self, i: usize, u: &DVector<f64>, exp: Option<&mut StageExpansion>) -> f64 {
        let Some(pull) = &self.u_pull else { return 0.0 };
        let d = u - &pull.targets[i];
        if let Some(e) = exp {
            e.lu += &d * pull.weight;
            for k in 0..u.len() {
                e.luu[(k, k)] += pull.weight;
            }
        }
        0.5 * pull.weight * d.norm_squared()
    }

    /// Task objective only (force, control and position terms, no attractions).
    pub fn objective(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let plain = ContactCost {
            sys: self.sys,
            spec: self.spec,
            q_pulls: Vec::new(),
            u_pull: None,
            lambda_pull: None,
            pose: true,
            penalties: false,
        };
        super::ddp::trajectory_cost(&plain, xs, us)
    }
}

trait AddAssign<T> {
    fn add_assign(&mut self, other: &T);
}

impl<S> AddAssign<DVector<f64>> for nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>
where
    S: nalgebra::StorageMut<f64, nalgebra::Dyn, nalgebra::U1>,
{
    fn add_assign(&mut self, other: &DVector<f64>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }
}

impl<S> AddAssign<DMatrix<f64>> for nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::Dyn, S>
where
    S: nalgebra::StorageMut<f64, nalgebra::Dyn, nalgebra::Dyn>,
{
    fn add_assign(&mut self, other: &DMatrix<f64>) {
        for c in 0..other.ncols() {
            for r in 0..other.nrows() {
                self[(r, c)] += other[(r, c)];
            }
        }
    }
}

impl DdpCost for ContactCost<'_> {
    fn stage(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state_terms(i, x, None) + self.control_terms(u, None) + self.control_pull(i, u, None)
    }

    fn stage_expansion(&self, i: usize, x: &DVector<f64>, u: &DVector<f64>) -> StageExpansion {
        let mut e = StageExpansion::zeros(x.len(), u.len());
        self.state_terms(i, x, Some(&mut e));
        self.control_terms(u, Some(&mut e));
        self.control_pull(i, u, Some(&mut e));
        e
    }

    fn terminal(&self, x: &DVector<f64>) -> f64 {
        self.state_terms(self.spec.horizon(), x, None)
    }

    fn terminal_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut e = StageExpansion::zeros(x.len(), 0);
        self.state_terms(self.spec.horizon(), x, Some(&mut e));
        (e.lx, e.lxx)
    }
}

/// Normal force the tool must apply plus the friction it meets when sliding with
/// tangential velocity `v_t`, as a contact-frame vector.
pub fn nominal_contact_force(sys: &ContactSystem, f_z: f64, v_world: &Vector3<f64>) -> Vector3<f64> {
    let v_c = sys.frame.to_contact(v_world);
    let v_t = nalgebra::Vector2::new(v_c.x, v_c.y);
    let n_v = soft_contact::moving_direction(&v_t);
    let f_t = soft_contact::friction_force_closed(&sys.params, f_z, &v_t, &n_v);
    Vector3::new(f_t.x, f_t.y, f_z)
}
