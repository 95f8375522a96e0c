//! Manipulator dynamics coupled with the soft-contact force state.
//!
//! The augmented state is `x = [q, qdot, F_e]` (dimension `2n + 3`) and the control is
//! the joint torque. One step is an explicit Euler update of
//! `qddot = M^-1 (tau - b - J_c^T F_e)` and of the contact-force rate, where the
//! normal-force rate is closed through the normal tool velocity,
//! `Fdot_z = -(6 E^2 R F_z)^(1/3) zdot`.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::rigid_body::{DynamicsTerms, ManipulatorModel};
use crate::soft_contact::{self, ContactParams, ContactState, SurfaceFrame};

/// Default planner step (s).
pub const DEFAULT_DT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    /// Contact-frame force the tool exerts on the surface.
    pub f_e: Vector3<f64>,
}

impl AugmentedState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>, f_e: Vector3<f64>) -> Self {
        Self { q, qdot, f_e }
    }

    pub fn dim(&self) -> usize {
        2 * self.q.len() + 3
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.q.len();
        let mut x = DVector::zeros(2 * n + 3);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.qdot);
        x.fixed_rows_mut::<3>(2 * n).copy_from(&self.f_e);
        x
    }

    pub fn from_vector(x: &DVector<f64>, n: usize) -> Result<Self> {
        if x.len() != 2 * n + 3 {
            return Err(Error::Dimension {
                what: "augmented state",
                expected: 2 * n + 3,
                got: x.len(),
            });
        }
        Ok(Self {
            q: x.rows(0, n).into_owned(),
            qdot: x.rows(n, n).into_owned(),
            f_e: x.fixed_rows::<3>(2 * n).into_owned(),
        })
    }
}

/// Robot, contact model and surface bundled as one dynamical system.
#[derive(Debug, Clone)]
pub struct ContactSystem {
    pub model: ManipulatorModel,
    pub params: ContactParams,
    pub frame: SurfaceFrame,
    /// Time constant of the force decay once the contact is broken (s).
    pub tau_release: f64,
    /// Relaxation time of the tangential force toward the closed-form friction (s).
    pub tau_friction: f64,
}

/// Time derivative of the augmented state plus the quantities used to build it.
#[derive(Debug, Clone)]
pub struct Rates {
    pub qddot: DVector<f64>,
    /// `None` when the contact is broken (force decays instead).
    pub fdot: Option<Vector3<f64>>,
    pub terms: DynamicsTerms,
}

impl ContactSystem {
    pub fn new(model: ManipulatorModel, params: ContactParams) -> Self {
        Self {
            model,
            params,
            frame: SurfaceFrame::default(),
            tau_release: 0.01,
            tau_friction: 0.05,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.model.n_joints()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_joints() + 3
    }

    pub fn in_contact(&self, f_e: &Vector3<f64>) -> bool {
        f_e.z >= self.params.f_floor
    }

    /// Tool velocity and acceleration in the contact frame.
    fn tool_motion(
        &self,
        terms: &DynamicsTerms,
        qdot: &DVector<f64>,
        qddot: &DVector<f64>,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let v = &terms.jacobian * qdot;
        let a = &terms.jacobian * qddot;
        let v = Vector3::new(v[0], v[1], v[2]);
        let a = Vector3::new(a[0], a[1], a[2]) + terms.jdot_qdot;
        (self.frame.to_contact(&v), self.frame.to_contact(&a))
    }

    /// Contact-force rate for an established contact given the tool motion.
    pub fn force_rate(
        &self,
        f_e: &Vector3<f64>,
        v_c: &Vector3<f64>,
        a_c: &Vector3<f64>,
    ) -> Result<Vector3<f64>> {
        let p = &self.params;
        let fdot_z = soft_contact::normal_force_rate(p, f_e.z, v_c.z);
        let state = ContactState::from_force(p, f_e)?;
        let v_t = Vector2::new(v_c.x, v_c.y);
        let a_t = Vector2::new(a_c.x, a_c.y);
        let mut rate = soft_contact::contact_force_rate(p, &state, &v_t, &a_t, fdot_z)?;
        let n_v = soft_contact::moving_direction(&v_t);
        let target = soft_contact::friction_force_closed(p, f_e.z, &v_t, &n_v);
        rate.x += (target.x - f_e.x) / self.tau_friction;
        rate.y += (target.y - f_e.y) / self.tau_friction;
        Ok(rate)
    }

    pub fn rates(&self, x: &AugmentedState, tau: &DVector<f64>) -> Result<Rates> {
        let terms = DynamicsTerms::evaluate(&self.model, &x.q, &x.qdot)?;
        let world_force = self.frame.world_force(&x.f_e);
        let qddot = terms.accelerations(tau, &world_force)?;
        let fdot = if self.in_contact(&x.f_e) {
            let (v_c, a_c) = self.tool_motion(&terms, &x.qdot, &qddot);
            Some(self.force_rate(&x.f_e, &v_c, &a_c)?)
        } else {
            None
        };
        Ok(Rates { qddot, fdot, terms })
    }

    /// One explicit Euler step. Off contact the force decays as `F exp(-dt / tau_release)`.
    pub fn step(&self, x: &AugmentedState, tau: &DVector<f64>, dt: f64) -> Result<AugmentedState> {
        if tau.len() != self.n_joints() {
            return Err(Error::Dimension {
                what: "tau",
                expected: self.n_joints(),
                got: tau.len(),
            });
        }
        if dt == 0.0 {
            return Ok(x.clone());
        }
        let r = self.rates(x, tau)?;
        let f_e = match r.fdot {
            Some(fdot) => x.f_e + fdot * dt,
            None => x.f_e * (-dt / self.tau_release).exp(),
        };
        Ok(AugmentedState {
            q: &x.q + &x.qdot * dt,
            qdot: &x.qdot + &r.qddot * dt,
            f_e,
        })
    }

    pub fn step_vec(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
        let s = AugmentedState::from_vector(x, self.n_joints())?;
        Ok(self.step(&s, u, dt)?.to_vector())
    }

    /// Discrete Jacobians `(A, B)` of [`step`](Self::step). Fails when the state sits
    /// on the contact-mode switch.
    pub fn linearize(
        &self,
        x: &AugmentedState,
        tau: &DVector<f64>,
        dt: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if (x.f_e.z - self.params.f_floor).abs() < 1e-5 {
            return Err(Error::ModeBoundary { force: x.f_e.z });
        }
        self.linearize_unchecked(x, tau, dt)
    }

    /// Jacobians without the mode-boundary check (used inside the optimizer).
    ///
    /// Torque and force columns are analytic (both enter linearly through `qddot`);
    /// position and velocity columns use central differences of the continuous rates.
    pub fn linearize_unchecked(
        &self,
        x: &AugmentedState,
        tau: &DVector<f64>,
        dt: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.n_joints();
        let nx = 2 * n + 3;
        let mut a = DMatrix::identity(nx, nx);
        let mut b = DMatrix::zeros(nx, n);
        let base = self.rates(x, tau)?;
        let contact = base.fdot.is_some();

        // q block: q+ = q + dt qdot.
        for i in 0..n {
            a[(i, n + i)] = dt;
        }

        // Position and velocity columns by central differences of (qddot, Fdot).
        let h = 1e-6;
        for col in 0..2 * n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            if col < n {
                xp.q[col] += h;
                xm.q[col] -= h;
            } else {
                xp.qdot[col - n] += h;
                xm.qdot[col - n] -= h;
            }
            let rp = self.rates(&xp, tau)?;
            let rm = self.rates(&xm, tau)?;
            for r in 0..n {
                a[(n + r, col)] += dt * (rp.qddot[r] - rm.qddot[r]) / (2.0 * h);
            }
            if contact {
                let fp = rp.fdot.unwrap_or_else(Vector3::zeros);
                let fm = rm.fdot.unwrap_or_else(Vector3::zeros);
                for r in 0..3 {
                    a[(2 * n + r, col)] += dt * (fp[r] - fm[r]) / (2.0 * h);
                }
            }
        }

        // qddot = M^-1 (tau - b) - M^-1 J^T R_c S F, S = diag(1, 1, -1).
        let chol = base
            .terms
            .mass
            .clone()
            .cholesky()
            .ok_or(Error::MassMatrixNotSpd)?;
        let minv = chol.inverse();
        let rot = self.frame.rotation.matrix();
        let mut force_map = DMatrix::zeros(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                let s = if c == 2 { -1.0 } else { 1.0 };
                force_map[(r, c)] = rot[(r, c)] * s;
            }
        }
        let dqdd_df = -(&minv * base.terms.jacobian.transpose() * &force_map);
        for r in 0..n {
            for c in 0..n {
                b[(n + r, c)] = dt * minv[(r, c)];
            }
            for c in 0..3 {
                a[(n + r, 2 * n + c)] += dt * dqdd_df[(r, c)];
            }
        }

        if contact {
            // Tangential force rate depends on qddot through k_d * vdot_t.
            let rot_t = rot.transpose();
            let mut acc_map = DMatrix::zeros(2, n);
            let ja = &base.terms.jacobian;
            for r in 0..2 {
                for c in 0..n {
                    acc_map[(r, c)] = self.params.k_d
                        * (rot_t[(r, 0)] * ja[(0, c)] + rot_t[(r, 1)] * ja[(1, c)] + rot_t[(r, 2)] * ja[(2, c)]);
                }
            }
            let df_du = &acc_map * &minv;
            let df_dqdd_f = &acc_map * &dqdd_df;
            for r in 0..2 {
                for c in 0..n {
                    b[(2 * n + r, c)] = dt * df_du[(r, c)];
                }
                for c in 0..3 {
                    a[(2 * n + r, 2 * n + c)] += dt * df_dqdd_f[(r, c)];
                }
            }
            // Direct dependence on F_e with the tool motion held fixed.
            let (v_c, a_c) = self.tool_motion(&base.terms, &x.qdot, &base.qddot);
            for c in 0..3 {
                let mut fp = x.f_e;
                let mut fm = x.f_e;
                let hf = 1e-6 * x.f_e[c].abs().max(1.0);
                fp[c] += hf;
                fm[c] -= hf;
                let rp = self.force_rate(&fp, &v_c, &a_c)?;
                let rm = self.force_rate(&fm, &v_c, &a_c)?;
                for r in 0..3 {
                    a[(2 * n + r, 2 * n + c)] += dt * (rp[r] - rm[r]) / (2.0 * hf);
                }
            }
        } else {
            let decay = (-dt / self.tau_release).exp();
            for r in 0..3 {
                a[(2 * n + r, 2 * n + r)] = decay;
            }
        }
        Ok((a, b))
    }
}
