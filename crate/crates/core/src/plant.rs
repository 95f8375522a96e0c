//! Ground-truth plant: rigid-body dynamics with a Hertzian contact against a
//! (possibly pulsating) surface, integrated by fixed-step RK4 at a fine step.

use nalgebra::{DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coupled::ContactSystem;
use crate::error::{Error, Result};
use crate::rigid_body::DynamicsTerms;
use crate::soft_contact::{self, ContactParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// True contact parameters; the planner's when absent.
    pub contact: Option<ContactParams>,
    /// Multiplier on the true friction coefficient (model mismatch).
    pub mu_scale: f64,
    /// Surface pulsation amplitude (m).
    pub pulsation_amplitude: f64,
    /// Surface pulsation frequency (Hz).
    pub pulsation_frequency: f64,
    /// Force-sensor noise standard deviation per axis (N).
    pub noise_std: f64,
    /// Integration substeps per control step.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            contact: None,
            mu_scale: 1.0,
            pulsation_amplitude: 0.005,
            pulsation_frequency: 1.0,
            noise_std: 0.05,
            substeps: 20,
            seed: 7,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self, _dt: f64) -> Result<()> {
        if self.substeps < 10 {
            return Err(Error::invalid("plant.substeps", "inner step must be at most dt/10"));
        }
        if !(self.pulsation_amplitude >= 0.0) || !(self.pulsation_frequency >= 0.0) {
            return Err(Error::invalid("plant.pulsation", "must be non-negative"));
        }
        if !(self.noise_std >= 0.0) || !(self.mu_scale > 0.0) {
            return Err(Error::invalid("plant", "noise_std >= 0 and mu_scale > 0 required"));
        }
        if let Some(c) = &self.contact {
            c.validate()?;
        }
        Ok(())
    }

    /// Same settings without disturbance, noise or mismatch.
    pub fn ideal(&self) -> Self {
        Self {
            mu_scale: 1.0,
            pulsation_amplitude: 0.0,
            noise_std: 0.0,
            ..self.clone()
        }
    }
}

/// Joint state of the plant (the contact force is algebraic in the penetration).
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

/// Contact wrench and geometry at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactReading {
    /// Contact-frame force the tool exerts on the surface.
    pub force: Vector3<f64>,
    pub tool: Vector3<f64>,
    pub tool_velocity: Vector3<f64>,
    /// Penetration depth along the surface normal (negative when separated).
    pub penetration: f64,
}

pub struct Plant {
    sys: ContactSystem,
    /// Undisturbed surface height along the normal (m).
    surface_offset: f64,
    config: PlantConfig,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    pub state: PlantState,
}

impl Plant {
    /// `planner` supplies robot and surface geometry; contact parameters come from
    /// `config` (or the planner's, scaled by `mu_scale`).
    pub fn new(planner: &ContactSystem, surface_offset: f64, config: &PlantConfig, q0: DVector<f64>, qdot0: DVector<f64>) -> Result<Self> {
        config.validate(0.0)?;
        let mut params = config.contact.clone().unwrap_or_else(|| planner.params.clone());
        params.mu *= config.mu_scale;
        let mut sys = planner.clone();
        sys.params = params;
        sys.model.check_dim("q0", &q0)?;
        sys.model.check_dim("qdot0", &qdot0)?;
        let noise = (config.noise_std > 0.0).then(|| Normal::new(0.0, config.noise_std).expect("std checked"));
        Ok(Self {
            sys,
            surface_offset,
            config: config.clone(),
            noise,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            state: PlantState { t: 0.0, q: q0, qdot: qdot0 },
        })
    }

    pub fn params(&self) -> &ContactParams {
        &self.sys.params
    }

    /// Surface height along the normal and its rate at time `t`.
    pub fn surface(&self, t: f64) -> (f64, f64) {
        let w = 2.0 * std::f64::consts::PI * self.config.pulsation_frequency;
        let a = self.config.pulsation_amplitude;
        (self.surface_offset + a * (w * t).sin(), a * w * (w * t).cos())
    }

    /// Contact force from the penetration of the tool into the surface at time `t`.
    pub fn contact(&self, terms: &DynamicsTerms, qdot: &DVector<f64>, t: f64) -> ContactReading {
        let tool = terms.tool.translation.vector;
        let v = &terms.jacobian * qdot;
        let v = Vector3::new(v[0], v[1], v[2]);
        let (height, _) = self.surface(t);
        let n = self.sys.frame.normal();
        let penetration = height - n.dot(&tool);
        let force = if penetration > 0.0 {
            let p = &self.sys.params;
            let f_z = soft_contact::hertz_force(p, penetration);
            let v_c = self.sys.frame.to_contact(&v);
            let v_t = Vector2::new(v_c.x, v_c.y);
            let n_v = soft_contact::moving_direction(&v_t);
            let f_t = soft_contact::friction_force_closed(p, f_z, &v_t, &n_v);
            Vector3::new(f_t.x, f_t.y, f_z)
        } else {
            Vector3::zeros()
        };
        ContactReading {
            force,
            tool,
            tool_velocity: v,
            penetration,
        }
    }

    /// Contact reading at the current state.
    pub fn reading(&self) -> Result<ContactReading> {
        let terms = DynamicsTerms::evaluate(&self.sys.model, &self.state.q, &self.state.qdot)?;
        Ok(self.contact(&terms, &self.state.qdot, self.state.t))
    }

    fn derivative(&self, q: &DVector<f64>, qdot: &DVector<f64>, tau: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let terms = DynamicsTerms::evaluate(&self.sys.model, q, qdot)?;
        let c = self.contact(&terms, qdot, t);
        let qddot = terms.accelerations(tau, &self.sys.frame.world_force(&c.force))?;
        Ok(qddot)
    }

    /// Advances by `duration` with constant torque `tau` in `substeps` RK4 steps and
    /// returns the noisy contact-force measurement at the end.
    pub fn advance(&mut self, tau: &DVector<f64>, duration: f64, substeps: usize) -> Result<Vector3<f64>> {
        self.sys.model.check_dim("tau", tau)?;
        let h = duration / substeps.max(1) as f64;
        for _ in 0..substeps.max(1) {
            let s = &self.state;
            let (q, v, t) = (&s.q, &s.qdot, s.t);
            let a1 = self.derivative(q, v, tau, t)?;
            let q2 = q + v * (0.5 * h);
            let v2 = v + &a1 * (0.5 * h);
            let a2 = self.derivative(&q2, &v2, tau, t + 0.5 * h)?;
            let q3 = q + &v2 * (0.5 * h);
            let v3 = v + &a2 * (0.5 * h);
            let a3 = self.derivative(&q3, &v3, tau, t + 0.5 * h)?;
            let q4 = q + &v3 * h;
            let v4 = v + &a3 * h;
            let a4 = self.derivative(&q4, &v4, tau, t + h)?;
            let q_next = q + (v + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
            let v_next = v + (&a1 + &a2 * 2.0 + &a3 * 2.0 + &a4) * (h / 6.0);
            if q_next.iter().chain(v_next.iter()).any(|x| !x.is_finite()) {
                return Err(Error::invalid("plant", "state diverged"));
            }
            self.state = PlantState {
                t: t + h,
                q: q_next,
                qdot: v_next,
            };
        }
        let truth = self.reading()?.force;
        Ok(truth + self.noise_sample())
    }

    pub fn noise_sample(&mut self) -> Vector3<f64> {
        match &self.noise {
            Some(d) => Vector3::new(d.sample(&mut self.rng), d.sample(&mut self.rng), d.sample(&mut self.rng)),
            None => Vector3::zeros(),
        }
    }

    /// One control period `dt` at the configured substep count.
    pub fn step(&mut self, tau: &DVector<f64>, dt: f64) -> Result<Vector3<f64>> {
        self.advance(tau, dt, self.config.substeps)
    }
}
