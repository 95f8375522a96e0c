//! Tracking scenarios: surface paths, desired force, and the per-window optimal
//! control problems built from them.

use std::path::Path;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::coupled::{AugmentedState, ContactSystem, DEFAULT_DT};
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::plant::PlantConfig;
use crate::rigid_body::ManipulatorModel;
use crate::soft_contact::{self, ContactParams};
use crate::trajopt::ik::{ik_point, IkOptions};
use crate::trajopt::{AdmmConfig, Limits, ProblemSpec, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Circle,
    /// Figure eight (lemniscate of Gerono) through the center.
    Eight,
    /// Back-and-forth straight stroke along world x.
    Line,
}

impl std::str::FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(PathKind::Circle),
            "eight" => Ok(PathKind::Eight),
            "line" => Ok(PathKind::Line),
            _ => Err(Error::invalid("path.kind", format!("unknown path '{s}'"))),
        }
    }
}

/// Planar path on the surface, traversed with a smooth speed ramp from rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpec {
    pub kind: PathKind,
    /// Path center in world x, y (m).
    pub center: [f64; 2],
    /// Circle radius, lemniscate half-width or stroke half-length (m).
    pub size: f64,
    /// Nominal tool speed (m/s); for the lemniscate the speed at the crossing scaled by 1/sqrt 2.
    pub speed: f64,
    /// Duration of the speed ramp from rest (s).
    #[serde(default = "default_ramp")]
    pub ramp: f64,
}

fn default_ramp() -> f64 {
    1.0
}

/// Position, velocity, acceleration and radius of curvature at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    pub acceleration: Vector2<f64>,
    /// Infinite on straight segments.
    pub radius: f64,
}

impl PathSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0) {
            return Err(Error::invalid("path.size", "must be positive"));
        }
        if !(self.speed >= 0.0) {
            return Err(Error::invalid("path.speed", "must be non-negative"));
        }
        if !(self.ramp >= 0.0) {
            return Err(Error::invalid("path.ramp", "must be non-negative"));
        }
        Ok(())
    }

    /// Phase `theta(t)` and its first two derivatives.
    fn phase(&self, t: f64) -> (f64, f64, f64) {
        let w = self.speed / self.size;
        let t = t.max(0.0);
        if self.ramp > 0.0 && t < self.ramp {
            (w * t * t / (2.0 * self.ramp), w * t / self.ramp, w / self.ramp)
        } else {
            (w * (t - 0.5 * self.ramp), w, 0.0)
        }
    }

    /// Curve point and its first two derivatives with respect to the phase.
    fn curve(&self, th: f64) -> [Vector2<f64>; 3] {
        let l = self.size;
        let (s, c) = th.sin_cos();
        match self.kind {
            PathKind::Circle => [
                Vector2::new(c, s) * l,
                Vector2::new(-s, c) * l,
                Vector2::new(-c, -s) * l,
            ],
            PathKind::Eight => {
                let (s2, c2) = (2.0 * th).sin_cos();
                [
                    Vector2::new(s, 0.5 * s2) * l,
                    Vector2::new(c, c2) * l,
                    Vector2::new(-s, -2.0 * s2) * l,
                ]
            }
            PathKind::Line => [
                Vector2::new(s, 0.0) * l,
                Vector2::new(c, 0.0) * l,
                Vector2::new(-s, 0.0) * l,
            ],
        }
    }

    pub fn sample(&self, t: f64) -> PathSample {
        let (th, thd, thdd) = self.phase(t);
        let [p, dp, ddp] = self.curve(th);
        let cross = dp.x * ddp.y - dp.y * ddp.x;
        let radius = if cross.abs() < 1e-12 * dp.norm().powi(3).max(1e-300) {
            f64::INFINITY
        } else {
            dp.norm().powi(3) / cross.abs()
        };
        PathSample {
            position: Vector2::new(self.center[0], self.center[1]) + p,
            velocity: dp * thd,
            acceleration: ddp * thd * thd + dp * thdd,
            radius,
        }
    }
}

fn default_home() -> Vec<f64> {
    vec![0.0, 0.6, 0.0, -1.5, 0.0, 1.0, 0.0]
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

fn default_horizon() -> usize {
    50
}

fn default_true() -> bool {
    true
}

/// Full scenario file: path, surface, task weights, solver, MPC and plant settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub path: PathSpec,
    /// Undisturbed surface height (world z, m).
    pub surface_height: f64,
    /// Desired normal force (N).
    pub desired_force: f64,
    /// Simulated duration of closed-loop runs (s).
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Planning horizon (steps).
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Joint configuration from which the initial IK starts.
    #[serde(default = "default_home")]
    pub home: Vec<f64>,
    /// Joint position limits overriding the robot's, one `[lower, upper]` per joint.
    #[serde(default)]
    pub joint_limits: Option<Vec<[f64; 2]>>,
    /// Start time of the benchmark planning window (s).
    #[serde(default)]
    pub nominal_start: f64,
    /// Include the sliding constraint in the feasible set.
    #[serde(default = "default_true")]
    pub sliding_constraint: bool,
    /// Contact parameters assumed by the planner.
    #[serde(default)]
    pub contact: ContactParams,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default)]
    pub solver: AdmmConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub plant: PlantConfig,
}

impl Scenario {
    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.path.validate()?;
        self.contact.validate()?;
        self.solver.validate()?;
        self.mpc.validate()?;
        self.plant.validate(self.dt)?;
        if !(self.desired_force > self.contact.f_floor) {
            return Err(Error::invalid("desired_force", "must exceed the contact floor"));
        }
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(Error::invalid("dt/horizon", "must be positive"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::invalid("duration", "must be positive"));
        }
        Ok(())
    }

    /// Shipped scenarios by name: `circle`, `eight`, `line`, and the solver benchmark `nominal`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "circle" => include_str!("../../../configs/circle.toml"),
            "eight" => include_str!("../../../configs/eight.toml"),
            "line" => include_str!("../../../configs/line.toml"),
            "nominal" => include_str!("../../../configs/nominal.toml"),
            _ => return Err(Error::invalid("scenario", format!("unknown scenario '{name}'"))),
        };
        Self::from_toml_str(text, name)
    }

    pub fn model(&self) -> Result<ManipulatorModel> {
        let mut model = ManipulatorModel::arm_7dof();
        if let Some(limits) = &self.joint_limits {
            if limits.len() != model.n_joints() {
                return Err(Error::Dimension {
                    what: "joint_limits",
                    expected: model.n_joints(),
                    got: limits.len(),
                });
            }
            for (j, l) in model.joints.iter_mut().zip(limits) {
                j.q_lower = l[0];
                j.q_upper = l[1];
            }
            model.validate()?;
        }
        Ok(model)
    }

    /// Planner-side coupled system.
    pub fn system(&self) -> Result<ContactSystem> {
        Ok(ContactSystem::new(self.model()?, self.contact.clone()))
    }

    /// Commanded tool depth below the surface that yields the desired force.
    pub fn tool_depth(&self) -> f64 {
        soft_contact::hertz_deformation(&self.contact, self.desired_force).unwrap_or(0.0)
    }

    /// Desired contact-point position, normal force and path radius at time `t`.
    pub fn desired(&self, t: f64) -> (Vector3<f64>, f64, PathSample) {
        let s = self.path.sample(t);
        let z = self.surface_height - self.tool_depth();
        (
            Vector3::new(s.position.x, s.position.y, z),
            self.desired_force,
            s,
        )
    }

    /// Robot at rest on the path start, pressing with the desired force.
    pub fn initial_state(&self, sys: &ContactSystem) -> Result<AugmentedState> {
        let home = DVector::from_vec(self.home.clone());
        sys.model.check_dim("home", &home)?;
        let (target, f, _) = self.desired(0.0);
        let p = ik_point(&sys.model, &target, &home, &home, 1e6, 1e-6, &IkOptions { max_iters: 200, ..IkOptions::default() })?;
        if p.error > 1e-6 {
            return Err(Error::invalid("path", format!("start point unreachable (error {:.3e} m)", p.error)));
        }
        Ok(AugmentedState::new(p.q, DVector::zeros(sys.n_joints()), Vector3::new(0.0, 0.0, f)))
    }

    /// Optimal control problem over `[t0, t0 + horizon dt]` from `x0`.
    pub fn problem_window(&self, sys: &ContactSystem, t0: f64, x0: AugmentedState, horizon: usize) -> ProblemSpec {
        let mut pose_targets = Vec::with_capacity(horizon + 1);
        let mut force_targets = Vec::with_capacity(horizon + 1);
        let mut path_radius = Vec::with_capacity(horizon + 1);
        for i in 0..=horizon {
            let (p, f, s) = self.desired(t0 + i as f64 * self.dt);
            pose_targets.push(p);
            force_targets.push(f);
            path_radius.push(s.radius);
        }
        ProblemSpec {
            dt: self.dt,
            x0,
            pose_targets,
            force_targets,
            path_radius,
            weights: self.weights.clone(),
            limits: Limits::from_model(&sys.model),
            sliding_constraint: self.sliding_constraint,
            posture: DVector::from_column_slice(&self.home),
        }
    }

    /// State on the desired path at time `t`: IK position, least-squares joint
    /// velocity for the path velocity, and the nominal contact force.
    pub fn state_on_path(&self, sys: &ContactSystem, t: f64) -> Result<AugmentedState> {
        let x0 = self.initial_state(sys)?;
        if t <= 0.0 {
            return Ok(x0);
        }
        // Follow the path from the start so the IK branch stays continuous.
        let steps = (t / self.dt).ceil() as usize;
        let mut q = x0.q;
        let opts = IkOptions::default();
        for k in 1..=steps {
            let tk = (k as f64 * self.dt).min(t);
            let p = ik_point(&sys.model, &self.desired(tk).0, &q, &q, 1e6, 1e-3, &opts)?;
            q = p.q;
        }
        let (_, f, s) = self.desired(t);
        let jac = crate::rigid_body::position_jacobian(&sys.model, &q)?;
        let v = Vector3::new(s.velocity.x, s.velocity.y, 0.0);
        let jjt = &jac * jac.transpose();
        let qdot = jjt
            .try_inverse()
            .map(|inv| jac.transpose() * inv * DVector::from_column_slice(v.as_slice()))
            .ok_or(Error::SingularConfiguration { sigma_min: 0.0, threshold: crate::rigid_body::SINGULAR_THRESHOLD })?;
        let f_e = crate::trajopt::problem::nominal_contact_force(sys, f, &v);
        Ok(AugmentedState::new(q, qdot, f_e))
    }

    /// The benchmark planning window starting at `nominal_start` on the path.
    pub fn nominal_problem(&self, sys: &ContactSystem) -> Result<ProblemSpec> {
        let x0 = self.state_on_path(sys, self.nominal_start)?;
        Ok(self.problem_window(sys, self.nominal_start, x0, self.horizon))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(kind: PathKind) -> PathSpec {
        PathSpec {
            kind,
            center: [0.5, 0.1],
            size: 0.05,
            speed: 0.05,
            ramp: 1.0,
        }
    }

    #[test]
    fn velocity_and_acceleration_match_finite_differences() {
        for kind in [PathKind::Circle, PathKind::Eight, PathKind::Line] {
            let p = path(kind);
            for t in [0.3, 0.999, 1.7, 4.2] {
                let h = 1e-6;
                let s = p.sample(t);
                let fd_v = (p.sample(t + h).position - p.sample(t - h).position) / (2.0 * h);
                let fd_a = (p.sample(t + h).velocity - p.sample(t - h).velocity) / (2.0 * h);
                assert!((fd_v - s.velocity).norm() < 1e-7, "{kind:?} v at {t}");
                assert!((fd_a - s.acceleration).norm() < 1e-5, "{kind:?} a at {t}");
            }
        }
    }

    #[test]
    fn circle_radius_and_speed() {
        let p = path(PathKind::Circle);
        let s = p.sample(3.0);
        assert!((s.radius - 0.05).abs() < 1e-12);
        assert!((s.velocity.norm() - 0.05).abs() < 1e-12);
        assert!(p.sample(0.0).velocity.norm() == 0.0);
        assert!(path(PathKind::Line).sample(2.0).radius.is_infinite());
    }

    #[test]
    fn shipped_scenarios_parse() {
        for name in ["circle", "eight", "line"] {
            let s = Scenario::builtin(name).unwrap();
            let sys = s.system().unwrap();
            let x0 = s.initial_state(&sys).unwrap();
            let tool = crate::rigid_body::forward_kinematics(&sys.model, &x0.q).unwrap();
            assert!((tool.translation.vector - s.desired(0.0).0).norm() < 1e-6);
        }
        assert!(Scenario::builtin("square").is_err());
    }

    #[test]
    fn unknown_field_is_rejected() {
        let mut text = Scenario::builtin("line").unwrap().to_toml_string();
        text.push_str("\nbogus = 1\n");
        assert!(matches!(Scenario::from_toml_str(&text, "x"), Err(Error::Parse { .. })));
    }
}
