//! Hertzian visco-static contact between a rigid spherical tool tip and a soft surface.
//!
//! Quantities are expressed in the contact frame, whose third axis is the outward
//! surface normal `N`. The end-effector force `F_e = (F_x, F_y, F_z)` is the force the
//! tool exerts on the surface: `F_z >= 0` presses into the surface and the tangential
//! part is the friction force, which points along the sliding direction.

use std::path::Path;

use nalgebra::{DVector, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::rigid_body::{self, ManipulatorModel};

/// Tangential speed below which the sliding direction is undefined (treated as zero).
pub const SLIDING_SPEED_THRESHOLD: f64 = 1e-4;
/// Absolute tolerance for the friction quadrature.
pub const QUADRATURE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactParams {
    /// Tool-tip Young's modulus (Pa).
    #[serde(rename = "E1")]
    pub e1: f64,
    /// Surface Young's modulus (Pa).
    #[serde(rename = "E2")]
    pub e2: f64,
    pub nu1: f64,
    pub nu2: f64,
    /// Tool-tip sphere radius (m).
    #[serde(rename = "R")]
    pub r: f64,
    pub mu: f64,
    /// Damping along the moving direction (N s/m).
    pub k_d: f64,
    /// Normal force below which the contact counts as broken (N).
    #[serde(rename = "F_floor")]
    pub f_floor: f64,
}

impl Default for ContactParams {
    /// Steel tip (R = 20 mm) on a soft silicone surface, friction terms from an
    /// identification on such a pairing.
    fn default() -> Self {
        Self {
            e1: 2.0e11,
            e2: 6.9e4,
            nu1: 0.3,
            nu2: 0.49,
            r: 0.02,
            mu: 0.4512,
            k_d: 13.1315,
            f_floor: 0.1,
        }
    }
}

impl ContactParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 8] = [
            ("E1", self.e1 > 0.0, "must be positive"),
            ("E2", self.e2 > 0.0, "must be positive"),
            ("nu1", (0.0..0.5).contains(&self.nu1), "must lie in [0, 0.5)"),
            ("nu2", (0.0..0.5).contains(&self.nu2), "must lie in [0, 0.5)"),
            ("R", self.r > 0.0, "must be positive"),
            ("mu", self.mu >= 0.0, "must be non-negative"),
            ("k_d", self.k_d >= 0.0, "must be non-negative"),
            ("F_floor", self.f_floor > 0.0, "must be positive"),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(Error::invalid(field, reason));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("contact parameters serialize")
    }

    /// Lumped modulus `E` with `1/E = (1-nu1^2)/E1 + (1-nu2^2)/E2`.
    pub fn reduced_modulus(&self) -> f64 {
        reduced_modulus(self)
    }
}

pub fn reduced_modulus(p: &ContactParams) -> f64 {
    1.0 / ((1.0 - p.nu1 * p.nu1) / p.e1 + (1.0 - p.nu2 * p.nu2) / p.e2)
}

/// Central indentation `d = (9 F^2 / (16 E^2 R))^(1/3)`.
pub fn hertz_deformation(p: &ContactParams, force: f64) -> Result<f64> {
    if force < 0.0 {
        return Err(Error::NegativeForce(force));
    }
    let e = reduced_modulus(p);
    Ok((9.0 * force * force / (16.0 * e * e * p.r)).cbrt())
}

/// Inverse relation `F = (4/3) E sqrt(R) d^(3/2)`; zero for `d <= 0`.
pub fn hertz_force(p: &ContactParams, d: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    4.0 / 3.0 * reduced_modulus(p) * p.r.sqrt() * d * d.sqrt()
}

/// Contact-patch radius `a = sqrt(R d)`.
pub fn contact_radius(p: &ContactParams, force: f64) -> Result<f64> {
    Ok((p.r * hertz_deformation(p, force)?).sqrt())
}

/// Normal stiffness `dF/dd = (6 E^2 R F)^(1/3)`.
pub fn normal_stiffness(p: &ContactParams, force: f64) -> f64 {
    let e = reduced_modulus(p);
    (6.0 * e * e * p.r * force.max(0.0)).cbrt()
}

/// Geometry of an established contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactState {
    pub d: f64,
    pub a: f64,
    pub f_z: f64,
    pub f_f: Vector2<f64>,
    /// Inclination of the total force from the normal.
    pub theta_f: f64,
}

impl ContactState {
    /// Builds the state from the contact-frame force `(F_x, F_y, F_z)`.
    pub fn from_force(p: &ContactParams, f_e: &Vector3<f64>) -> Result<Self> {
        let f_z = f_e.z;
        let d = hertz_deformation(p, f_z)?;
        let f_f = Vector2::new(f_e.x, f_e.y);
        Ok(Self {
            d,
            a: (p.r * d).sqrt(),
            f_z,
            f_f,
            theta_f: f_f.norm().atan2(f_z),
        })
    }

    pub fn total_force(&self) -> f64 {
        (self.f_z * self.f_z + self.f_f.norm_squared()).sqrt()
    }
}

/// Stress components at radius `r` on the contact surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StressSample {
    pub r: f64,
    pub sigma_z: f64,
    pub sigma_r: f64,
    pub sigma_theta: f64,
    /// Normal stress on the spherical cap, `n^T sigma_c n`.
    pub sigma_n: f64,
    /// Mean pressure `F / (pi a^2)`.
    pub p_m: f64,
    pub a: f64,
    /// Cylindrical-to-Cartesian rotation at azimuth zero.
    pub transform: Rotation3<f64>,
}

/// `1 - (1 - x)^(3/2)` without cancellation for small `x`.
fn one_minus_pow32(x: f64) -> f64 {
    -(1.5 * (-x).ln_1p()).exp_m1()
}

/// Surface stresses of the Hertz pressure distribution (compression negative).
///
/// Radial and hoop stresses follow the classical closed-form solution; the normal
/// stress on the cap combines them through `sigma_c = T^T sigma T` with the cap
/// normal `n = (sin alpha, 0, cos alpha)`, `sin alpha = r / R`.
pub fn stress_at(p: &ContactParams, force: f64, r: f64) -> Result<StressSample> {
    if !(force > 0.0) {
        return Err(Error::NoContact { force });
    }
    if r < 0.0 {
        return Err(Error::invalid("r", "radius must be non-negative"));
    }
    let a = contact_radius(p, force)?;
    let p_m = force / (std::f64::consts::PI * a * a);
    let nu = p.nu2;
    let rho2 = (r / a).powi(2);
    let (sigma_z, sigma_r, sigma_theta) = if rho2 <= 1.0 {
        let root = (1.0 - rho2).sqrt();
        // (a^2/r^2) [1 - (1 - r^2/a^2)^(3/2)], with limit 3/2 at the center.
        let shape = if rho2 < 1e-12 {
            1.5 - 0.375 * rho2
        } else {
            one_minus_pow32(rho2) / rho2
        };
        let k = 0.5 * (1.0 - 2.0 * nu) * shape;
        (
            -1.5 * root * p_m,
            (k - 1.5 * root) * p_m,
            (-k - 3.0 * nu * root) * p_m,
        )
    } else {
        let k = 0.5 * (1.0 - 2.0 * nu) / rho2;
        (0.0, k * p_m, -k * p_m)
    };
    let sin_a = (r / p.r).min(1.0);
    let cos2 = 1.0 - sin_a * sin_a;
    let transform = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.0);
    let sigma_n = sigma_r * sin_a * sin_a + sigma_z * cos2;
    Ok(StressSample {
        r,
        sigma_z,
        sigma_r,
        sigma_theta,
        sigma_n,
        p_m,
        a,
        transform,
    })
}

/// Full stress tensor in Cartesian coordinates at azimuth `phi`, `T^T sigma T`.
pub fn cartesian_stress(sample: &StressSample, phi: f64) -> nalgebra::Matrix3<f64> {
    let cyl = nalgebra::Matrix3::from_diagonal(&Vector3::new(
        sample.sigma_r,
        sample.sigma_theta,
        sample.sigma_z,
    ));
    let t = Rotation3::from_axis_angle(&Vector3::z_axis(), phi);
    t.matrix() * cyl * t.matrix().transpose()
}

/// Unit sliding direction, or zero below the sliding-speed threshold.
pub fn moving_direction(v_t: &Vector2<f64>) -> Vector2<f64> {
    let s = v_t.norm();
    if s < SLIDING_SPEED_THRESHOLD {
        Vector2::zeros()
    } else {
        v_t / s
    }
}

/// Friction magnitude by integrating the cap normal stress over the patch,
/// `2 pi mu |int_0^a sigma_n r dr| + k_d |v_e|`.
pub fn friction_force_numeric(p: &ContactParams, f_z: f64, v_t: &Vector2<f64>) -> Result<f64> {
    if f_z < 0.0 {
        return Err(Error::NegativeForce(f_z));
    }
    let damping = p.k_d * v_t.norm();
    if f_z == 0.0 || p.mu == 0.0 {
        return Ok(damping);
    }
    let a = contact_radius(p, f_z)?;
    let q = quadrature::integrate(
        |r| {
            stress_at(p, f_z, r)
                .map(|s| s.sigma_n * r)
                .unwrap_or(f64::NAN)
        },
        0.0,
        a,
        QUADRATURE_TOL / (2.0 * std::f64::consts::PI * p.mu),
        400,
    )?;
    Ok(-2.0 * std::f64::consts::PI * p.mu * q.value + damping)
}

/// Sliding-friction magnitude factor `mu F_z [1 + (2 nu - 1) 3 a^2 / (10 R^2)]`.
pub fn sliding_friction_magnitude(p: &ContactParams, f_z: f64) -> f64 {
    if f_z <= 0.0 {
        return 0.0;
    }
    let d = hertz_deformation(p, f_z).unwrap_or(0.0);
    p.mu * f_z * (1.0 + (2.0 * p.nu2 - 1.0) * 0.3 * d / p.r)
}

/// Closed-form friction vector `mu F_z [..] n_v + k_d v_e` (tangential components).
pub fn friction_force_closed(
    p: &ContactParams,
    f_z: f64,
    v_t: &Vector2<f64>,
    n_v: &Vector2<f64>,
) -> Vector2<f64> {
    n_v * sliding_friction_magnitude(p, f_z) + v_t * p.k_d
}

/// Normal surface velocity implied by a normal-force rate,
/// `zdot = -(1 / (6 E^2 R F_z))^(1/3) Fdot_z`.
pub fn normal_rate(p: &ContactParams, f_z: f64, fdot_z: f64) -> Result<f64> {
    if f_z < p.f_floor {
        return Err(Error::LowForce {
            force: f_z,
            floor: p.f_floor,
        });
    }
    Ok(-fdot_z / normal_stiffness(p, f_z))
}

/// Inverse of [`normal_rate`]: `Fdot_z = -(6 E^2 R F_z)^(1/3) zdot`.
pub fn normal_force_rate(p: &ContactParams, f_z: f64, zdot: f64) -> f64 {
    -normal_stiffness(p, f_z) * zdot
}

/// Rate of the contact-frame force for an established contact.
///
/// `v_t`, `vdot_t` are the tangential tool velocity and acceleration. The tangential
/// rate is `[mu Fdot_z + 3 mu (2 nu - 1) / (10 R) (Fdot_z d + F_z ddot)] n_v + k_d vdot_t`.
pub fn contact_force_rate(
    p: &ContactParams,
    state: &ContactState,
    v_t: &Vector2<f64>,
    vdot_t: &Vector2<f64>,
    fdot_z: f64,
) -> Result<Vector3<f64>> {
    let zdot = normal_rate(p, state.f_z, fdot_z)?;
    let ddot = -zdot;
    let n_v = moving_direction(v_t);
    let scale = p.mu * fdot_z
        + 3.0 * p.mu * (2.0 * p.nu2 - 1.0) / (10.0 * p.r) * (fdot_z * state.d + state.f_z * ddot);
    let tangential = n_v * scale + vdot_t * p.k_d;
    Ok(Vector3::new(tangential.x, tangential.y, fdot_z))
}

/// Orientation of the contact frame in the world; the third column is `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceFrame {
    pub rotation: Rotation3<f64>,
}

impl Default for SurfaceFrame {
    fn default() -> Self {
        Self {
            rotation: Rotation3::identity(),
        }
    }
}

impl SurfaceFrame {
    pub fn from_normal(normal: &Vector3<f64>) -> Self {
        let n = normal.normalize();
        let rotation =
            Rotation3::rotation_between(&Vector3::z(), &n).unwrap_or_else(|| {
                Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
            });
        Self { rotation }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.rotation * Vector3::z()
    }

    pub fn to_contact(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * world
    }

    /// World force on the surface for a contact-frame `F_e` (normal part pushes along `-N`).
    pub fn world_force(&self, f_e: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * Vector3::new(f_e.x, f_e.y, -f_e.z)
    }
}

/// Threshold tool speed at which friction capacity equals the centripetal demand,
/// `v* = sqrt(kappa mu F_z / m_eff)`.
pub fn threshold_speed(mu: f64, f_z: f64, m_eff: f64, kappa: f64) -> f64 {
    (kappa * mu * f_z.max(0.0) / m_eff).sqrt()
}

/// Unit path-normal direction in the surface plane for tool velocity `v` (world).
pub fn path_normal(frame: &SurfaceFrame, v: &Vector3<f64>) -> Option<Vector3<f64>> {
    let n = frame.normal();
    let v_t = v - n * n.dot(v);
    if v_t.norm() < SLIDING_SPEED_THRESHOLD {
        return None;
    }
    Some(n.cross(&v_t).normalize())
}

/// Sliding constraint `mu N^T F_e N - m_eff |J qdot|^2 / kappa`.
///
/// `kappa` is the radius of curvature of the path (m): the centripetal demand is
/// `m v^2 / kappa`, so `kappa -> inf` is a straight line. `m_eff` is the task-space
/// inertia along the in-plane path normal.
pub fn sliding_constraint_margin(
    model: &ManipulatorModel,
    p: &ContactParams,
    frame: &SurfaceFrame,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    f_e: &Vector3<f64>,
    kappa: f64,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa", "must be positive"));
    }
    let em = rigid_body::effective_mass(model, q)?;
    let jac = rigid_body::position_jacobian(model, q)?;
    let v = &jac * qdot;
    let v = Vector3::new(v[0], v[1], v[2]);
    let capacity = p.mu * f_e.z;
    let Some(n_p) = path_normal(frame, &v) else {
        return Ok(capacity);
    };
    Ok(capacity - em.along(&n_p) * v.norm_squared() / kappa)
}
