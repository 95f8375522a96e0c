//! Projection onto joint/torque boxes and the sliding-contact set.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::coupled::ContactSystem;
use crate::error::Result;
use crate::rigid_body::{effective_mass_from, ChainFrames};
use crate::soft_contact;

use super::problem::Limits;

/// Tool speed against its sliding limit at one configuration.
#[derive(Debug, Clone)]
pub struct SpeedLimit {
    /// Position Jacobian at `q` (3 x n).
    pub jacobian: DMatrix<f64>,
    /// Tool velocity `J qdot` (world).
    pub velocity: DVector<f64>,
    pub speed: f64,
    /// `v* = sqrt(kappa mu F_z / m_eff)` along the current path normal.
    pub v_star: f64,
}

/// Sliding speed limit at `(q, qdot, F_z)`; `None` when the tool is not sliding in
/// the surface plane (no path normal), in which case the constraint is inactive.
pub fn speed_limit(
    sys: &ContactSystem,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    f_z: f64,
    kappa: f64,
) -> Result<Option<SpeedLimit>> {
    let frames = ChainFrames::compute(&sys.model, q)?;
    let jacobian = frames.position_jacobian(&sys.model);
    let velocity = &jacobian * qdot;
    let v = Vector3::new(velocity[0], velocity[1], velocity[2]);
    let Some(n_p) = soft_contact::path_normal(&sys.frame, &v) else {
        return Ok(None);
    };
    let mass = frames.mass_matrix(&sys.model);
    let m_eff = effective_mass_from(&jacobian, &mass)?.along(&n_p);
    Ok(Some(SpeedLimit {
        speed: v.norm(),
        v_star: soft_contact::threshold_speed(sys.params.mu, f_z, m_eff, kappa),
        jacobian,
        velocity,
    }))
}

/// Projected copies `(q_bar, u_bar, lambda_bar)` with `lambda = (qdot, F_e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub q: DVector<f64>,
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
}

pub fn clamp(v: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| x.clamp(*l, *h)))
}

/// Projects `lambda = (qdot, F_e)` at configuration `q` onto the contact set:
/// the normal force is kept non-negative and, on curved paths, the tool speed is
/// scaled down to the sliding limit with `m_eff` and `J` frozen at `q`.
pub fn project_lambda(
    sys: &ContactSystem,
    q: &DVector<f64>,
    lambda: &DVector<f64>,
    kappa: Option<f64>,
) -> DVector<f64> {
    let n = sys.n_joints();
    let mut out = lambda.clone();
    out[n + 2] = out[n + 2].max(0.0);
    let Some(kappa) = kappa.filter(|k| k.is_finite()) else {
        return out;
    };
    let qdot = out.rows(0, n).into_owned();
    // A singular configuration has no well-defined effective mass; leave the copy as is.
    if let Ok(Some(lim)) = speed_limit(sys, q, &qdot, out[n + 2], kappa) {
        if lim.speed > lim.v_star {
            let scale = lim.v_star / lim.speed;
            out.rows_mut(0, n).scale_mut(scale);
        }
    }
    out
}

/// Projects one knot. `u` is absent at the terminal knot.
pub fn project(
    sys: &ContactSystem,
    limits: &Limits,
    q: &DVector<f64>,
    u: Option<&DVector<f64>>,
    lambda: &DVector<f64>,
    kappa: Option<f64>,
) -> (DVector<f64>, Option<DVector<f64>>, DVector<f64>) {
    let q_bar = clamp(q, &limits.q_lower, &limits.q_upper);
    let u_bar = u.map(|u| clamp(u, &limits.u_lower, &limits.u_upper));
    let lambda_bar = project_lambda(sys, &q_bar, lambda, kappa);
    (q_bar, u_bar, lambda_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::ManipulatorModel;
    use crate::soft_contact::{sliding_constraint_margin, ContactParams};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system() -> ContactSystem {
        ContactSystem::new(ManipulatorModel::arm_7dof(), ContactParams::default())
    }

    #[test]
    fn in_bounds_input_is_unchanged() {
        let sys = system();
        let limits = Limits::from_model(&sys.model);
        let q = DVector::from_vec(vec![0.1, 0.5, -0.2, -1.2, 0.3, 0.8, 0.0]);
        let u = DVector::from_element(7, 1.0);
        let mut lambda = DVector::zeros(17);
        lambda[9] = 5.0;
        let (qb, ub, lb) = project(&sys, &limits, &q, Some(&u), &lambda, Some(0.1));
        assert_eq!(qb, q);
        assert_eq!(ub.unwrap(), u);
        assert_eq!(lb, lambda);
    }

    #[test]
    fn saturation() {
        let lo = DVector::from_element(1, -3.0);
        let hi = DVector::from_element(1, 3.0);
        assert_eq!(clamp(&DVector::from_element(1, 5.0), &lo, &hi)[0], 3.0);
        assert_eq!(clamp(&DVector::from_element(1, -7.0), &lo, &hi)[0], -3.0);
    }

    #[test]
    fn fast_sliding_is_scaled_to_threshold() {
        let sys = system();
        let q = DVector::from_vec(vec![0.0, 0.6, 0.0, -1.4, 0.0, 0.9, 0.0]);
        let jac = crate::rigid_body::position_jacobian(&sys.model, &q).unwrap();
        // Joint velocity producing a 1 m/s tangential tool velocity.
        let jjt = &jac * jac.transpose();
        let qdot = jac.transpose() * jjt.try_inverse().unwrap() * DVector::from_vec(vec![1.0, 0.3, 0.0]);
        let kappa = 0.05;
        let mut lambda = DVector::zeros(10);
        lambda.rows_mut(0, 7).copy_from(&qdot);
        lambda[9] = 5.0;
        let out = project_lambda(&sys, &q, &lambda, Some(kappa));
        let f = Vector3::new(0.0, 0.0, out[9]);
        let qd = out.rows(0, 7).into_owned();
        let margin =
            sliding_constraint_margin(&sys.model, &sys.params, &sys.frame, &q, &qd, &f, kappa).unwrap();
        assert!(margin.abs() < 1e-9, "margin {margin}");
        let lim = speed_limit(&sys, &q, &qd, 5.0, kappa).unwrap().unwrap();
        assert!((lim.speed - lim.v_star).abs() < 1e-12);
    }

    #[test]
    fn random_inputs_are_idempotent_and_feasible() {
        let sys = system();
        let limits = Limits::from_model(&sys.model);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = DVector::from_fn(7, |_, _| rng.random_range(-3.5..3.5));
            let u = DVector::from_fn(7, |_, _| rng.random_range(-250.0..250.0));
            let mut lambda = DVector::from_fn(10, |_, _| rng.random_range(-3.0..3.0));
            lambda[9] = rng.random_range(-5.0..20.0);
            let kappa = rng.random_range(0.01..1.0);
            let (qb, ub, lb) = project(&sys, &limits, &q, Some(&u), &lambda, Some(kappa));
            let (qb2, ub2, lb2) = project(&sys, &limits, &qb, ub.as_ref(), &lb, Some(kappa));
            assert_eq!(qb, qb2);
            assert_eq!(ub, ub2);
            assert!((&lb - &lb2).amax() < 1e-12);
            let f = Vector3::new(lb[7], lb[8], lb[9]);
            let qd = lb.rows(0, 7).into_owned();
            let margin =
                sliding_constraint_margin(&sys.model, &sys.params, &sys.frame, &qb, &qd, &f, kappa).unwrap();
            assert!(margin >= -1e-9, "margin {margin}");
        }
    }
}
