//! Serial-chain manipulator kinematics and dynamics.
//!
//! Frames are composed as `T_i = T_{i-1} * origin_i * motion_i(q_i)`, with link `i`
//! rigidly attached to `T_i`. All vectors returned here are in the world frame.
//! Dynamics use a world-frame recursive Newton-Euler pass for bias forces and a
//! composite Jacobian sum for the mass matrix.

mod description;

pub use description::{JointDesc, JointKindDesc, LinkDesc, OriginDesc, RobotDesc};

use std::path::Path;

use nalgebra::{
    Cholesky, DMatrix, DVector, Isometry3, Matrix3, Point3, SymmetricEigen, Translation3, Unit,
    UnitQuaternion, Vector3,
};

use crate::error::{Error, Result};

/// Smallest admissible singular value of the contact-point Jacobian.
pub const SINGULAR_THRESHOLD: f64 = 1e-6;
/// Damping of the mass-weighted pseudo-inverse used for redundant arms.
pub const PINV_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Fixed transform from the parent frame to the joint frame at `q = 0`.
    pub origin: Isometry3<f64>,
    /// Joint axis in the joint frame.
    pub axis: Unit<Vector3<f64>>,
    pub q_lower: f64,
    pub q_upper: f64,
    pub u_lower: f64,
    pub u_upper: f64,
}

#[derive(Debug, Clone)]
pub struct LinkInertia {
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, link frame.
    pub inertia: Matrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct ManipulatorModel {
    pub name: String,
    pub joints: Vec<Joint>,
    pub links: Vec<LinkInertia>,
    /// Transform from the last link frame to the contact point.
    pub tool_offset: Isometry3<f64>,
    pub gravity: Vector3<f64>,
}

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: DVector::zeros(n),
        }
    }
}

const PLANAR_2DOF: &str = include_str!("../../assets/planar2.toml");
const ARM_7DOF: &str = include_str!("../../assets/arm7.toml");

impl ManipulatorModel {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        RobotDesc::parse(text, source_name)?.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&RobotDesc::from_model(self)).expect("robot description serializes")
    }

    /// Two-link planar arm in the x-y plane, unit link lengths, no gravity.
    pub fn planar_2dof() -> Self {
        Self::from_toml_str(PLANAR_2DOF, "planar2.toml").expect("shipped planar arm is valid")
    }

    /// Representative 7-DOF arm (iiwa-like geometry and limits).
    pub fn arm_7dof() -> Self {
        Self::from_toml_str(ARM_7DOF, "arm7.toml").expect("shipped 7-DOF arm is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.len() != self.links.len() {
            return Err(Error::invalid("links", "one link per joint required"));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.q_lower < j.q_upper) {
                return Err(Error::invalid(
                    format!("joints[{i}].q_limits"),
                    "lower bound must be below upper bound",
                ));
            }
            if !(j.u_lower < j.u_upper) {
                return Err(Error::invalid(
                    format!("joints[{i}].torque_limits"),
                    "lower bound must be below upper bound",
                ));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("joints[{i}].axis"), "not a unit vector"));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.mass > 0.0) {
                return Err(Error::invalid(format!("links[{i}].mass"), "must be positive"));
            }
            let sym = (l.inertia - l.inertia.transpose()).abs().max();
            if sym > 1e-12 {
                return Err(Error::invalid(format!("links[{i}].inertia"), "not symmetric"));
            }
            let eig = SymmetricEigen::new(l.inertia).eigenvalues;
            if eig.min() <= 0.0 {
                return Err(Error::invalid(
                    format!("links[{i}].inertia"),
                    "not positive definite",
                ));
            }
        }
        Ok(())
    }

    pub fn q_lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints(), self.joints.iter().map(|j| j.q_lower))
    }

    pub fn q_upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints(), self.joints.iter().map(|j| j.q_upper))
    }

    pub fn u_lower(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints(), self.joints.iter().map(|j| j.u_lower))
    }

    pub fn u_upper(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints(), self.joints.iter().map(|j| j.u_upper))
    }

    pub(crate) fn check_dim(&self, what: &'static str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n_joints() {
            return Err(Error::Dimension {
                what,
                expected: self.n_joints(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// World-frame placement of every joint and link for one configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    pub link_poses: Vec<Isometry3<f64>>,
    /// Point on each joint axis (origin of the moving frame).
    pub joint_points: Vec<Vector3<f64>>,
    pub joint_axes: Vec<Vector3<f64>>,
    pub coms: Vec<Vector3<f64>>,
    pub tool: Isometry3<f64>,
}

impl ChainFrames {
    pub fn compute(model: &ManipulatorModel, q: &DVector<f64>) -> Result<Self> {
        model.check_dim("q", q)?;
        let n = model.n_joints();
        let mut link_poses = Vec::with_capacity(n);
        let mut joint_points = Vec::with_capacity(n);
        let mut joint_axes = Vec::with_capacity(n);
        let mut coms = Vec::with_capacity(n);
        let mut t = Isometry3::identity();
        for (i, joint) in model.joints.iter().enumerate() {
            let pre = t * joint.origin;
            let motion = match joint.kind {
                JointKind::Revolute => Isometry3::from_parts(
                    Translation3::identity(),
                    UnitQuaternion::from_axis_angle(&joint.axis, q[i]),
                ),
                JointKind::Prismatic => Isometry3::from_parts(
                    Translation3::from(joint.axis.into_inner() * q[i]),
                    UnitQuaternion::identity(),
                ),
            };
            t = pre * motion;
            joint_axes.push(pre.rotation * joint.axis.into_inner());
            joint_points.push(t.translation.vector);
            coms.push((t * Point3::from(model.links[i].com)).coords);
            link_poses.push(t);
        }
        let tool = t * model.tool_offset;
        Ok(Self {
            link_poses,
            joint_points,
            joint_axes,
            coms,
            tool,
        })
    }

    /// Linear-velocity Jacobian column `j` for a point attached after joint `j`.
    fn point_column(&self, model: &ManipulatorModel, j: usize, point: &Vector3<f64>) -> Vector3<f64> {
        match model.joints[j].kind {
            JointKind::Revolute => self.joint_axes[j].cross(&(point - self.joint_points[j])),
            JointKind::Prismatic => self.joint_axes[j],
        }
    }

    fn angular_column(&self, model: &ManipulatorModel, j: usize) -> Vector3<f64> {
        match model.joints[j].kind {
            JointKind::Revolute => self.joint_axes[j],
            JointKind::Prismatic => Vector3::zeros(),
        }
    }

    /// 3 x n Jacobian of the contact point position.
    pub fn position_jacobian(&self, model: &ManipulatorModel) -> DMatrix<f64> {
        let n = model.n_joints();
        let p = self.tool.translation.vector;
        let mut jac = DMatrix::zeros(3, n);
        for j in 0..n {
            jac.fixed_view_mut::<3, 1>(0, j)
                .copy_from(&self.point_column(model, j, &p));
        }
        jac
    }

    /// 6 x n geometric Jacobian (linear rows first) of the contact point.
    pub fn geometric_jacobian(&self, model: &ManipulatorModel) -> DMatrix<f64> {
        let n = model.n_joints();
        let p = self.tool.translation.vector;
        let mut jac = DMatrix::zeros(6, n);
        for j in 0..n {
            jac.fixed_view_mut::<3, 1>(0, j)
                .copy_from(&self.point_column(model, j, &p));
            jac.fixed_view_mut::<3, 1>(3, j)
                .copy_from(&self.angular_column(model, j));
        }
        jac
    }

    pub fn mass_matrix(&self, model: &ManipulatorModel) -> DMatrix<f64> {
        let n = model.n_joints();
        let mut m = DMatrix::zeros(n, n);
        let mut jv = vec![Vector3::zeros(); n];
        let mut jw = vec![Vector3::zeros(); n];
        for (i, link) in model.links.iter().enumerate() {
            let rot = self.link_poses[i].rotation.to_rotation_matrix();
            let inertia_w = rot.matrix() * link.inertia * rot.matrix().transpose();
            for j in 0..=i {
                jv[j] = self.point_column(model, j, &self.coms[i]);
                jw[j] = self.angular_column(model, j);
            }
            for j in 0..=i {
                let iw_j = inertia_w * jw[j];
                for k in 0..=j {
                    let v = link.mass * jv[j].dot(&jv[k]) + jw[k].dot(&iw_j);
                    m[(j, k)] += v;
                }
            }
        }
        for j in 0..n {
            for k in 0..j {
                m[(k, j)] = m[(j, k)];
            }
        }
        m
    }

    /// Recursive Newton-Euler pass. Returns joint torques and the world-frame
    /// acceleration of the contact point (including the `-g` base offset when
    /// gravity is on).
    pub fn newton_euler(
        &self,
        model: &ManipulatorModel,
        qdot: &DVector<f64>,
        qddot: Option<&DVector<f64>>,
        gravity: bool,
    ) -> (DVector<f64>, Vector3<f64>) {
        let n = model.n_joints();
        let mut omega = vec![Vector3::zeros(); n];
        let mut alpha = vec![Vector3::zeros(); n];
        let mut acc = vec![Vector3::zeros(); n];
        let mut w_prev = Vector3::zeros();
        let mut a_prev = if gravity { -model.gravity } else { Vector3::zeros() };
        let mut al_prev = Vector3::zeros();
        let mut p_prev = Vector3::zeros();
        for i in 0..n {
            let z = self.joint_axes[i];
            let p = self.joint_points[i];
            let r = p - p_prev;
            let a_at_p = a_prev + al_prev.cross(&r) + w_prev.cross(&w_prev.cross(&r));
            let qd = qdot[i];
            let qdd = qddot.map_or(0.0, |v| v[i]);
            match model.joints[i].kind {
                JointKind::Revolute => {
                    omega[i] = w_prev + z * qd;
                    alpha[i] = al_prev + z * qdd + w_prev.cross(&(z * qd));
                    acc[i] = a_at_p;
                }
                JointKind::Prismatic => {
                    omega[i] = w_prev;
                    alpha[i] = al_prev;
                    acc[i] = a_at_p + z * qdd + 2.0 * w_prev.cross(&(z * qd));
                }
            }
            w_prev = omega[i];
            al_prev = alpha[i];
            a_prev = acc[i];
            p_prev = p;
        }
        let rt = self.tool.translation.vector - p_prev;
        let tool_acc = a_prev + al_prev.cross(&rt) + w_prev.cross(&w_prev.cross(&rt));

        let mut tau = DVector::zeros(n);
        let mut f_next = Vector3::zeros();
        let mut n_next = Vector3::zeros();
        let mut p_next = Vector3::zeros();
        for i in (0..n).rev() {
            let link = &model.links[i];
            let p = self.joint_points[i];
            let rc = self.coms[i] - p;
            let a_c = acc[i] + alpha[i].cross(&rc) + omega[i].cross(&omega[i].cross(&rc));
            let rot = self.link_poses[i].rotation.to_rotation_matrix();
            let inertia_w = rot.matrix() * link.inertia * rot.matrix().transpose();
            let f_lin = link.mass * a_c;
            let moment = inertia_w * alpha[i] + omega[i].cross(&(inertia_w * omega[i]));
            let f = f_lin + f_next;
            let nm = moment + rc.cross(&f_lin) + n_next + (p_next - p).cross(&f_next);
            tau[i] = match model.joints[i].kind {
                JointKind::Revolute => self.joint_axes[i].dot(&nm),
                JointKind::Prismatic => self.joint_axes[i].dot(&f),
            };
            f_next = f;
            n_next = nm;
            p_next = p;
        }
        (tau, tool_acc)
    }
}

/// Everything the coupled dynamics needs from one configuration.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub tool: Isometry3<f64>,
    /// 3 x n contact-point position Jacobian.
    pub jacobian: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    /// `C(q, qdot) qdot + G(q)`.
    pub bias: DVector<f64>,
    /// `Jdot(q, qdot) qdot` of the contact point.
    pub jdot_qdot: Vector3<f64>,
}

impl DynamicsTerms {
    pub fn evaluate(model: &ManipulatorModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<Self> {
        model.check_dim("qdot", qdot)?;
        let frames = ChainFrames::compute(model, q)?;
        let (bias, tool_acc) = frames.newton_euler(model, qdot, None, true);
        Ok(Self {
            tool: frames.tool,
            jacobian: frames.position_jacobian(model),
            mass: frames.mass_matrix(model),
            bias,
            jdot_qdot: tool_acc + model.gravity,
        })
    }

    /// Joint accelerations for torque `tau` and the world force `ee_force` that the
    /// contact point exerts on the environment (enters as `-J^T F`).
    pub fn accelerations(&self, tau: &DVector<f64>, ee_force: &Vector3<f64>) -> Result<DVector<f64>> {
        let rhs = tau - &self.bias - self.jacobian.tr_mul(ee_force);
        let chol = Cholesky::new(self.mass.clone()).ok_or(Error::MassMatrixNotSpd)?;
        Ok(chol.solve(&rhs))
    }
}

pub fn forward_kinematics(model: &ManipulatorModel, q: &DVector<f64>) -> Result<Isometry3<f64>> {
    Ok(ChainFrames::compute(model, q)?.tool)
}

/// 6 x n geometric Jacobian of the contact point (linear rows first).
pub fn jacobian(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(ChainFrames::compute(model, q)?.geometric_jacobian(model))
}

pub fn position_jacobian(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(ChainFrames::compute(model, q)?.position_jacobian(model))
}

pub fn mass_matrix(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(ChainFrames::compute(model, q)?.mass_matrix(model))
}

/// `C(q, qdot) qdot + G(q)`.
pub fn bias_forces(model: &ManipulatorModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_dim("qdot", qdot)?;
    let frames = ChainFrames::compute(model, q)?;
    Ok(frames.newton_euler(model, qdot, None, true).0)
}

pub fn gravity_torques(model: &ManipulatorModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    bias_forces(model, q, &DVector::zeros(model.n_joints()))
}

pub fn inverse_dynamics(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_dim("qdot", qdot)?;
    model.check_dim("qddot", qddot)?;
    let frames = ChainFrames::compute(model, q)?;
    Ok(frames.newton_euler(model, qdot, Some(qddot), true).0)
}

/// `qddot = M^-1 (tau - C qdot - G - J^T F_e)` with `F_e` the world force the contact
/// point exerts on the environment.
pub fn forward_dynamics(
    model: &ManipulatorModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    tau: &DVector<f64>,
    ee_force: &Vector3<f64>,
) -> Result<DVector<f64>> {
    model.check_dim("tau", tau)?;
    DynamicsTerms::evaluate(model, q, qdot)?.accelerations(tau, ee_force)
}

/// Task-space inertia at the contact point, `J^-T M J^-1`, on the subspace spanned
/// by the position Jacobian. For redundant arms the inverse is the mass-weighted
/// damped pseudo-inverse, which keeps the result equal to `(J M^-1 J^T)^-1`.
#[derive(Debug, Clone)]
pub struct EffectiveMass {
    /// World-frame 3 x 3 matrix (rank `min(3, n)`).
    pub matrix: Matrix3<f64>,
    pub sigma_min: f64,
}

impl EffectiveMass {
    /// Quadratic form `d^T Lambda d` along unit direction `d`.
    pub fn along(&self, d: &Vector3<f64>) -> f64 {
        d.dot(&(self.matrix * d))
    }
}

pub fn effective_mass(model: &ManipulatorModel, q: &DVector<f64>) -> Result<EffectiveMass> {
    let frames = ChainFrames::compute(model, q)?;
    let jac = frames.position_jacobian(model);
    let mass = frames.mass_matrix(model);
    effective_mass_from(&jac, &mass)
}

pub(crate) fn effective_mass_from(jac: &DMatrix<f64>, mass: &DMatrix<f64>) -> Result<EffectiveMass> {
    let n = jac.ncols();
    let r = n.min(3);
    // Task directions: left singular vectors of J via the eigenvectors of J J^T.
    let jjt: Matrix3<f64> = (jac * jac.transpose()).fixed_view::<3, 3>(0, 0).into_owned();
    let eig = SymmetricEigen::new(jjt);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(3, r, |i, k| eig.eigenvectors[(i, order[k])]);
    let sigma_min = eig.eigenvalues[order[r - 1]].max(0.0).sqrt();
    if sigma_min < SINGULAR_THRESHOLD {
        return Err(Error::SingularConfiguration {
            sigma_min,
            threshold: SINGULAR_THRESHOLD,
        });
    }
    let j_task = basis.transpose() * jac;
    let chol = Cholesky::new(mass.clone()).ok_or(Error::MassMatrixNotSpd)?;
    let minv_jt = chol.solve(&j_task.transpose());
    let a = &j_task * &minv_jt;
    let damping = if r < n { PINV_DAMPING * PINV_DAMPING } else { 0.0 };
    let a_damped = &a + DMatrix::<f64>::identity(r, r) * damping;
    let a_inv = a_damped
        .clone()
        .cholesky()
        .ok_or(Error::SingularConfiguration {
            sigma_min,
            threshold: SINGULAR_THRESHOLD,
        })?
        .inverse();
    // J_bar = M^-1 J^T (A + d I)^-1;  Lambda = J_bar^T M J_bar.
    let lambda_task = &a_inv * &a * &a_inv;
    let lambda = &basis * lambda_task * basis.transpose();
    let mut out = Matrix3::zeros();
    out.copy_from(&lambda);
    out = 0.5 * (out + out.transpose());
    Ok(EffectiveMass {
        matrix: out,
        sigma_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_q(model: &ManipulatorModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_iterator(
            model.n_joints(),
            model.joints.iter().map(|j| rng.random_range(j.q_lower..j.q_upper)),
        )
    }

    fn pendulum(mass: f64, length: f64) -> ManipulatorModel {
        let text = format!(
            r#"
name = "pendulum"
gravity = [0.0, 0.0, -9.81]
[[joints]]
kind = "revolute"
axis = [0.0, 1.0, 0.0]
q_limits = [-3.0, 3.0]
torque_limits = [-100.0, 100.0]
[[links]]
mass = {mass}
com = [0.0, 0.0, -{length}]
inertia = [1e-9, 1e-9, 1e-9, 0.0, 0.0, 0.0]
"#
        );
        ManipulatorModel::from_toml_str(&text, "pendulum").unwrap()
    }

    #[test]
    fn zero_q_composes_fixed_offsets() {
        let model = ManipulatorModel::planar_2dof();
        let pose = forward_kinematics(&model, &DVector::zeros(2)).unwrap();
        let expected = model.joints[0].origin * model.joints[1].origin * model.tool_offset;
        assert_relative_eq!(pose.to_homogeneous(), expected.to_homogeneous(), epsilon = 1e-12);
    }

    #[test]
    fn revolute_periodicity() {
        let model = ManipulatorModel::arm_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_q(&model, &mut rng);
        for k in 0..7 {
            let mut q2 = q.clone();
            q2[k] += 2.0 * std::f64::consts::PI;
            let a = forward_kinematics(&model, &q).unwrap().to_homogeneous();
            let b = forward_kinematics(&model, &q2).unwrap().to_homogeneous();
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn planar_closed_form() {
        let model = ManipulatorModel::planar_2dof();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q = random_q(&model, &mut rng);
            let p = forward_kinematics(&model, &q).unwrap().translation.vector;
            let (l1, l2) = (1.0, 1.0);
            assert_relative_eq!(p.x, l1 * q[0].cos() + l2 * (q[0] + q[1]).cos(), epsilon = 1e-12);
            assert_relative_eq!(p.y, l1 * q[0].sin() + l2 * (q[0] + q[1]).sin(), epsilon = 1e-12);
            let jac = jacobian(&model, &q).unwrap();
            let s1 = q[0].sin();
            let s12 = (q[0] + q[1]).sin();
            let c1 = q[0].cos();
            let c12 = (q[0] + q[1]).cos();
            let analytic = DMatrix::from_row_slice(2, 2, &[-s1 - s12, -s12, c1 + c12, c12]);
            assert_relative_eq!(jac.view((0, 0), (2, 2)).into_owned(), analytic, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = ManipulatorModel::arm_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_q(&model, &mut rng);
            let jac = position_jacobian(&model, &q).unwrap();
            for j in 0..7 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let fd = (forward_kinematics(&model, &qp).unwrap().translation.vector
                    - forward_kinematics(&model, &qm).unwrap().translation.vector)
                    / (2.0 * h);
                for r in 0..3 {
                    assert!((fd[r] - jac[(r, j)]).abs() <= 1e-5);
                }
            }
            let rot = forward_kinematics(&model, &q).unwrap().rotation.to_rotation_matrix();
            let err = (rot.matrix().transpose() * rot.matrix() - Matrix3::identity()).abs().max();
            assert!(err <= 1e-10);
            assert!((rot.matrix().determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_qdot_zero_twist() {
        let model = ManipulatorModel::arm_7dof();
        let jac = jacobian(&model, &DVector::from_element(7, 0.3)).unwrap();
        assert_eq!(jac.nrows(), 6);
        assert!((jac * DVector::zeros(7)).norm() == 0.0);
    }

    #[test]
    fn mass_matrix_spd_and_symmetric() {
        let model = ManipulatorModel::arm_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = random_q(&model, &mut rng);
            let m = mass_matrix(&model, &q).unwrap();
            assert!((&m - m.transpose()).abs().max() <= 1e-10);
            assert!(SymmetricEigen::new(m).eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn pendulum_mass_and_gravity() {
        let (m, l) = (2.0, 0.7);
        let model = pendulum(m, l);
        for theta in [0.0, 0.3, -1.1, 2.0] {
            let q = DVector::from_element(1, theta);
            let mm = mass_matrix(&model, &q).unwrap();
            assert_relative_eq!(mm[(0, 0)], m * l * l, epsilon = 1e-8);
            let g = gravity_torques(&model, &q).unwrap();
            // Rotation about +y tilts the hanging mass towards -x; gravity restores.
            assert_relative_eq!(g[0], m * 9.81 * l * theta.sin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn gravity_free_bias_is_zero_at_rest() {
        let model = ManipulatorModel::planar_2dof();
        let b = bias_forces(&model, &DVector::from_vec(vec![0.4, -0.9]), &DVector::zeros(2)).unwrap();
        assert!(b.norm() == 0.0);
    }

    #[test]
    fn bias_matches_lagrangian_planar() {
        // Two-link planar arm with point-ish masses; closed-form Coriolis terms.
        let model = ManipulatorModel::planar_2dof();
        let q = DVector::from_vec(vec![0.3, 0.8]);
        let qd = DVector::from_vec(vec![1.2, -0.7]);
        let b = bias_forces(&model, &q, &qd).unwrap();
        // Finite-difference Lagrangian: C qdot = Mdot qdot - 0.5 d/dq (qdot^T M qdot).
        let h = 1e-6;
        let mdot = {
            let mp = mass_matrix(&model, &(&q + &qd * h)).unwrap();
            let mm = mass_matrix(&model, &(&q - &qd * h)).unwrap();
            (mp - mm) / (2.0 * h)
        };
        let mut dk = DVector::zeros(2);
        for i in 0..2 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let kp = qd.dot(&(mass_matrix(&model, &qp).unwrap() * &qd));
            let km = qd.dot(&(mass_matrix(&model, &qm).unwrap() * &qd));
            dk[i] = 0.5 * (kp - km) / (2.0 * h);
        }
        let expected = mdot * &qd - dk;
        assert_relative_eq!(b, expected, epsilon = 1e-6);
    }

    #[test]
    fn forward_dynamics_residual() {
        let model = ManipulatorModel::arm_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let q = random_q(&model, &mut rng);
            let qd = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let tau = DVector::from_fn(7, |_, _| rng.random_range(-20.0..20.0));
            let f = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-10.0..0.0),
            );
            let terms = DynamicsTerms::evaluate(&model, &q, &qd).unwrap();
            let qdd = terms.accelerations(&tau, &f).unwrap();
            let resid = &terms.mass * &qdd + &terms.bias + terms.jacobian.tr_mul(&f) - &tau;
            assert!(resid.amax() <= 1e-10, "residual {}", resid.amax());
            // Inverse dynamics agrees with M qdd + b.
            let id = inverse_dynamics(&model, &q, &qd, &qdd).unwrap();
            assert_relative_eq!(id, &terms.mass * &qdd + &terms.bias, epsilon = 1e-9);
        }
    }

    #[test]
    fn cancelling_torque_gives_zero_acceleration() {
        let model = ManipulatorModel::arm_7dof();
        let q = DVector::from_vec(vec![0.1, 0.5, -0.2, -1.2, 0.3, 0.8, 0.0]);
        let qd = DVector::from_element(7, 0.2);
        let f = Vector3::new(0.5, -0.2, -4.0);
        let terms = DynamicsTerms::evaluate(&model, &q, &qd).unwrap();
        let tau = &terms.bias + terms.jacobian.tr_mul(&f);
        let qdd = forward_dynamics(&model, &q, &qd, &tau, &f).unwrap();
        assert!(qdd.amax() < 1e-10);
    }

    #[test]
    fn jdot_qdot_matches_finite_difference() {
        let model = ManipulatorModel::arm_7dof();
        let q = DVector::from_vec(vec![0.1, 0.5, -0.2, -1.2, 0.3, 0.8, 0.0]);
        let qd = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6]);
        let terms = DynamicsTerms::evaluate(&model, &q, &qd).unwrap();
        let h = 1e-6;
        let jp = position_jacobian(&model, &(&q + &qd * h)).unwrap();
        let jm = position_jacobian(&model, &(&q - &qd * h)).unwrap();
        let fd = (jp - jm) / (2.0 * h) * &qd;
        for r in 0..3 {
            assert!((fd[r] - terms.jdot_qdot[r]).abs() < 1e-6);
        }
    }

    #[test]
    fn energy_balance_under_applied_torque() {
        let model = ManipulatorModel::arm_7dof();
        let mut q = DVector::from_vec(vec![0.2, 0.4, -0.3, -1.0, 0.5, 0.6, 0.1]);
        let mut qd = DVector::from_element(7, 0.1);
        let energy = |q: &DVector<f64>, qd: &DVector<f64>| {
            let frames = ChainFrames::compute(&model, q).unwrap();
            let kinetic = 0.5 * qd.dot(&(frames.mass_matrix(&model) * qd));
            let potential: f64 = model
                .links
                .iter()
                .zip(&frames.coms)
                .map(|(l, c)| -l.mass * model.gravity.dot(c))
                .sum();
            kinetic + potential
        };
        let tau_of = |t: f64| DVector::from_fn(7, |i, _| 2.0 * ((i as f64) + t).sin());
        let deriv = |q: &DVector<f64>, qd: &DVector<f64>, t: f64| {
            let qdd = forward_dynamics(&model, q, qd, &tau_of(t), &Vector3::zeros()).unwrap();
            (qd.clone(), qdd)
        };
        let e0 = energy(&q, &qd);
        let dt = 1e-3;
        let mut work = 0.0;
        let mut t = 0.0;
        for _ in 0..1000 {
            // RK4 on the state and the injected power.
            let p = |_q: &DVector<f64>, qd: &DVector<f64>, t: f64| qd.dot(&tau_of(t));
            let (k1q, k1v) = deriv(&q, &qd, t);
            let w1 = p(&q, &qd, t);
            let (q2, v2) = (&q + &k1q * (dt / 2.0), &qd + &k1v * (dt / 2.0));
            let (k2q, k2v) = deriv(&q2, &v2, t + dt / 2.0);
            let w2 = p(&q2, &v2, t + dt / 2.0);
            let (q3, v3) = (&q + &k2q * (dt / 2.0), &qd + &k2v * (dt / 2.0));
            let (k3q, k3v) = deriv(&q3, &v3, t + dt / 2.0);
            let w3 = p(&q3, &v3, t + dt / 2.0);
            let (q4, v4) = (&q + &k3q * dt, &qd + &k3v * dt);
            let (k4q, k4v) = deriv(&q4, &v4, t + dt);
            let w4 = p(&q4, &v4, t + dt);
            q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
            qd += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
            work += (w1 + 2.0 * w2 + 2.0 * w3 + w4) * dt / 6.0;
            t += dt;
        }
        let e1 = energy(&q, &qd);
        let drift = ((e1 - e0) - work).abs() / e0.abs().max(work.abs()).max(1.0);
        assert!(drift <= 1e-3, "energy drift {drift}");
    }

    #[test]
    fn prismatic_effective_mass() {
        let text = r#"
name = "slider"
gravity = [0.0, 0.0, 0.0]
[[joints]]
kind = "prismatic"
axis = [1.0, 0.0, 0.0]
q_limits = [-1.0, 1.0]
torque_limits = [-10.0, 10.0]
[[links]]
mass = 3.5
com = [0.0, 0.0, 0.0]
inertia = [0.1, 0.1, 0.1, 0.0, 0.0, 0.0]
"#;
        let model = ManipulatorModel::from_toml_str(text, "slider").unwrap();
        let em = effective_mass(&model, &DVector::from_element(1, 0.2)).unwrap();
        assert_relative_eq!(em.along(&Vector3::x()), 3.5, epsilon = 1e-12);
    }

    #[test]
    fn effective_mass_square_case_is_inverse_form() {
        // Spatial 3-DOF sub-chain: use the first three joints of a 3-DOF arm.
        let model = ManipulatorModel::from_toml_str(
            r#"
name = "arm3"
[[joints]]
kind = "revolute"
axis = [0.0, 0.0, 1.0]
q_limits = [-3.0, 3.0]
torque_limits = [-50.0, 50.0]
[[joints]]
kind = "revolute"
axis = [0.0, 1.0, 0.0]
origin = { xyz = [0.0, 0.0, 0.3] }
q_limits = [-3.0, 3.0]
torque_limits = [-50.0, 50.0]
[[joints]]
kind = "revolute"
axis = [0.0, 1.0, 0.0]
origin = { xyz = [0.0, 0.0, 0.4] }
q_limits = [-3.0, 3.0]
torque_limits = [-50.0, 50.0]
[[links]]
mass = 2.0
com = [0.0, 0.0, 0.15]
inertia = [0.02, 0.02, 0.01, 0.0, 0.0, 0.0]
[[links]]
mass = 1.5
com = [0.0, 0.0, 0.2]
inertia = [0.02, 0.02, 0.01, 0.0, 0.0, 0.0]
[[links]]
mass = 1.0
com = [0.0, 0.0, 0.15]
inertia = [0.01, 0.01, 0.005, 0.0, 0.0, 0.0]
"#,
            "arm3",
        )
        .unwrap();
        let mut model = model;
        model.tool_offset = Isometry3::translation(0.0, 0.0, 0.3);
        let q = DVector::from_vec(vec![0.3, 0.4, 0.9]);
        let em = effective_mass(&model, &q).unwrap();
        let jac = position_jacobian(&model, &q).unwrap();
        let m = mass_matrix(&model, &q).unwrap();
        let jinv = jac.clone().try_inverse().unwrap();
        let direct = jinv.transpose() * m * jinv;
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(em.matrix[(i, j)], direct[(i, j)], epsilon = 1e-8, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn redundant_effective_mass_matches_operational_space_inertia() {
        let model = ManipulatorModel::arm_7dof();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = random_q(&model, &mut rng);
            let Ok(em) = effective_mass(&model, &q) else { continue };
            let jac = position_jacobian(&model, &q).unwrap();
            let m = mass_matrix(&model, &q).unwrap();
            let minv = m.try_inverse().unwrap();
            let lambda = (&jac * minv * jac.transpose()).try_inverse().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let scale = lambda.amax().max(1.0);
                    assert!(
                        (em.matrix[(i, j)] - lambda[(i, j)]).abs() <= 1e-8 * scale,
                        "{} vs {}",
                        em.matrix[(i, j)],
                        lambda[(i, j)]
                    );
                }
            }
            assert!((em.matrix - em.matrix.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn singular_configuration_detected() {
        let model = ManipulatorModel::planar_2dof();
        // Fully stretched planar arm: rank-deficient in the plane.
        let err = effective_mass(&model, &DVector::zeros(2)).unwrap_err();
        assert!(matches!(err, Error::SingularConfiguration { .. }));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let model = ManipulatorModel::planar_2dof();
        let err = forward_kinematics(&model, &DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 3, .. }));
    }

    #[test]
    fn parse_error_reports_field() {
        let bad = "name = \"x\"\n[[joints]]\nkind = \"revolute\"\naxis = [0.0, 0.0, 2.0]\nq_limits = [-1.0, 1.0]\ntorque_limits = [-1.0, 1.0]\n[[links]]\nmass = 1.0\ncom = [0.0,0.0,0.0]\ninertia = [1.0,1.0,1.0,0.0,0.0,0.0]\n";
        let err = ManipulatorModel::from_toml_str(bad, "bad.toml").unwrap_err();
        assert!(err.to_string().contains("joints[0].axis"), "{err}");
        let syntax = "name = \"x\"\n[[joints]]\nkind = revolute\n";
        let err = ManipulatorModel::from_toml_str(syntax, "bad.toml").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn description_round_trip() {
        let model = ManipulatorModel::arm_7dof();
        let text = model.to_toml_string();
        let back = ManipulatorModel::from_toml_str(&text, "rt").unwrap();
        let q = DVector::from_element(7, 0.25);
        assert_relative_eq!(
            forward_kinematics(&model, &q).unwrap().to_homogeneous(),
            forward_kinematics(&back, &q).unwrap().to_homogeneous(),
            epsilon = 1e-12
        );
    }
}
