//! Plain-text robot description (TOML).
//!
//! ```toml
//! name = "planar2"
//! gravity = [0.0, 0.0, 0.0]
//! tool_offset = { xyz = [1.0, 0.0, 0.0] }
//!
//! [[joints]]
//! kind = "revolute"
//! axis = [0.0, 0.0, 1.0]
//! origin = { xyz = [0.0, 0.0, 0.0], rpy = [0.0, 0.0, 0.0] }
//! q_limits = [-3.0, 3.0]
//! torque_limits = [-50.0, 50.0]
//!
//! [[links]]
//! mass = 1.0
//! com = [0.5, 0.0, 0.0]
//! inertia = [0.01, 0.01, 0.01, 0.0, 0.0, 0.0]  # ixx iyy izz ixy ixz iyz about the com
//! ```

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{Joint, JointKind, LinkInertia, ManipulatorModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginDesc {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginDesc {
    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (r, p, y) = iso.rotation.euler_angles();
        let t = iso.translation.vector;
        Self {
            xyz: [t.x, t.y, t.z],
            rpy: [r, p, y],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKindDesc {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDesc {
    #[serde(default)]
    pub name: Option<String>,
    pub kind: JointKindDesc,
    pub axis: [f64; 3],
    #[serde(default)]
    pub origin: OriginDesc,
    pub q_limits: [f64; 2],
    pub torque_limits: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDesc {
    pub mass: f64,
    pub com: [f64; 3],
    /// `[ixx, iyy, izz, ixy, ixz, iyz]` about the center of mass, link frame.
    pub inertia: [f64; 6],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotDesc {
    pub name: String,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub tool_offset: OriginDesc,
    pub joints: Vec<JointDesc>,
    pub links: Vec<LinkDesc>,
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

impl RobotDesc {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string(),
        })
    }

    pub fn into_model(self) -> Result<ManipulatorModel> {
        if self.joints.is_empty() {
            return Err(Error::invalid("joints", "at least one joint is required"));
        }
        if self.joints.len() != self.links.len() {
            return Err(Error::invalid(
                "links",
                format!(
                    "{} links for {} joints (one link per joint)",
                    self.links.len(),
                    self.joints.len()
                ),
            ));
        }
        let mut joints = Vec::with_capacity(self.joints.len());
        for (i, j) in self.joints.iter().enumerate() {
            let axis = Vector3::from(j.axis);
            let norm = axis.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    format!("joints[{i}].axis"),
                    format!("must be a unit vector (norm {norm})"),
                ));
            }
            joints.push(Joint {
                name: j.name.clone().unwrap_or_else(|| format!("joint{i}")),
                kind: match j.kind {
                    JointKindDesc::Revolute => JointKind::Revolute,
                    JointKindDesc::Prismatic => JointKind::Prismatic,
                },
                origin: j.origin.to_isometry(),
                axis: Unit::new_unchecked(axis),
                q_lower: j.q_limits[0],
                q_upper: j.q_limits[1],
                u_lower: j.torque_limits[0],
                u_upper: j.torque_limits[1],
            });
        }
        let links = self
            .links
            .iter()
            .map(|l| {
                let [ixx, iyy, izz, ixy, ixz, iyz] = l.inertia;
                LinkInertia {
                    mass: l.mass,
                    com: Vector3::from(l.com),
                    inertia: Matrix3::new(ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz),
                }
            })
            .collect();
        let model = ManipulatorModel {
            name: self.name,
            joints,
            links,
            tool_offset: self.tool_offset.to_isometry(),
            gravity: Vector3::from(self.gravity),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_model(model: &ManipulatorModel) -> Self {
        Self {
            name: model.name.clone(),
            gravity: model.gravity.into(),
            tool_offset: OriginDesc::from_isometry(&model.tool_offset),
            joints: model
                .joints
                .iter()
                .map(|j| JointDesc {
                    name: Some(j.name.clone()),
                    kind: match j.kind {
                        JointKind::Revolute => JointKindDesc::Revolute,
                        JointKind::Prismatic => JointKindDesc::Prismatic,
                    },
                    axis: j.axis.into_inner().into(),
                    origin: OriginDesc::from_isometry(&j.origin),
                    q_limits: [j.q_lower, j.q_upper],
                    torque_limits: [j.u_lower, j.u_upper],
                })
                .collect(),
            links: model
                .links
                .iter()
                .map(|l| LinkDesc {
                    mass: l.mass,
                    com: l.com.into(),
                    inertia: [
                        l.inertia[(0, 0)],
                        l.inertia[(1, 1)],
                        l.inertia[(2, 2)],
                        l.inertia[(0, 1)],
                        l.inertia[(0, 2)],
                        l.inertia[(1, 2)],
                    ],
                })
                .collect(),
        }
    }
}
