//! Forward kinematics over the joint tree, with forward-mode tangents.

use nalgebra::{Matrix3, Vector3};

use super::rotation::{axis_angle_jacobian, axis_angle_to_matrix};
use super::{BodyModel, PoseParams};

/// `x -> rotation * x + translation`. The rotation part of a blended
/// transform is a general 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `sum_k w_k T_k`, componentwise.
    pub fn blend(weights: &[f64], transforms: &[RigidTransform]) -> RigidTransform {
        let mut out = RigidTransform {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        };
        for (w, t) in weights.iter().zip(transforms) {
            if *w == 0.0 {
                continue;
            }
            out.rotation += t.rotation * *w;
            out.translation += t.translation * *w;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Derivatives of every joint transform along `6K` directions: the `3K`
/// axis-angle components followed by the `3K` rest-joint coordinates.
#[derive(Debug, Clone)]
pub struct FkJacobian {
    num_joints: usize,
    /// Indexed `[direction * K + joint]`.
    d_rotation: Vec<Matrix3<f64>>,
    d_translation: Vec<Vector3<f64>>,
}

impl FkJacobian {
    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    /// Derivative of transform `joint` along `direction`.
    pub fn derivative(&self, direction: usize, joint: usize) -> (&Matrix3<f64>, &Vector3<f64>) {
        let i = direction * self.num_joints + joint;
        (&self.d_rotation[i], &self.d_translation[i])
    }

    fn contract(&self, direction: usize, d_rot: &[Matrix3<f64>], d_trans: &[Vector3<f64>]) -> f64 {
        let k = self.num_joints;
        (0..k)
            .map(|j| {
                let i = direction * k + j;
                self.d_rotation[i].dot(&d_rot[j]) + self.d_translation[i].dot(&d_trans[j])
            })
            .sum()
    }

    /// Pull `dL/dG_k`, `dL/db_k` back to the flat axis-angle vector (`3K`).
    pub fn pullback_theta(&self, d_rot: &[Matrix3<f64>], d_trans: &[Vector3<f64>]) -> Vec<f64> {
        (0..3 * self.num_joints)
            .map(|d| self.contract(d, d_rot, d_trans))
            .collect()
    }

    /// Pull `dL/dG_k`, `dL/db_k` back to the rest joint locations.
    pub fn pullback_joints(
        &self,
        d_rot: &[Matrix3<f64>],
        d_trans: &[Vector3<f64>],
    ) -> Vec<Vector3<f64>> {
        let k = self.num_joints;
        (0..k)
            .map(|j| {
                Vector3::new(
                    self.contract(3 * k + 3 * j, d_rot, d_trans),
                    self.contract(3 * k + 3 * j + 1, d_rot, d_trans),
                    self.contract(3 * k + 3 * j + 2, d_rot, d_trans),
                )
            })
            .collect()
    }

    /// Given `dL/dP_k` for the posed joint locations `P_k = G_k J_k + b_k`,
    /// return `(dL/dtheta, dL/dJ)`.
    pub fn pullback_posed_joints(
        &self,
        joints: &[Vector3<f64>],
        transforms: &[RigidTransform],
        d_posed: &[Vector3<f64>],
    ) -> (Vec<f64>, Vec<Vector3<f64>>) {
        let d_rot: Vec<Matrix3<f64>> = d_posed
            .iter()
            .zip(joints)
            .map(|(g, j)| g * j.transpose())
            .collect();
        let theta = self.pullback_theta(&d_rot, d_posed);
        let mut d_joints = self.pullback_joints(&d_rot, d_posed);
        for ((dj, t), g) in d_joints.iter_mut().zip(transforms).zip(d_posed) {
            *dj += t.rotation.transpose() * g;
        }
        (theta, d_joints)
    }
}

struct World {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn world_transforms(model: &BodyModel, joints: &[Vector3<f64>], locals: &[Matrix3<f64>]) -> Vec<World> {
    let k = model.num_joints();
    let mut world: Vec<World> = (0..k)
        .map(|_| World {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        })
        .collect();
    for &j in &model.order {
        world[j] = match model.parents[j] {
            None => World {
                rotation: locals[j],
                translation: joints[j],
            },
            Some(p) => World {
                rotation: world[p].rotation * locals[j],
                translation: world[p].rotation * (joints[j] - joints[p]) + world[p].translation,
            },
        };
    }
    world
}

fn rest_relative(world: &[World], joints: &[Vector3<f64>], offset: &Vector3<f64>) -> Vec<RigidTransform> {
    world
        .iter()
        .zip(joints)
        .map(|(w, j)| RigidTransform {
            rotation: w.rotation,
            translation: w.translation - w.rotation * j + offset,
        })
        .collect()
}

pub(crate) fn forward(model: &BodyModel, joints: &[Vector3<f64>], pose: &PoseParams) -> Vec<RigidTransform> {
    let locals: Vec<Matrix3<f64>> = pose.joint_rotations.iter().map(axis_angle_to_matrix).collect();
    let world = world_transforms(model, joints, &locals);
    rest_relative(&world, joints, &pose.global_translation)
}

pub(crate) fn forward_with_jacobian(
    model: &BodyModel,
    joints: &[Vector3<f64>],
    pose: &PoseParams,
) -> (Vec<RigidTransform>, FkJacobian) {
    let k = model.num_joints();
    let mut locals = Vec::with_capacity(k);
    let mut local_derivs = Vec::with_capacity(k);
    for w in &pose.joint_rotations {
        let (r, dr) = axis_angle_jacobian(w);
        locals.push(r);
        local_derivs.push(dr);
    }
    let world = world_transforms(model, joints, &locals);
    let transforms = rest_relative(&world, joints, &pose.global_translation);

    let dirs = 6 * k;
    let mut d_rotation = vec![Matrix3::zeros(); dirs * k];
    let mut d_translation = vec![Vector3::zeros(); dirs * k];
    let mut dw_rot = vec![Matrix3::zeros(); k];
    let mut dw_trans = vec![Vector3::zeros(); k];
    for dir in 0..dirs {
        let (rot_joint, joint_dir) = if dir < 3 * k {
            (Some((dir / 3, dir % 3)), None)
        } else {
            (None, Some(((dir - 3 * k) / 3, (dir - 3 * k) % 3)))
        };
        let d_joint = |j: usize| -> Vector3<f64> {
            match joint_dir {
                Some((jj, c)) if jj == j => Vector3::ith(c, 1.0),
                _ => Vector3::zeros(),
            }
        };
        for &j in &model.order {
            let d_local = match rot_joint {
                Some((jj, c)) if jj == j => local_derivs[j][c],
                _ => Matrix3::zeros(),
            };
            let (r, t) = match model.parents[j] {
                None => (d_local, d_joint(j)),
                Some(p) => (
                    dw_rot[p] * locals[j] + world[p].rotation * d_local,
                    dw_rot[p] * (joints[j] - joints[p])
                        + world[p].rotation * (d_joint(j) - d_joint(p))
                        + dw_trans[p],
                ),
            };
            dw_rot[j] = r;
            dw_trans[j] = t;
            d_rotation[dir * k + j] = r;
            d_translation[dir * k + j] = t - r * joints[j] - world[j].rotation * d_joint(j);
        }
    }
    (
        transforms,
        FkJacobian {
            num_joints: k,
            d_rotation,
            d_translation,
        },
    )
}
