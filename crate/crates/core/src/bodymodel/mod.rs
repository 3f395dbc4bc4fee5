//! Parametric articulated body model.
//!
//! A [`BodyModel`] deforms a template mesh with shape, expression and pose
//! blendshapes, regresses joint locations from the deformed mesh, poses the
//! skeleton with forward kinematics and skins the vertices with linear blend
//! skinning. The on-disk format is documented in [`io`].

pub mod io;
pub mod kinematics;
pub mod rotation;
pub mod synthetic;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kinematics::{FkJacobian, RigidTransform};

/// Semantic region a vertex, joint or Gaussian belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Body,
    Hand,
    Face,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Body, Part::Hand, Part::Face];

    pub fn index(self) -> usize {
        match self {
            Part::Body => 0,
            Part::Hand => 1,
            Part::Face => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Body => "body",
            Part::Hand => "hand",
            Part::Face => "face",
        }
    }
}

impl std::str::FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Part::Body),
            "hand" => Ok(Part::Hand),
            "face" => Ok(Part::Face),
            other => Err(Error::Validation(format!("unknown part label `{other}`"))),
        }
    }
}

/// Per-joint axis-angle rotations plus a global translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub joint_rotations: Vec<Vector3<f64>>,
    pub global_translation: Vector3<f64>,
}

impl PoseParams {
    pub fn rest(num_joints: usize) -> Self {
        PoseParams {
            joint_rotations: vec![Vector3::zeros(); num_joints],
            global_translation: Vector3::zeros(),
        }
    }

    pub fn from_flat(theta: &[f64], translation: Vector3<f64>) -> Self {
        PoseParams {
            joint_rotations: theta
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
            global_translation: translation,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joint_rotations.iter().flat_map(|r| [r.x, r.y, r.z]).collect()
    }

    /// Wrap every joint rotation to an equivalent angle of at most π.
    pub fn canonicalized(&self) -> Self {
        PoseParams {
            joint_rotations: self.joint_rotations.iter().map(rotation::canonicalize).collect(),
            global_translation: self.global_translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joint_rotations.iter().all(|r| r.iter().all(|v| v.is_finite()))
            && self.global_translation.iter().all(|v| v.is_finite())
    }
}

/// Template mesh, skeleton, skinning weights and blendshape bases.
///
/// Basis tensors are stored flat in `N x 3 x D` row-major order.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub(crate) template: Vec<Vector3<f64>>,
    pub(crate) faces: Vec<[usize; 3]>,
    /// `N x K`, rows on the simplex.
    pub(crate) skin_weights: Vec<f64>,
    /// `K x N`.
    pub(crate) joint_regressor: Vec<f64>,
    pub(crate) parents: Vec<Option<usize>>,
    pub(crate) shape_basis: Vec<f64>,
    pub(crate) num_shape: usize,
    pub(crate) expression_basis: Vec<f64>,
    pub(crate) num_expression: usize,
    pub(crate) pose_basis: Vec<f64>,
    pub(crate) part_labels: Vec<Part>,
    pub(crate) joint_parts: Vec<Part>,
    pub(crate) units: String,
    /// Joints ordered so every parent precedes its children.
    pub(crate) order: Vec<usize>,
    /// Joint locations of the template and their linear response to shape.
    pub(crate) joint_template: Vec<Vector3<f64>>,
    pub(crate) joint_shape_basis: Vec<f64>,
}

impl BodyModel {
    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_shape(&self) -> usize {
        self.num_shape
    }

    pub fn num_expression(&self) -> usize {
        self.num_expression
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn part_labels(&self) -> &[Part] {
        &self.part_labels
    }

    /// Part assignment of each joint.
    pub fn joint_parts(&self) -> &[Part] {
        &self.joint_parts
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn skin_weight_row(&self, vertex: usize) -> &[f64] {
        let k = self.num_joints();
        &self.skin_weights[vertex * k..(vertex + 1) * k]
    }

    /// Joints in an order where parents come first.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Length of the bounding-box diagonal of the template.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.template {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }

    fn check_len(&self, what: &str, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::dimension(what, expected, got));
        }
        Ok(())
    }

    /// Template plus shape, expression and pose blendshape offsets.
    ///
    /// The pose feature is the flattened `R_k - I` of every non-root joint.
    pub fn shaped_template(
        &self,
        beta: &[f64],
        psi: &[f64],
        pose: Option<&PoseParams>,
    ) -> Result<Vec<Vector3<f64>>> {
        self.check_len("beta", beta.len(), self.num_shape)?;
        self.check_len("psi", psi.len(), self.num_expression)?;
        let mut out = self.template.clone();
        add_basis(&mut out, &self.shape_basis, beta);
        add_basis(&mut out, &self.expression_basis, psi);
        if let Some(pose) = pose {
            let feature = self.pose_feature(pose)?;
            add_basis(&mut out, &self.pose_basis, &feature);
        }
        Ok(out)
    }

    /// Flattened `R_k - I` for every non-root joint, in joint index order.
    pub fn pose_feature(&self, pose: &PoseParams) -> Result<Vec<f64>> {
        self.check_len("theta", pose.joint_rotations.len(), self.num_joints())?;
        let mut feature = Vec::with_capacity(9 * (self.num_joints() - 1));
        for (k, w) in pose.joint_rotations.iter().enumerate() {
            if self.parents[k].is_none() {
                continue;
            }
            let m = rotation::axis_angle_to_matrix(w) - Matrix3::identity();
            // Row-major flattening.
            for r in 0..3 {
                for c in 0..3 {
                    feature.push(m[(r, c)]);
                }
            }
        }
        Ok(feature)
    }

    /// `joints = joint_regressor * vertices`.
    pub fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let n = self.num_vertices();
        self.check_len("vertices", vertices.len(), n)?;
        Ok((0..self.num_joints())
            .map(|k| {
                let row = &self.joint_regressor[k * n..(k + 1) * n];
                row.iter()
                    .zip(vertices)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vector3::zeros(), |acc, (w, v)| acc + v * *w)
            })
            .collect())
    }

    /// Joint locations for shape coefficients, without building the mesh.
    pub fn joints_for_shape(&self, beta: &[f64]) -> Result<Vec<Vector3<f64>>> {
        self.check_len("beta", beta.len(), self.num_shape)?;
        let nb = self.num_shape;
        Ok(self
            .joint_template
            .iter()
            .enumerate()
            .map(|(k, j)| {
                let mut out = *j;
                for c in 0..3 {
                    let row = &self.joint_shape_basis[(k * 3 + c) * nb..(k * 3 + c + 1) * nb];
                    out[c] += row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
                }
                out
            })
            .collect())
    }

    /// `d joint_k[c] / d beta_j`, `K x 3 x |beta|` row-major.
    pub fn joint_shape_basis(&self) -> &[f64] {
        &self.joint_shape_basis
    }

    /// Rest-relative joint transforms: point `x` in rest space maps to
    /// `G_k x + b_k` in posed space.
    pub fn forward_kinematics(
        &self,
        joints: &[Vector3<f64>],
        pose: &PoseParams,
    ) -> Result<Vec<RigidTransform>> {
        self.check_len("joints", joints.len(), self.num_joints())?;
        self.check_len("theta", pose.joint_rotations.len(), self.num_joints())?;
        Ok(kinematics::forward(self, joints, pose))
    }

    /// Forward kinematics with derivatives of every transform with respect
    /// to every rotation component and every joint coordinate.
    pub fn forward_kinematics_jacobian(
        &self,
        joints: &[Vector3<f64>],
        pose: &PoseParams,
    ) -> Result<(Vec<RigidTransform>, FkJacobian)> {
        self.check_len("joints", joints.len(), self.num_joints())?;
        self.check_len("theta", pose.joint_rotations.len(), self.num_joints())?;
        Ok(kinematics::forward_with_jacobian(self, joints, pose))
    }

    /// `v -> sum_k w_vk (G_k v + b_k)`.
    pub fn lbs_apply(
        &self,
        vertices: &[Vector3<f64>],
        transforms: &[RigidTransform],
    ) -> Result<Vec<Vector3<f64>>> {
        self.check_len("vertices", vertices.len(), self.num_vertices())?;
        self.check_len("transforms", transforms.len(), self.num_joints())?;
        Ok(vertices
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let blended = RigidTransform::blend(self.skin_weight_row(i), transforms);
                blended.apply(v)
            })
            .collect())
    }

    /// Full mesh pipeline: blendshapes, joints, kinematics and skinning.
    pub fn posed_mesh(&self, beta: &[f64], psi: &[f64], pose: &PoseParams) -> Result<PosedMesh> {
        let unposed = self.shaped_template(beta, psi, Some(pose))?;
        let rest_joints = self.joints_for_shape(beta)?;
        let transforms = self.forward_kinematics(&rest_joints, pose)?;
        let vertices = self.lbs_apply(&unposed, &transforms)?;
        let joints = rest_joints
            .iter()
            .zip(&transforms)
            .map(|(j, t)| t.apply(j))
            .collect();
        Ok(PosedMesh {
            vertices,
            joints,
            transforms,
        })
    }
}

/// Output of [`BodyModel::posed_mesh`].
#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
    pub transforms: Vec<RigidTransform>,
}

fn add_basis(vertices: &mut [Vector3<f64>], basis: &[f64], coeffs: &[f64]) {
    let d = coeffs.len();
    if d == 0 || coeffs.iter().all(|c| *c == 0.0) {
        return;
    }
    for (v, out) in vertices.iter_mut().enumerate() {
        for c in 0..3 {
            let row = &basis[(v * 3 + c) * d..(v * 3 + c + 1) * d];
            out[c] += row.iter().zip(coeffs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> BodyModel {
        synthetic::cylinder_arm()
    }

    #[test]
    fn rest_parameters_give_template() {
        let m = model();
        let out = m
            .shaped_template(
                &vec![0.0; m.num_shape()],
                &vec![0.0; m.num_expression()],
                Some(&PoseParams::rest(m.num_joints())),
            )
            .unwrap();
        assert_eq!(out, m.template);
    }

    #[test]
    fn unit_beta_adds_first_basis_column() {
        let m = model();
        let mut beta = vec![0.0; m.num_shape()];
        beta[0] = 1.0;
        let out = m.shaped_template(&beta, &vec![0.0; m.num_expression()], None).unwrap();
        let nb = m.num_shape();
        for (v, p) in out.iter().enumerate() {
            for c in 0..3 {
                let expected = m.template[v][c] + m.shape_basis[(v * 3 + c) * nb];
                assert_eq!(p[c], expected);
            }
        }
    }

    #[test]
    fn blendshapes_match_dense_contraction() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta: Vec<f64> = (0..m.num_shape()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let psi: Vec<f64> = (0..m.num_expression()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let pose = PoseParams::from_flat(
            &(0..3 * m.num_joints()).map(|_| rng.random_range(-0.4..0.4)).collect::<Vec<_>>(),
            Vector3::zeros(),
        );
        let out = m.shaped_template(&beta, &psi, Some(&pose)).unwrap();

        // Dense oracle: build each blend function as an explicit N*3 vector by
        // summing coefficient-scaled basis slices.
        let n = m.num_vertices();
        let feature = {
            let mut f = Vec::new();
            for k in 1..m.num_joints() {
                let r = rotation::axis_angle_to_matrix(&pose.joint_rotations[k]);
                for a in 0..3 {
                    for b in 0..3 {
                        f.push(r[(a, b)] - if a == b { 1.0 } else { 0.0 });
                    }
                }
            }
            f
        };
        let mut dense = vec![0.0; n * 3];
        for (basis, coeffs) in [
            (&m.shape_basis, &beta),
            (&m.expression_basis, &psi),
            (&m.pose_basis, &feature),
        ] {
            let d = coeffs.len();
            for j in 0..d {
                for i in 0..n * 3 {
                    dense[i] += basis[i * d + j] * coeffs[j];
                }
            }
        }
        for v in 0..n {
            for c in 0..3 {
                assert!((out[v][c] - (m.template[v][c] + dense[v * 3 + c])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = model();
        let err = m.shaped_template(&[0.0; 1], &vec![0.0; m.num_expression()], None);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn regressor_rows() {
        let mut m = model();
        let n = m.num_vertices();
        // One-hot row picks out a vertex; uniform row gives the centroid.
        m.joint_regressor[..n].fill(0.0);
        m.joint_regressor[17] = 1.0;
        m.joint_regressor[n..2 * n].fill(1.0 / n as f64);
        let joints = m.regress_joints(&m.template).unwrap();
        assert_eq!(joints[0], m.template[17]);
        let centroid = m.template.iter().fold(Vector3::zeros(), |a, v| a + v) / n as f64;
        assert_relative_eq!(joints[1], centroid, epsilon = 1e-12);
    }

    #[test]
    fn zero_beta_joints_are_template_joints() {
        let m = model();
        let j = m.joints_for_shape(&vec![0.0; m.num_shape()]).unwrap();
        let r = m.regress_joints(&m.template).unwrap();
        for (a, b) in j.iter().zip(&r) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn joints_for_shape_matches_regressed_shaped_mesh() {
        let m = model();
        let beta: Vec<f64> = (0..m.num_shape()).map(|i| 0.3 - 0.2 * i as f64).collect();
        let shaped = m.shaped_template(&beta, &vec![0.0; m.num_expression()], None).unwrap();
        let a = m.regress_joints(&shaped).unwrap();
        let b = m.joints_for_shape(&beta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn lbs_blends() {
        let m = model();
        let k = m.num_joints();
        let ident = vec![RigidTransform::identity(); k];
        let out = m.lbs_apply(&m.template, &ident).unwrap();
        assert_eq!(out, m.template);

        // 0.5 / 0.5 between identity and a translation.
        let mut m2 = m.clone();
        let t = Vector3::new(0.2, -0.4, 0.6);
        for v in 0..m2.num_vertices() {
            let row = &mut m2.skin_weights[v * k..(v + 1) * k];
            row.fill(0.0);
            row[0] = 0.5;
            row[1] = 0.5;
        }
        let mut transforms = ident.clone();
        transforms[1] = RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        };
        let out = m2.lbs_apply(&m2.template, &transforms).unwrap();
        for (p, v) in out.iter().zip(&m2.template) {
            assert_relative_eq!(*p, v + t / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn one_hot_skinning_is_rigid() {
        let mut m = model();
        let k = m.num_joints();
        for v in 0..m.num_vertices() {
            let row = &mut m.skin_weights[v * k..(v + 1) * k];
            row.fill(0.0);
            row[2] = 1.0;
        }
        let joints = m.joints_for_shape(&vec![0.0; m.num_shape()]).unwrap();
        let mut pose = PoseParams::rest(k);
        pose.joint_rotations[1] = Vector3::new(0.0, 0.0, 0.7);
        pose.joint_rotations[2] = Vector3::new(0.3, 0.1, 0.0);
        let tr = m.forward_kinematics(&joints, &pose).unwrap();
        let out = m.lbs_apply(&m.template, &tr).unwrap();
        for (p, v) in out.iter().zip(&m.template) {
            assert_eq!(*p, tr[2].rotation * v + tr[2].translation);
        }
    }

    #[test]
    fn rest_round_trip() {
        let m = model();
        let beta: Vec<f64> = (0..m.num_shape()).map(|i| 0.1 * i as f64).collect();
        let psi = vec![0.2; m.num_expression()];
        let mesh = m.posed_mesh(&beta, &psi, &PoseParams::rest(m.num_joints())).unwrap();
        let shaped = m.shaped_template(&beta, &psi, None).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&shaped) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn lbs_is_equivariant_under_global_rigid_motion() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let joints = m.joints_for_shape(&vec![0.0; m.num_shape()]).unwrap();
        let pose = PoseParams::from_flat(
            &(0..3 * m.num_joints()).map(|_| rng.random_range(-0.8..0.8)).collect::<Vec<_>>(),
            Vector3::new(0.1, 0.2, 0.3),
        );
        let tr = m.forward_kinematics(&joints, &pose).unwrap();
        let posed = m.lbs_apply(&m.template, &tr).unwrap();
        let global = RigidTransform {
            rotation: rotation::axis_angle_to_matrix(&Vector3::new(0.3, -0.5, 1.1)),
            translation: Vector3::new(-1.0, 0.5, 2.0),
        };
        let moved: Vec<_> = tr.iter().map(|t| global.compose(t)).collect();
        let posed_moved = m.lbs_apply(&m.template, &moved).unwrap();
        let max_dev = posed
            .iter()
            .zip(&posed_moved)
            .map(|(a, b)| (global.apply(a) - b).norm())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-9, "{max_dev}");
    }
}
