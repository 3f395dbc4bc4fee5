//! JSON model container.
//!
//! A model file is a UTF-8 JSON object with these keys (all numeric arrays
//! are row-major nested lists):
//!
//! | key                | shape                    | notes                                   |
//! |--------------------|--------------------------|-----------------------------------------|
//! | `template_vertices`| `N x 3`                  | rest template positions                 |
//! | `faces`            | `F x 3`                  | triangle vertex indices                 |
//! | `skin_weights`     | `N x K`                  | rows non-negative, summing to 1         |
//! | `joint_regressor`  | `K x N`                  | joints = regressor · vertices           |
//! | `parents`          | `K`                      | parent joint index, `-1` for the root   |
//! | `shape_basis`      | `N x 3 x S`              | shape blendshapes                       |
//! | `expression_basis` | `N x 3 x E`              | expression blendshapes                  |
//! | `pose_basis`       | `N x 3 x 9(K-1)`         | pose correctives on `R_k - I`           |
//! | `part_labels`      | `N`                      | `"body"`, `"hand"` or `"face"`          |
//! | `units`            | string                   | length unit of the positions            |
//! | `joint_parts`      | `K` (optional)           | part of each joint; derived if absent   |
//!
//! Loading validates every invariant and names the offending key.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{BodyModel, Part, PoseParams};
use crate::error::{read_json, write_json, Error, Result};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub template_vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub skin_weights: Vec<Vec<f64>>,
    pub joint_regressor: Vec<Vec<f64>>,
    pub parents: Vec<i64>,
    pub shape_basis: Vec<Vec<Vec<f64>>>,
    pub expression_basis: Vec<Vec<Vec<f64>>>,
    pub pose_basis: Vec<Vec<Vec<f64>>>,
    pub part_labels: Vec<Part>,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_parts: Option<Vec<Part>>,
}

fn invalid(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Validation(format!("model key `{key}`: {message}"))
}

fn flatten_basis(key: &str, basis: &[Vec<Vec<f64>>], n: usize, expected_d: Option<usize>) -> Result<(Vec<f64>, usize)> {
    if basis.len() != n {
        return Err(invalid(key, format!("expected {n} vertex entries, found {}", basis.len())));
    }
    let d = match expected_d {
        Some(d) => d,
        None => basis.first().and_then(|v| v.first()).map_or(0, |r| r.len()),
    };
    let mut flat = Vec::with_capacity(n * 3 * d);
    for (v, rows) in basis.iter().enumerate() {
        if rows.len() != 3 {
            return Err(invalid(key, format!("vertex {v}: expected 3 coordinate rows, found {}", rows.len())));
        }
        for row in rows {
            if row.len() != d {
                return Err(invalid(key, format!("vertex {v}: expected {d} coefficients, found {}", row.len())));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(invalid(key, format!("vertex {v}: non-finite value")));
            }
            flat.extend_from_slice(row);
        }
    }
    Ok((flat, d))
}

fn nest_basis(flat: &[f64], n: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|v| (0..3).map(|c| flat[(v * 3 + c) * d..(v * 3 + c + 1) * d].to_vec()).collect())
        .collect()
}

/// Parents as options plus a parents-first ordering; rejects anything that
/// is not a single rooted tree.
fn validate_tree(parents: &[i64]) -> Result<(Vec<Option<usize>>, Vec<usize>)> {
    let k = parents.len();
    if k == 0 {
        return Err(invalid("parents", "no joints"));
    }
    let mut out = Vec::with_capacity(k);
    let mut children = vec![Vec::new(); k];
    let mut roots = Vec::new();
    for (j, &p) in parents.iter().enumerate() {
        if p < 0 {
            roots.push(j);
            out.push(None);
        } else if (p as usize) < k && p as usize != j {
            children[p as usize].push(j);
            out.push(Some(p as usize));
        } else {
            return Err(invalid("parents", format!("joint {j} has invalid parent {p}")));
        }
    }
    if roots.len() != 1 {
        return Err(invalid("parents", format!("expected exactly one root, found {}", roots.len())));
    }
    let mut order = Vec::with_capacity(k);
    let mut queue = VecDeque::from([roots[0]]);
    while let Some(j) = queue.pop_front() {
        order.push(j);
        queue.extend(children[j].iter().copied());
    }
    if order.len() != k {
        return Err(invalid("parents", "joint hierarchy contains a cycle"));
    }
    Ok((out, order))
}

impl ModelFile {
    pub fn into_model(self) -> Result<BodyModel> {
        let n = self.template_vertices.len();
        if n == 0 {
            return Err(invalid("template_vertices", "empty"));
        }
        if self.template_vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("template_vertices", "non-finite coordinate"));
        }
        let (parents, order) = validate_tree(&self.parents)?;
        let k = parents.len();

        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(invalid("faces", format!("face {i} references a vertex out of range")));
            }
        }

        if self.skin_weights.len() != n {
            return Err(invalid("skin_weights", format!("expected {n} rows, found {}", self.skin_weights.len())));
        }
        let mut skin_weights = Vec::with_capacity(n * k);
        for (v, row) in self.skin_weights.iter().enumerate() {
            if row.len() != k {
                return Err(invalid("skin_weights", format!("row {v}: expected {k} weights, found {}", row.len())));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(invalid("skin_weights", format!("row {v}: weights must be finite and non-negative")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                return Err(invalid("skin_weights", format!("row {v} sums to {sum}")));
            }
            skin_weights.extend_from_slice(row);
        }

        if self.joint_regressor.len() != k {
            return Err(invalid("joint_regressor", format!("expected {k} rows, found {}", self.joint_regressor.len())));
        }
        let mut joint_regressor = Vec::with_capacity(k * n);
        for (j, row) in self.joint_regressor.iter().enumerate() {
            if row.len() != n {
                return Err(invalid("joint_regressor", format!("row {j}: expected {n} entries, found {}", row.len())));
            }
            if row.iter().any(|w| !w.is_finite()) {
                return Err(invalid("joint_regressor", format!("row {j}: non-finite entry")));
            }
            joint_regressor.extend_from_slice(row);
        }

        let (shape_basis, num_shape) = flatten_basis("shape_basis", &self.shape_basis, n, None)?;
        let (expression_basis, num_expression) =
            flatten_basis("expression_basis", &self.expression_basis, n, None)?;
        let (pose_basis, _) = flatten_basis("pose_basis", &self.pose_basis, n, Some(9 * (k - 1)))?;

        if self.part_labels.len() != n {
            return Err(invalid("part_labels", format!("expected {n} labels, found {}", self.part_labels.len())));
        }

        let joint_parts = match self.joint_parts {
            Some(parts) if parts.len() != k => {
                return Err(invalid("joint_parts", format!("expected {k} labels, found {}", parts.len())));
            }
            Some(parts) => parts,
            None => derive_joint_parts(&skin_weights, &self.part_labels, k),
        };

        let template: Vec<Vector3<f64>> = self
            .template_vertices
            .iter()
            .map(|p| Vector3::new(p[0], p[1], p[2]))
            .collect();

        let mut model = BodyModel {
            template,
            faces: self.faces,
            skin_weights,
            joint_regressor,
            parents,
            shape_basis,
            num_shape,
            expression_basis,
            num_expression,
            pose_basis,
            part_labels: self.part_labels,
            joint_parts,
            units: self.units,
            order,
            joint_template: Vec::new(),
            joint_shape_basis: Vec::new(),
        };
        model.joint_template = model.regress_joints(&model.template)?;
        model.joint_shape_basis = joint_shape_basis(&model);
        Ok(model)
    }

    pub fn from_model(model: &BodyModel) -> Self {
        let n = model.num_vertices();
        let k = model.num_joints();
        ModelFile {
            template_vertices: model.template.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: model.faces.clone(),
            skin_weights: model.skin_weights.chunks(k).map(|r| r.to_vec()).collect(),
            joint_regressor: model.joint_regressor.chunks(n).map(|r| r.to_vec()).collect(),
            parents: model.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect(),
            shape_basis: nest_basis(&model.shape_basis, n, model.num_shape),
            expression_basis: nest_basis(&model.expression_basis, n, model.num_expression),
            pose_basis: nest_basis(&model.pose_basis, n, 9 * (k - 1)),
            part_labels: model.part_labels.clone(),
            units: model.units.clone(),
            joint_parts: Some(model.joint_parts.clone()),
        }
    }
}

fn derive_joint_parts(skin_weights: &[f64], labels: &[Part], k: usize) -> Vec<Part> {
    (0..k)
        .map(|j| {
            let mut mass = [0.0; 3];
            for (v, part) in labels.iter().enumerate() {
                mass[part.index()] += skin_weights[v * k + j];
            }
            let best = (0..3).fold(0, |b, i| if mass[i] > mass[b] { i } else { b });
            Part::ALL[best]
        })
        .collect()
}

fn joint_shape_basis(model: &BodyModel) -> Vec<f64> {
    let n = model.num_vertices();
    let nb = model.num_shape;
    let mut out = vec![0.0; model.num_joints() * 3 * nb];
    for j in 0..model.num_joints() {
        let row = &model.joint_regressor[j * n..(j + 1) * n];
        for (v, w) in row.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for c in 0..3 {
                for b in 0..nb {
                    out[(j * 3 + c) * nb + b] += w * model.shape_basis[(v * 3 + c) * nb + b];
                }
            }
        }
    }
    out
}

impl BodyModel {
    pub fn load(path: &Path) -> Result<BodyModel> {
        let file: ModelFile = read_json(path)?;
        file.into_model()
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &ModelFile::from_model(self))
    }
}

/// Per-frame pose file: `{theta, beta, psi, translation}` with `theta` a
/// `K x 3` list of axis-angle rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    pub translation: [f64; 3],
}

impl PoseFile {
    pub fn pose(&self) -> PoseParams {
        PoseParams {
            joint_rotations: self.theta.iter().map(|t| Vector3::new(t[0], t[1], t[2])).collect(),
            global_translation: Vector3::new(self.translation[0], self.translation[1], self.translation[2]),
        }
    }

    pub fn from_parts(pose: &PoseParams, beta: &[f64], psi: &[f64]) -> Self {
        PoseFile {
            theta: pose.joint_rotations.iter().map(|r| [r.x, r.y, r.z]).collect(),
            beta: beta.to_vec(),
            psi: psi.to_vec(),
            translation: [pose.global_translation.x, pose.global_translation.y, pose.global_translation.z],
        }
    }

    /// Check lengths against a model.
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.theta.len() != model.num_joints() {
            return Err(Error::dimension("pose theta (joints)", model.num_joints(), self.theta.len()));
        }
        if self.beta.len() != model.num_shape() {
            return Err(Error::dimension("pose beta", model.num_shape(), self.beta.len()));
        }
        if self.psi.len() != model.num_expression() {
            return Err(Error::dimension("pose psi", model.num_expression(), self.psi.len()));
        }
        let finite = self.theta.iter().flatten().chain(&self.beta).chain(&self.psi).chain(&self.translation);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PoseFile> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
