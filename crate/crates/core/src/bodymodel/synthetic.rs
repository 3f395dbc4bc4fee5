//! Bundled synthetic "cylinder-arm" model.
//!
//! Five joints (root, elbow, wrist, two fingers) in meters, laid out along
//! +x with the palm in the x-y plane:
//!
//! - a tapered tube from the root (x = 0) to the wrist (x = 0.56), labelled body;
//! - a knob at the root end standing in for the face, labelled face;
//! - a flat palm and two finger tubes, labelled hand.
//!
//! Skinning weights blend smoothly across each joint. Four shape
//! coefficients (thickness, forearm length, upper-arm length, hand size),
//! two expression coefficients on the knob and small pose correctives
//! around every non-root joint exercise all blendshape paths.

use nalgebra::Vector3;

use super::io::ModelFile;
use super::{BodyModel, Part};

pub const ROOT: usize = 0;
pub const ELBOW: usize = 1;
pub const WRIST: usize = 2;
pub const FINGER_A: usize = 3;
pub const FINGER_B: usize = 4;

const NUM_JOINTS: usize = 5;
const ELBOW_X: f64 = 0.30;
const WRIST_X: f64 = 0.56;
const FINGER_X: f64 = 0.64;
const FINGER_TIP_X: f64 = 0.72;
const FINGER_Y: f64 = 0.02;
const KNOB_CENTER_X: f64 = -0.06;
const KNOB_RADIUS: f64 = 0.05;

struct Builder {
    vertices: Vec<Vector3<f64>>,
    parts: Vec<Part>,
    weights: Vec<[f64; NUM_JOINTS]>,
    faces: Vec<[usize; 3]>,
    /// Vertex index sets whose centroid defines each joint.
    joint_rings: [Vec<usize>; NUM_JOINTS],
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(a: usize, b: usize, t: f64) -> [f64; NUM_JOINTS] {
    let mut w = [0.0; NUM_JOINTS];
    w[a] += 1.0 - t;
    w[b] += t;
    w
}

impl Builder {
    fn push(&mut self, p: Vector3<f64>, part: Part, w: [f64; NUM_JOINTS]) -> usize {
        self.vertices.push(p);
        self.parts.push(part);
        self.weights.push(w);
        self.vertices.len() - 1
    }

    /// Tube along x with `around` vertices per ring; returns ring start indices.
    fn tube(
        &mut self,
        xs: &[f64],
        around: usize,
        center: impl Fn(f64) -> (f64, f64),
        radii: impl Fn(f64) -> (f64, f64),
        part: Part,
        weights: impl Fn(f64) -> [f64; NUM_JOINTS],
    ) -> Vec<usize> {
        let mut starts = Vec::new();
        for &x in xs {
            starts.push(self.vertices.len());
            let (cy, cz) = center(x);
            let (ry, rz) = radii(x);
            for a in 0..around {
                let phi = 2.0 * std::f64::consts::PI * a as f64 / around as f64;
                let p = Vector3::new(x, cy + ry * phi.cos(), cz + rz * phi.sin());
                self.push(p, part, weights(x));
            }
        }
        for r in 0..starts.len().saturating_sub(1) {
            for a in 0..around {
                let b = (a + 1) % around;
                let (i0, i1) = (starts[r] + a, starts[r] + b);
                let (j0, j1) = (starts[r + 1] + a, starts[r + 1] + b);
                self.faces.push([i0, j0, i1]);
                self.faces.push([i1, j0, j1]);
            }
        }
        starts
    }
}

fn arm_weights(x: f64) -> [f64; NUM_JOINTS] {
    if x < (ELBOW_X + WRIST_X) / 2.0 {
        blend(ROOT, ELBOW, smoothstep(ELBOW_X - 0.04, ELBOW_X + 0.04, x))
    } else {
        blend(ELBOW, WRIST, smoothstep(WRIST_X - 0.04, WRIST_X + 0.02, x))
    }
}

fn range(start: f64, end: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Build the synthetic model (about 600 vertices).
pub fn cylinder_arm() -> BodyModel {
    let mut b = Builder {
        vertices: Vec::new(),
        parts: Vec::new(),
        weights: Vec::new(),
        faces: Vec::new(),
        joint_rings: Default::default(),
    };

    // Arm tube: 29 rings, spacing 0.02, so rings land exactly on the joints.
    let arm_around = 12;
    let arm_xs = range(0.0, WRIST_X, 29);
    let arm = b.tube(
        &arm_xs,
        arm_around,
        |_| (0.0, 0.0),
        |x| {
            let r = 0.04 - 0.008 * x / WRIST_X;
            (r, r)
        },
        Part::Body,
        arm_weights,
    );
    let ring = |start: usize, n: usize| (start..start + n).collect::<Vec<_>>();
    b.joint_rings[ROOT] = ring(arm[0], arm_around);
    b.joint_rings[ELBOW] = ring(arm[15], arm_around);
    b.joint_rings[WRIST] = ring(arm[28], arm_around);

    // Knob at the root end.
    let lat = 7;
    let lon = 10;
    let pole_a = b.push(
        Vector3::new(KNOB_CENTER_X - KNOB_RADIUS, 0.0, 0.0),
        Part::Face,
        blend(ROOT, ROOT, 0.0),
    );
    let mut knob_rings = Vec::new();
    for i in 1..=lat {
        let t = std::f64::consts::PI * i as f64 / (lat + 1) as f64;
        knob_rings.push(b.vertices.len());
        for j in 0..lon {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / lon as f64;
            let p = Vector3::new(
                KNOB_CENTER_X - KNOB_RADIUS * t.cos(),
                KNOB_RADIUS * t.sin() * phi.cos(),
                KNOB_RADIUS * t.sin() * phi.sin(),
            );
            b.push(p, Part::Face, blend(ROOT, ROOT, 0.0));
        }
    }
    let pole_b = b.push(
        Vector3::new(KNOB_CENTER_X + KNOB_RADIUS, 0.0, 0.0),
        Part::Face,
        blend(ROOT, ROOT, 0.0),
    );
    for j in 0..lon {
        let k = (j + 1) % lon;
        b.faces.push([pole_a, knob_rings[0] + j, knob_rings[0] + k]);
        b.faces.push([pole_b, knob_rings[lat - 1] + k, knob_rings[lat - 1] + j]);
        for r in 0..lat - 1 {
            let (i0, i1) = (knob_rings[r] + j, knob_rings[r] + k);
            let (j0, j1) = (knob_rings[r + 1] + j, knob_rings[r + 1] + k);
            b.faces.push([i0, j0, i1]);
            b.faces.push([i1, j0, j1]);
        }
    }

    // Palm: flat elliptic tube from just past the wrist to the finger bases.
    b.tube(
        &range(WRIST_X + 0.016, FINGER_X, 5),
        14,
        |_| (0.0, 0.0),
        |_| (0.036, 0.011),
        Part::Hand,
        |x| blend(ELBOW, WRIST, smoothstep(WRIST_X - 0.04, WRIST_X + 0.02, x)),
    );

    // Fingers.
    for (joint, y) in [(FINGER_A, FINGER_Y), (FINGER_B, -FINGER_Y)] {
        let starts = b.tube(
            &range(FINGER_X, FINGER_TIP_X, 6),
            9,
            move |_| (y, 0.0),
            |x| {
                let r = 0.011 - 0.003 * (x - FINGER_X) / (FINGER_TIP_X - FINGER_X);
                (r, r)
            },
            Part::Hand,
            move |x| blend(WRIST, joint, smoothstep(FINGER_X - 0.006, FINGER_X + 0.02, x)),
        );
        b.joint_rings[joint] = ring(starts[0], 9);
    }

    let n = b.vertices.len();
    let wrist = Vector3::new(WRIST_X, 0.0, 0.0);
    let knob = Vector3::new(KNOB_CENTER_X, 0.0, 0.0);

    // Shape basis (4 columns).
    let num_shape = 4;
    let mut shape_basis = vec![vec![vec![0.0; num_shape]; 3]; n];
    for (v, p) in b.vertices.iter().enumerate() {
        let part = b.parts[v];
        if part == Part::Body {
            shape_basis[v][1][0] = 0.1 * p.y;
            shape_basis[v][2][0] = 0.1 * p.z;
        }
        if p.x > ELBOW_X {
            shape_basis[v][0][1] = 0.05 * ((p.x - ELBOW_X) / (WRIST_X - ELBOW_X)).min(1.0);
        }
        if p.x > 0.0 {
            shape_basis[v][0][2] = 0.05 * (p.x / ELBOW_X).min(1.0);
        }
        if part == Part::Hand {
            let d = p - wrist;
            for c in 0..3 {
                shape_basis[v][c][3] = 0.1 * d[c];
            }
        }
    }

    // Expression basis (2 columns), only on the knob.
    let num_expression = 2;
    let mut expression_basis = vec![vec![vec![0.0; num_expression]; 3]; n];
    for (v, p) in b.vertices.iter().enumerate() {
        if b.parts[v] == Part::Face {
            let d = p - knob;
            expression_basis[v][1][0] = 0.2 * d.y;
            expression_basis[v][2][1] = 0.3 * d.z;
        }
    }

    // Small pose correctives near each non-root joint.
    let pose_dim = 9 * (NUM_JOINTS - 1);
    let mut pose_basis = vec![vec![vec![0.0; pose_dim]; 3]; n];
    for (v, w) in b.weights.iter().enumerate() {
        for k in 1..NUM_JOINTS {
            if w[k] == 0.0 {
                continue;
            }
            for m in 0..9 {
                for (c, row) in pose_basis[v].iter_mut().enumerate() {
                    let phase = 1.3 * m as f64 + 2.1 * c as f64 + 0.7 * k as f64;
                    row[(k - 1) * 9 + m] = 0.004 * w[k] * phase.sin();
                }
            }
        }
    }

    let mut joint_regressor = vec![vec![0.0; n]; NUM_JOINTS];
    for (j, ring) in b.joint_rings.iter().enumerate() {
        for &v in ring {
            joint_regressor[j][v] = 1.0 / ring.len() as f64;
        }
    }

    ModelFile {
        template_vertices: b.vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
        faces: b.faces,
        skin_weights: b.weights.iter().map(|w| w.to_vec()).collect(),
        joint_regressor,
        parents: vec![-1, 0, 1, 2, 2],
        shape_basis,
        expression_basis,
        pose_basis,
        part_labels: b.parts,
        units: "meters".into(),
        joint_parts: Some(vec![Part::Body, Part::Body, Part::Body, Part::Hand, Part::Hand]),
    }
    .into_model()
    .expect("synthetic model is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let m = cylinder_arm();
        assert_eq!(m.num_joints(), 5);
        assert!((550..=650).contains(&m.num_vertices()), "{}", m.num_vertices());
        let joints = m.regress_joints(m.template()).unwrap();
        assert!((joints[ELBOW] - Vector3::new(ELBOW_X, 0.0, 0.0)).norm() < 1e-12);
        assert!((joints[WRIST] - Vector3::new(WRIST_X, 0.0, 0.0)).norm() < 1e-12);
        assert!((joints[FINGER_A] - Vector3::new(FINGER_X, FINGER_Y, 0.0)).norm() < 1e-12);
        for part in Part::ALL {
            assert!(m.part_labels().contains(&part));
        }
    }
}
