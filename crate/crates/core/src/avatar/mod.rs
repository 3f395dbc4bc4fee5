//! Canonical Gaussians, learned skinning-weight offsets, pose refinement
//! and canonical-to-frame articulation.
//!
//! A Gaussian with center `p`, rotation `R` and scale `S` lives in the
//! canonical (rest) space of the body model. For a frame with pose `θ`:
//!
//! ```text
//! w   = softmax_k(log(w_base + ε) + lbs_net(γ(p))_k)
//! θ'  = θ ⊙ exp(pose_net(θ))
//! G,b = Σ_k w_k (G_k(θ'), b_k(θ'))
//! p_f = G p + b,   Σ_f = G (R S Sᵀ Rᵀ) Gᵀ
//! ```
//!
//! [`GaussianAvatar::articulate_backward`] reverses the whole chain, down to
//! the Gaussian parameters and the weights of both networks.

mod archive;
pub mod sh;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bodymodel::rotation::{quaternion_matrix_backward, quaternion_to_matrix};
use crate::bodymodel::{BodyModel, FkJacobian, Part, PoseParams, RigidTransform};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mlp, MlpCache, MlpGrads, PosEncoding};
use crate::rasterizer::{Camera, SceneGrads, SplatScene};

pub use archive::{ArchiveManifest, ARCHIVE_VERSION};

/// Added to base skinning weights before the logarithm.
pub const WEIGHT_EPSILON: f64 = 1e-8;

/// Initial opacity of template Gaussians.
pub const INITIAL_OPACITY: f64 = 0.1;

/// Lower bound on the initial nearest-neighbor distance.
pub const MIN_INITIAL_SPACING: f64 = 1e-4;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One canonical-space Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    /// Opacity logit.
    pub opacity: f64,
    /// `(degree + 1)²` RGB coefficients.
    pub sh: Vec<[f64; 3]>,
    pub part: Part,
}

impl Gaussian {
    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_to_matrix(&self.rotation)
    }

    /// `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation = self.rotation.map(|v| v / n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().chain(self.log_scale.iter()).all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Network sizes and initialization for a new avatar.
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarConfig {
    pub sh_degree: usize,
    pub encoding_frequencies: usize,
    pub lbs_width: usize,
    pub lbs_layers: usize,
    pub pose_width: usize,
    pub conf_width: usize,
    pub conf_layers: usize,
    pub seed: u64,
}

impl Default for AvatarConfig {
    fn default() -> Self {
        AvatarConfig {
            sh_degree: 3,
            encoding_frequencies: 4,
            lbs_width: 128,
            lbs_layers: 4,
            pose_width: 64,
            conf_width: 32,
            conf_layers: 3,
            seed: 0,
        }
    }
}

/// Number of input channels of the confidence network (RGB + depth).
pub const CONF_INPUTS: usize = 4;

fn build_nets(num_joints: usize, cfg: &AvatarConfig) -> (PosEncoding, Mlp, Mlp, Mlp) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoding = PosEncoding::new(cfg.encoding_frequencies, true);
    let mut widths = vec![encoding.output_dim()];
    widths.extend(std::iter::repeat_n(cfg.lbs_width, cfg.lbs_layers.saturating_sub(1)));
    widths.push(num_joints);
    let mut acts = vec![Activation::Relu; cfg.lbs_layers.saturating_sub(1)];
    acts.push(Activation::Identity);
    let lbs_net = Mlp::new(&widths, &acts, true, &mut rng);

    let pose_net = Mlp::new(
        &[3 * num_joints, cfg.pose_width, 3 * num_joints],
        &[Activation::Tanh, Activation::Identity],
        true,
        &mut rng,
    );

    let mut widths = vec![CONF_INPUTS];
    widths.extend(std::iter::repeat_n(cfg.conf_width, cfg.conf_layers.saturating_sub(1)));
    widths.push(1);
    let mut acts = vec![Activation::Relu; cfg.conf_layers.saturating_sub(1)];
    acts.push(Activation::Identity);
    let conf_net = Mlp::new(&widths, &acts, true, &mut rng);
    (encoding, lbs_net, pose_net, conf_net)
}

/// Canonical Gaussians plus the skinning-offset, pose-refinement and
/// confidence networks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAvatar {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
    pub encoding: PosEncoding,
    pub lbs_net: Mlp,
    pub pose_net: Mlp,
    pub conf_net: Mlp,
    /// Shape coefficients of the canonical body.
    shape: Vec<f64>,
    /// Canonical body vertices and their skinning weights (`V × K`).
    reference_vertices: Vec<Vector3<f64>>,
    reference_weights: Array2<f64>,
    /// Per-Gaussian skinning row of the nearest reference vertex (`N × K`).
    base_weights: Array2<f64>,
    nearest_distance: Vec<f64>,
}

/// Mean distance from every point to its three nearest neighbors.
pub fn mean_nearest_distance(points: &[Vector3<f64>]) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            if found.is_empty() {
                MIN_INITIAL_SPACING
            } else {
                (found.iter().sum::<f64>() / found.len() as f64).max(MIN_INITIAL_SPACING)
            }
        })
        .collect()
}

/// `softmax_k(log(base_k + ε) + offset_k)`.
pub fn skinning_softmax(base: &[f64], offsets: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = base
        .iter()
        .zip(offsets)
        .map(|(b, o)| (b + WEIGHT_EPSILON).ln() + o)
        .collect();
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl GaussianAvatar {
    /// One Gaussian per template vertex with isotropic scale from the
    /// nearest-neighbor spacing, opacity 0.1 and mid-gray color.
    pub fn init_from_model(model: &BodyModel, cfg: &AvatarConfig) -> Result<Self> {
        Self::init_with_shape(model, &vec![0.0; model.num_shape()], cfg)
    }

    /// Like [`init_from_model`](Self::init_from_model) on the body shaped by `beta`.
    pub fn init_with_shape(model: &BodyModel, beta: &[f64], cfg: &AvatarConfig) -> Result<Self> {
        if cfg.sh_degree > sh::MAX_DEGREE {
            return Err(Error::Validation(format!("sh degree must be at most {}", sh::MAX_DEGREE)));
        }
        let vertices = model.shaped_template(beta, &vec![0.0; model.num_expression()], None)?;
        let spacing = mean_nearest_distance(&vertices);
        let ncoef = sh::num_coeffs(cfg.sh_degree);
        let gaussians = vertices
            .iter()
            .zip(&spacing)
            .zip(model.part_labels())
            .map(|((v, s), part)| Gaussian {
                center: *v,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: Vector3::repeat(s.ln()),
                opacity: logit(INITIAL_OPACITY),
                sh: vec![[0.0; 3]; ncoef],
                part: *part,
            })
            .collect();
        let (encoding, lbs_net, pose_net, conf_net) = build_nets(model.num_joints(), cfg);
        let mut avatar = GaussianAvatar {
            gaussians,
            sh_degree: cfg.sh_degree,
            encoding,
            lbs_net,
            pose_net,
            conf_net,
            shape: beta.to_vec(),
            reference_vertices: Vec::new(),
            reference_weights: Array2::zeros((0, 0)),
            base_weights: Array2::zeros((0, 0)),
            nearest_distance: Vec::new(),
        };
        avatar.set_reference(model)?;
        Ok(avatar)
    }

    /// Rebind the canonical reference body (vertices and skinning rows).
    pub(crate) fn set_reference(&mut self, model: &BodyModel) -> Result<()> {
        let vertices = model.shaped_template(&self.shape, &vec![0.0; model.num_expression()], None)?;
        let k = model.num_joints();
        let mut weights = Array2::zeros((vertices.len(), k));
        for (v, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
            row.iter_mut()
                .zip(model.skin_weight_row(v))
                .for_each(|(a, b)| *a = *b);
        }
        if self.lbs_net.output_dim() != k || self.pose_net.input_dim() != 3 * k || self.pose_net.output_dim() != 3 * k {
            return Err(Error::Validation(format!(
                "avatar networks do not match a body model with {k} joints"
            )));
        }
        self.reference_vertices = vertices;
        self.reference_weights = weights;
        self.refresh_caches();
        Ok(())
    }

    /// Recompute the nearest-vertex base weights and template distances;
    /// call after Gaussians are added, removed or moved.
    pub fn refresh_caches(&mut self) {
        let n = self.gaussians.len();
        let k = self.reference_weights.ncols();
        let mut base = Array2::zeros((n, k));
        let mut dist = vec![0.0; n];
        for (i, g) in self.gaussians.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (v, p) in self.reference_vertices.iter().enumerate() {
                let d = (g.center - p).norm_squared();
                if d < best.0 {
                    best = (d, v);
                }
            }
            base.row_mut(i).assign(&self.reference_weights.row(best.1));
            dist[i] = best.0.sqrt();
        }
        self.base_weights = base;
        self.nearest_distance = dist;
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.reference_weights.ncols()
    }

    pub fn shape(&self) -> &[f64] {
        &self.shape
    }

    /// Skinning row of the nearest reference vertex, per Gaussian.
    pub fn base_weights(&self) -> &Array2<f64> {
        &self.base_weights
    }

    /// Distance from each Gaussian center to the nearest reference vertex,
    /// as of the last [`refresh_caches`](Self::refresh_caches).
    pub fn template_distances(&self) -> &[f64] {
        &self.nearest_distance
    }

    pub fn reference_vertices(&self) -> &[Vector3<f64>] {
        &self.reference_vertices
    }

    fn check_caches(&self) -> Result<()> {
        if self.base_weights.nrows() != self.gaussians.len() {
            return Err(Error::Validation(
                "avatar caches are stale; call refresh_caches after editing Gaussians".into(),
            ));
        }
        Ok(())
    }

    fn encode_centers(&self) -> Array2<f64> {
        let d = self.encoding.output_dim();
        let mut x = Array2::zeros((self.gaussians.len(), d));
        for (g, mut row) in self.gaussians.iter().zip(x.axis_iter_mut(Axis(0))) {
            self.encoding
                .encode_into(&g.center, row.as_slice_mut().expect("standard layout"));
        }
        x
    }

    fn softmax_rows(&self, offsets: &Array2<f64>) -> Array2<f64> {
        let mut w = offsets.clone();
        for (mut row, base) in w.axis_iter_mut(Axis(0)).zip(self.base_weights.axis_iter(Axis(0))) {
            let out = skinning_softmax(
                base.as_slice().expect("standard layout"),
                row.as_slice().expect("standard layout"),
            );
            row.iter_mut().zip(out).for_each(|(a, b)| *a = b);
        }
        w
    }

    /// Per-Gaussian skinning weights (`N × K`), rows on the simplex.
    pub fn blended_weights(&self) -> Result<Array2<f64>> {
        self.check_caches()?;
        let offsets = self.lbs_net.forward(self.encode_centers().view())?;
        Ok(self.softmax_rows(&offsets))
    }

    /// `θ ⊙ exp(pose_net(θ))` for a flat axis-angle vector.
    pub fn refine_pose(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let scale = self.pose_net.forward_one(theta)?;
        Ok(theta.iter().zip(&scale).map(|(t, s)| t * s.exp()).collect())
    }

    /// Canonical-to-frame articulation of every Gaussian, with colors seen
    /// from `camera`.
    pub fn articulate(
        &self,
        model: &BodyModel,
        pose: &PoseParams,
        beta: &[f64],
        camera: &Camera,
    ) -> Result<Articulation> {
        self.check_caches()?;
        if model.num_joints() != self.num_joints() {
            return Err(Error::dimension("body model joints", self.num_joints(), model.num_joints()));
        }
        let encoded = self.encode_centers();
        let (offsets, lbs_cache) = self.lbs_net.forward_cached(encoded.view())?;
        let weights = self.softmax_rows(&offsets);

        let theta_in = pose.flat();
        let input = ArrayView2::from_shape((1, theta_in.len()), &theta_in)
            .map_err(|e| Error::Validation(format!("pose vector: {e}")))?;
        let (scale_log, pose_cache) = self.pose_net.forward_cached(input)?;
        let pose_scale: Vec<f64> = scale_log.iter().map(|v| v.exp()).collect();
        let theta: Vec<f64> = theta_in.iter().zip(&pose_scale).map(|(t, s)| t * s).collect();
        let refined = PoseParams::from_flat(&theta, pose.global_translation);

        let joints = model.joints_for_shape(beta)?;
        let (transforms, fk) = model.forward_kinematics_jacobian(&joints, &refined)?;
        if transforms.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical("non-finite joint transform".into()));
        }

        let eye = camera.center();
        let n = self.gaussians.len();
        let mut scene = SplatScene {
            means: Vec::with_capacity(n),
            covariances: Vec::with_capacity(n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        };
        let mut blended = Vec::with_capacity(n);
        let mut canonical_cov = Vec::with_capacity(n);
        for (i, g) in self.gaussians.iter().enumerate() {
            let w = weights.row(i);
            let t = RigidTransform::blend(w.as_slice().expect("standard layout"), &transforms);
            let cov_c = g.covariance();
            let mean = t.apply(&g.center);
            scene.means.push(mean);
            scene.covariances.push(t.rotation * cov_c * t.rotation.transpose());
            scene.opacities.push(g.alpha());
            scene.colors.push(sh::eval(self.sh_degree, &g.sh, &(mean - eye)));
            blended.push(t);
            canonical_cov.push(cov_c);
        }
        Ok(Articulation {
            scene,
            weights,
            theta,
            transforms,
            eye,
            encoded,
            lbs_cache,
            pose_input: theta_in,
            pose_scale,
            pose_cache,
            fk,
            blended,
            canonical_cov,
        })
    }

    /// Pull rasterizer gradients back through the articulation.
    pub fn articulate_backward(&self, art: &Articulation, grads: &SceneGrads) -> Result<AvatarGrads> {
        let n = self.gaussians.len();
        if grads.means.len() != n || art.scene.len() != n {
            return Err(Error::dimension("scene gradients", n, grads.means.len()));
        }
        let k = self.num_joints();
        let mut out = AvatarGrads::zeros(self);
        let mut d_weights = Array2::<f64>::zeros((n, k));
        let mut d_rot = vec![Matrix3::zeros(); k];
        let mut d_trans = vec![Vector3::zeros(); k];

        for (i, g) in self.gaussians.iter().enumerate() {
            let t = &art.blended[i];
            let mean = &art.scene.means[i];
            let (d_sh, d_view) = sh::backward(self.sh_degree, &g.sh, &(mean - art.eye), &grads.colors[i]);
            out.sh[i] = d_sh;
            let d_mean = grads.means[i] + d_view;
            let d_cov_f = &grads.covariances[i];
            let cov_c = &art.canonical_cov[i];

            // Σ_f = A Σ_c Aᵀ, p_f = A p + b.
            let d_a = d_mean * g.center.transpose() + (d_cov_f + d_cov_f.transpose()) * t.rotation * cov_c;
            let d_cov_c = t.rotation.transpose() * d_cov_f * t.rotation;
            out.centers[i] = t.rotation.transpose() * d_mean;

            // Σ_c = M Mᵀ, M = R S.
            let r = g.rotation_matrix();
            let s = g.scale();
            let m = r * Matrix3::from_diagonal(&s);
            let d_m = (d_cov_c + d_cov_c.transpose()) * m;
            let d_r = d_m * Matrix3::from_diagonal(&s);
            out.rotations[i] = quaternion_matrix_backward(&g.rotation, &d_r);
            for j in 0..3 {
                let ds: f64 = (0..3).map(|row| d_m[(row, j)] * r[(row, j)]).sum();
                out.log_scales[i][j] = ds * s[j];
            }
            let a = art.scene.opacities[i];
            out.opacities[i] = grads.opacities[i] * a * (1.0 - a);

            let w = art.weights.row(i);
            for kk in 0..k {
                let tk = &art.transforms[kk];
                d_weights[[i, kk]] = d_a.dot(&tk.rotation) + d_mean.dot(&tk.translation);
                d_rot[kk] += d_a * w[kk];
                d_trans[kk] += d_mean * w[kk];
            }
        }

        // Softmax backward into the network offsets.
        let mut d_offsets = d_weights;
        for (mut row, w) in d_offsets.axis_iter_mut(Axis(0)).zip(art.weights.axis_iter(Axis(0))) {
            let dot: f64 = row.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            row.zip_mut_with(&w, |d, &wk| *d = wk * (*d - dot));
        }
        let (lbs_grads, d_encoded) = self.lbs_net.backward(&art.lbs_cache, d_offsets.view());
        out.lbs_net = lbs_grads;
        for (i, g) in self.gaussians.iter().enumerate() {
            let row = d_encoded.row(i);
            out.centers[i] += self
                .encoding
                .backward(&g.center, row.as_slice().expect("standard layout"));
        }

        // Kinematic chain into the refined pose, then the pose network.
        let d_theta = art.fk.pullback_theta(&d_rot, &d_trans);
        let d_log_scale: Vec<f64> = d_theta
            .iter()
            .zip(&art.pose_input)
            .zip(&art.pose_scale)
            .map(|((d, t), s)| d * t * s)
            .collect();
        let d_out = ArrayView2::from_shape((1, d_log_scale.len()), &d_log_scale)
            .map_err(|e| Error::Validation(format!("pose gradient: {e}")))?;
        out.pose_net = self.pose_net.backward(&art.pose_cache, d_out).0;
        out.theta = d_theta;
        out.view_grad_norm = grads.view_grad_norm.clone();
        out.visible = grads.visible.clone();
        Ok(out)
    }
}

/// Result of [`GaussianAvatar::articulate`].
#[derive(Debug, Clone)]
pub struct Articulation {
    pub scene: SplatScene,
    /// Blended skinning weights, `N × K`.
    pub weights: Array2<f64>,
    /// Refined flat pose.
    pub theta: Vec<f64>,
    /// Rest-relative joint transforms for the refined pose.
    pub transforms: Vec<RigidTransform>,
    eye: Vector3<f64>,
    encoded: Array2<f64>,
    lbs_cache: MlpCache,
    pose_input: Vec<f64>,
    pose_scale: Vec<f64>,
    pose_cache: MlpCache,
    fk: FkJacobian,
    blended: Vec<RigidTransform>,
    canonical_cov: Vec<Matrix3<f64>>,
}

impl Articulation {
    pub fn encoded_centers(&self) -> &Array2<f64> {
        &self.encoded
    }
}

/// Gradients for every trainable avatar quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarGrads {
    pub centers: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub sh: Vec<Vec<[f64; 3]>>,
    pub lbs_net: MlpGrads,
    pub pose_net: MlpGrads,
    /// Gradient with respect to the refined flat pose.
    pub theta: Vec<f64>,
    /// Screen-space positional gradient norms from the rasterizer.
    pub view_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl AvatarGrads {
    pub fn zeros(avatar: &GaussianAvatar) -> Self {
        let n = avatar.len();
        AvatarGrads {
            centers: vec![Vector3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vector3::zeros(); n],
            opacities: vec![0.0; n],
            sh: vec![vec![[0.0; 3]; sh::num_coeffs(avatar.sh_degree)]; n],
            lbs_net: MlpGrads::zeros_like(&avatar.lbs_net),
            pose_net: MlpGrads::zeros_like(&avatar.pose_net),
            theta: vec![0.0; 3 * avatar.num_joints()],
            view_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::synthetic::{cylinder_arm, ELBOW, WRIST};
    use approx::assert_relative_eq;

    fn small_cfg() -> AvatarConfig {
        AvatarConfig {
            sh_degree: 0,
            lbs_width: 16,
            pose_width: 8,
            conf_width: 8,
            ..AvatarConfig::default()
        }
    }

    fn camera() -> Camera {
        let mut cam = Camera::new(200.0, 200.0, 64.0, 64.0, 128, 128).unwrap();
        cam.set_extrinsics(&Matrix3::identity(), &Vector3::new(-0.3, 0.0, 1.5));
        cam
    }

    #[test]
    fn one_gaussian_per_vertex() {
        let m = cylinder_arm();
        let a = GaussianAvatar::init_from_model(&m, &small_cfg()).unwrap();
        assert_eq!(a.len(), m.num_vertices());
        for (g, p) in a.gaussians.iter().zip(m.part_labels()) {
            assert_eq!(g.part, *p);
            assert_relative_eq!(g.alpha(), INITIAL_OPACITY, epsilon = 1e-12);
        }
        for v in 0..m.num_vertices() {
            for (k, w) in m.skin_weight_row(v).iter().enumerate() {
                assert_eq!(a.base_weights()[[v, k]], *w);
            }
        }
    }

    #[test]
    fn grid_spacing_gives_log_pitch() {
        let h = 0.037;
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                for k in 0..4 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64) * h);
                }
            }
        }
        for d in mean_nearest_distance(&pts) {
            assert_relative_eq!(d.ln(), h.ln(), epsilon = 1e-12);
        }
        let dup = vec![Vector3::zeros(); 4];
        assert!(mean_nearest_distance(&dup).iter().all(|d| *d == MIN_INITIAL_SPACING));
    }

    #[test]
    fn softmax_of_log_weights() {
        let w = skinning_softmax(&[0.5, 0.5], &[0.0, 0.0]);
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-9);
        let w = skinning_softmax(&[1.0, 0.0, 0.0], &[0.0; 3]);
        // (0 + ε) / (1 + 3ε) and (1 + ε) / (1 + 3ε).
        let tiny = WEIGHT_EPSILON / (1.0 + 3.0 * WEIGHT_EPSILON);
        assert_relative_eq!(w[1], tiny, max_relative = 1e-9);
        assert_relative_eq!(w[2], tiny, max_relative = 1e-9);
        assert_relative_eq!(w[0], (1.0 + WEIGHT_EPSILON) / (1.0 + 3.0 * WEIGHT_EPSILON), epsilon = 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn random_offsets_stay_on_simplex() {
        let m = cylinder_arm();
        let mut cfg = small_cfg();
        cfg.lbs_width = 8;
        let mut a = GaussianAvatar::init_from_model(&m, &cfg).unwrap();
        let last = a.lbs_net.layers().len() - 1;
        a.lbs_net.layers_mut()[last].weight.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() * 3.0);
        let w = a.blended_weights().unwrap();
        for row in w.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn pose_refinement_is_pointwise() {
        let m = cylinder_arm();
        let mut a = GaussianAvatar::init_from_model(&m, &small_cfg()).unwrap();
        let theta: Vec<f64> = (0..15).map(|i| 0.1 * i as f64 - 0.4).collect();
        assert_eq!(a.refine_pose(&theta).unwrap(), theta);
        assert!(a.refine_pose(&[0.0; 15]).unwrap().iter().all(|v| *v == 0.0));
        let last = a.pose_net.layers().len() - 1;
        a.pose_net.layers_mut()[last].bias[4] = 2f64.ln();
        let out = a.refine_pose(&theta).unwrap();
        assert_relative_eq!(out[4], 2.0 * theta[4], epsilon = 1e-15);
        assert_eq!(out[3], theta[3]);
    }

    #[test]
    fn rest_pose_is_identity() {
        let m = cylinder_arm();
        let mut a = GaussianAvatar::init_from_model(&m, &small_cfg()).unwrap();
        a.gaussians[3].rotation = [0.9, 0.1, -0.3, 0.2];
        a.gaussians[3].log_scale = Vector3::new(-3.0, -4.0, -5.0);
        let art = a.articulate(&m, &PoseParams::rest(5), &[0.0; 4], &camera()).unwrap();
        for (i, g) in a.gaussians.iter().enumerate() {
            assert_relative_eq!(art.scene.means[i], g.center, epsilon = 1e-14);
            assert_relative_eq!(art.scene.covariances[i], g.covariance(), epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_nets_reproduce_model_skinning() {
        let m = cylinder_arm();
        let a = GaussianAvatar::init_from_model(&m, &small_cfg()).unwrap();
        let mut pose = PoseParams::rest(5);
        pose.joint_rotations[ELBOW] = Vector3::new(0.0, 0.3, 0.9);
        pose.joint_rotations[WRIST] = Vector3::new(0.4, -0.2, 0.1);
        pose.global_translation = Vector3::new(0.1, -0.2, 0.05);
        let art = a.articulate(&m, &pose, &[0.0; 4], &camera()).unwrap();
        let beta = [0.0; 4];
        let joints = m.joints_for_shape(&beta).unwrap();
        let transforms = m.forward_kinematics(&joints, &pose).unwrap();
        let lbs = m.lbs_apply(m.template(), &transforms).unwrap();
        let w = a.blended_weights().unwrap();
        for (i, p) in lbs.iter().enumerate() {
            // Only the ε smoothing of the base weights separates the two.
            assert!((art.scene.means[i] - p).norm() < 1e-7);
            let t = RigidTransform::blend(w.row(i).as_slice().unwrap(), &transforms);
            assert!((art.scene.means[i] - t.apply(m.template().get(i).unwrap())).norm() < 1e-12);
        }
    }

    #[test]
    fn one_hot_rotation_preserves_spectrum() {
        let m = cylinder_arm();
        let mut a = GaussianAvatar::init_from_model(&m, &small_cfg()).unwrap();
        a.gaussians[0].log_scale = Vector3::new(-2.0, -3.0, -4.5);
        a.gaussians[0].rotation = [0.7, 0.2, 0.4, -0.1];
        a.gaussians[0].normalize_rotation();
        let mut pose = PoseParams::rest(5);
        pose.joint_rotations[0] = Vector3::new(0.7, -1.1, 0.4);
        let art = a.articulate(&m, &pose, &[0.0; 4], &camera()).unwrap();
        let mut e1: Vec<f64> = a.gaussians[0].covariance().symmetric_eigenvalues().iter().copied().collect();
        let mut e2: Vec<f64> = art.scene.covariances[0].symmetric_eigenvalues().iter().copied().collect();
        e1.sort_by(f64::total_cmp);
        e2.sort_by(f64::total_cmp);
        for (x, y) in e1.iter().zip(&e2) {
            assert_relative_eq!(x, y, max_relative = 1e-6);
        }
    }

    #[test]
    fn half_blend_with_translation() {
        let transforms = [
            RigidTransform::identity(),
            RigidTransform {
                rotation: Matrix3::identity(),
                translation: Vector3::new(0.2, -0.4, 0.6),
            },
        ];
        let p = Vector3::new(0.3, 0.1, -0.2);
        let t = RigidTransform::blend(&[0.5, 0.5], &transforms);
        assert_relative_eq!(t.apply(&p), p + Vector3::new(0.1, -0.2, 0.3), epsilon = 1e-15);
    }

    #[test]
    fn full_chain_matches_finite_differences() {
        use crate::rasterizer::{rasterize, rasterize_backward, OutputGrads};
        use ndarray::{Array2, Array3};

        let m = cylinder_arm();
        let cfg = AvatarConfig {
            sh_degree: 2,
            lbs_width: 12,
            pose_width: 6,
            conf_width: 4,
            ..AvatarConfig::default()
        };
        let mut a = GaussianAvatar::init_from_model(&m, &cfg).unwrap();
        let keep: Vec<usize> = (0..a.len()).filter(|&i| (m.template()[i].x - 0.5).abs() < 0.06).step_by(9).collect();
        a.gaussians = keep.iter().map(|&i| a.gaussians[i].clone()).collect();
        a.refresh_caches();
        for (i, g) in a.gaussians.iter_mut().enumerate() {
            let f = i as f64;
            g.log_scale = Vector3::new(-3.6 + 0.2 * f.sin(), -3.9, -3.7 + 0.1 * f.cos());
            g.rotation = [1.0, 0.2 * f.sin(), -0.1, 0.3 * f.cos()];
            g.opacity = 0.5 * f.sin();
            for (j, c) in g.sh.iter_mut().enumerate() {
                *c = [0.2 * (f + j as f64).sin(), 0.1 * (f * j as f64).cos(), -0.15];
            }
        }
        for net in [&mut a.lbs_net, &mut a.pose_net] {
            for (li, l) in net.layers_mut().iter_mut().enumerate() {
                l.weight.iter_mut().enumerate().for_each(|(k, v)| *v = 0.4 * ((k * 7 + li) as f64 * 0.37).sin());
                l.bias.iter_mut().enumerate().for_each(|(k, v)| *v = 0.1 * (k as f64 * 1.3).cos());
            }
        }
        let mut cam = Camera::new(45.0, 45.0, 4.0, 4.0, 8, 8).unwrap();
        cam.set_extrinsics(&Matrix3::identity(), &Vector3::new(-0.5, 0.0, 0.6));
        let mut pose = PoseParams::rest(5);
        pose.joint_rotations[ELBOW] = Vector3::new(0.05, 0.1, 0.2);
        pose.joint_rotations[WRIST] = Vector3::new(0.1, -0.15, 0.05);
        let beta = [0.0; 4];
        let gc = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 5 + x * 3 + c) as f64 * 0.9).sin());
        let gd = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) as f64).cos() * 0.3);
        let ga = Array2::from_shape_fn((8, 8), |(y, x)| ((2 * y + x) as f64).sin() * 0.5);
        let loss = |a: &GaussianAvatar| {
            let art = a.articulate(&m, &pose, &beta, &cam).unwrap();
            let (o, _) = rasterize(&art.scene, &cam, [0.0; 3]).unwrap();
            (&o.color * &gc).sum() + (&o.depth * &gd).sum() + (&o.alpha * &ga).sum()
        };
        let art = a.articulate(&m, &pose, &beta, &cam).unwrap();
        let (_, cache) = rasterize(&art.scene, &cam, [0.0; 3]).unwrap();
        let og = OutputGrads { color: gc.clone(), depth: Some(gd.clone()), alpha: Some(ga.clone()) };
        let sg = rasterize_backward(&art.scene, &cam, &cache, &og).unwrap();
        let g = a.articulate_backward(&art, &sg).unwrap();
        assert!(a.len() >= 4);
        assert!(g.visible.iter().all(|v| *v));
        assert!(g.opacities.iter().all(|v| v.abs() > 1e-3), "{:?}", g.opacities);

        let h = 1e-5;
        let check = |name: &str, analytic: f64, bump: &dyn Fn(&mut GaussianAvatar, f64)| {
            let mut p = a.clone();
            let mut q = a.clone();
            bump(&mut p, h);
            bump(&mut q, -h);
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
            assert!(err < 1e-4, "{name}: analytic {analytic} fd {fd}");
        };
        for i in 0..a.len() {
            for c in 0..3 {
                check("center", g.centers[i][c], &|a, e| a.gaussians[i].center[c] += e);
                check("log_scale", g.log_scales[i][c], &|a, e| a.gaussians[i].log_scale[c] += e);
                check("sh", g.sh[i][1][c], &|a, e| a.gaussians[i].sh[1][c] += e);
            }
            for c in 0..4 {
                check("rotation", g.rotations[i][c], &|a, e| a.gaussians[i].rotation[c] += e);
            }
            check("opacity", g.opacities[i], &|a, e| a.gaussians[i].opacity += e);
        }
        for l in 0..a.lbs_net.layers().len() {
            for k in [0, 5, 11] {
                let an = g.lbs_net.weights[l].as_slice().unwrap()[k];
                check("lbs", an, &|a, e| a.lbs_net.layers_mut()[l].weight.as_slice_mut().unwrap()[k] += e);
            }
        }
        for l in 0..2 {
            for k in [0, 3, 8] {
                let an = g.pose_net.weights[l].as_slice().unwrap()[k];
                check("pose", an, &|a, e| a.pose_net.layers_mut()[l].weight.as_slice_mut().unwrap()[k] += e);
            }
            let an = g.pose_net.biases[l][2];
            check("pose bias", an, &|a, e| a.pose_net.layers_mut()[l].bias[2] += e);
        }
    }
}
