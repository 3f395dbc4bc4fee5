//! Multi-source body-model fitting.
//!
//! Each frame supplies 2D keypoints for every joint (pixels, with
//! confidences), optional 3D body joints and optional 3D hand joints in the
//! camera frame. The objective per frame is
//!
//! ```text
//! L = sum_i gamma_i w_i psi(proj(P_i) - k_i)                      (2D)
//!   + lambda_bp (s^2 sum_body psi(P_b - J_b) + |eta|^2)          (body prior)
//!   + lambda_hp  s^2 sum_hand psi(P_h.z - J_h.z)                  (hand depth)
//! ```
//!
//! where `psi` is the Geman-McClure penalty, `s` converts model units to
//! pixel-equivalent units, and the non-root body-joint rotations are tied to
//! `decode(eta)`. Global orientation lives in the root joint and the camera
//! extrinsics are the identity.

pub mod lbfgs;
pub mod prior;

use std::path::Path;

use log::{debug, warn};
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bodymodel::io::PoseFile;
use crate::bodymodel::{BodyModel, Part, PoseParams};
use crate::error::{read_json, write_json, Error, Result};
pub use lbfgs::{minimize, LbfgsConfig, LbfgsResult, Status, WolfeStep};
pub use prior::{LinearDecoder, PriorDecoder};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite();
        if !ok || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Validation(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Pixel coordinates, or `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        (p.z > 0.0).then(|| [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy])
    }
}

/// Detections for one frame. `keypoints2d` holds `[u, v, confidence]` for
/// every model joint in index order; `body_joints3d` and `hand_joints3d`
/// follow the model's body and hand joint lists (see [`JointSets`]) and may
/// be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub keypoints2d: Vec<[f64; 3]>,
    #[serde(default)]
    pub body_joints3d: Vec<[f64; 3]>,
    #[serde(default)]
    pub hand_joints3d: Vec<[f64; 3]>,
    pub camera: Intrinsics,
}

impl FrameDetections {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        self.camera.validate()?;
        let sets = JointSets::new(model);
        let k = model.num_joints();
        if !self.keypoints2d.is_empty() && self.keypoints2d.len() != k {
            return Err(Error::dimension("keypoints2d", k, self.keypoints2d.len()));
        }
        for (i, kp) in self.keypoints2d.iter().enumerate() {
            if !(0.0..=1.0).contains(&kp[2]) || !kp[0].is_finite() || !kp[1].is_finite() {
                return Err(Error::Validation(format!("keypoint {i} invalid: {kp:?}")));
            }
        }
        if !self.body_joints3d.is_empty() && self.body_joints3d.len() != sets.body.len() {
            return Err(Error::dimension("body_joints3d", sets.body.len(), self.body_joints3d.len()));
        }
        if !self.hand_joints3d.is_empty() && self.hand_joints3d.len() != sets.hand.len() {
            return Err(Error::dimension("hand_joints3d", sets.hand.len(), self.hand_joints3d.len()));
        }
        let finite = self.body_joints3d.iter().chain(&self.hand_joints3d).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("3d joints contain non-finite values".into()));
        }
        Ok(())
    }

    /// True when no term can use this frame.
    pub fn is_empty(&self) -> bool {
        self.keypoints2d.iter().all(|k| k[2] == 0.0) && self.body_joints3d.is_empty() && self.hand_joints3d.is_empty()
    }
}

/// Joint index sets derived from the model's joint part map.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSets {
    pub body: Vec<usize>,
    pub hand: Vec<usize>,
    pub face: Vec<usize>,
    /// Root joints: free global orientation.
    pub roots: Vec<usize>,
    /// Non-root body joints, driven by the prior decoder.
    pub decoded: Vec<usize>,
    /// Hand and face joints, free in the later stages.
    pub detail: Vec<usize>,
}

impl JointSets {
    pub fn new(model: &BodyModel) -> Self {
        let parts = model.joint_parts();
        let of = |p: Part| (0..parts.len()).filter(|&k| parts[k] == p).collect::<Vec<_>>();
        let roots: Vec<usize> = (0..parts.len()).filter(|&k| model.parents()[k].is_none()).collect();
        let body = of(Part::Body);
        let decoded = body.iter().copied().filter(|k| !roots.contains(k)).collect();
        let detail = (0..parts.len()).filter(|k| parts[*k] != Part::Body && !roots.contains(k)).collect();
        JointSets {
            hand: of(Part::Hand),
            face: of(Part::Face),
            body,
            roots,
            decoded,
            detail,
        }
    }
}

/// `psi(r) = rho^2 |r|^2 / (|r|^2 + rho^2)`.
pub fn geman_mcclure(residual: &[f64], rho: f64) -> f64 {
    gm(residual.iter().map(|v| v * v).sum(), rho).0
}

/// Value and derivative with respect to the squared norm.
fn gm(sq: f64, rho: f64) -> (f64, f64) {
    let r2 = rho * rho;
    let den = sq + r2;
    (r2 * sq / den, r2 * r2 / (den * den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: usize,
    pub lambda_bp: f64,
    pub lambda_hp: f64,
    /// Multiplier on the hand and face keypoint weights.
    pub detail_gamma_scale: f64,
    /// Whether hand and face joint rotations are optimized.
    pub free_detail_joints: bool,
    /// Optimize each frame separately with the shared shape held fixed.
    pub per_frame: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rho_2d: f64,
    pub rho_3d: f64,
    pub gamma_body: f64,
    pub gamma_hand: f64,
    pub gamma_face: f64,
    /// Per-joint keypoint weights replacing the per-part defaults.
    pub joint_weights: Option<Vec<f64>>,
    /// Pixels per model unit applied to 3D residuals so both kinds of terms
    /// share a scale.
    pub metric_scale: f64,
    pub stages: Vec<StageConfig>,
    pub tolerance: f64,
    pub prior_dim: usize,
    pub prior_seed: u64,
    /// Depth used to place the root when no 3D detections are available.
    pub init_depth: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rho_2d: 100.0,
            rho_3d: 0.1,
            gamma_body: 1.0,
            gamma_hand: 2.0,
            gamma_face: 2.0,
            joint_weights: None,
            metric_scale: 2000.0,
            stages: vec![
                StageConfig {
                    iterations: 100,
                    lambda_bp: 1.0,
                    lambda_hp: 0.0,
                    detail_gamma_scale: 1.0,
                    free_detail_joints: false,
                    per_frame: false,
                },
                StageConfig {
                    iterations: 150,
                    lambda_bp: 0.5,
                    lambda_hp: 1.0,
                    detail_gamma_scale: 1.0,
                    free_detail_joints: true,
                    per_frame: true,
                },
                StageConfig {
                    iterations: 200,
                    lambda_bp: 0.2,
                    lambda_hp: 1.0,
                    detail_gamma_scale: 2.0,
                    free_detail_joints: true,
                    per_frame: false,
                },
            ],
            tolerance: 1e-9,
            prior_dim: 32,
            prior_seed: 0,
            init_depth: 2.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("rho_2d", self.rho_2d),
            ("rho_3d", self.rho_3d),
            ("metric_scale", self.metric_scale),
            ("init_depth", self.init_depth),
        ];
        for (name, v) in scalars {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        let weights = [self.gamma_body, self.gamma_hand, self.gamma_face, self.tolerance];
        let stage_weights = self.stages.iter().flat_map(|s| [s.lambda_bp, s.lambda_hp, s.detail_gamma_scale]);
        let joint = self.joint_weights.iter().flatten().copied();
        if weights.into_iter().chain(stage_weights).chain(joint).any(|w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Validation("fit weights must be finite and non-negative".into()));
        }
        if self.stages.len() != 3 {
            return Err(Error::Validation(format!("expected 3 fitting stages, got {}", self.stages.len())));
        }
        Ok(())
    }

    /// Keypoint weight per joint, with hand and face scaled by `detail`.
    pub fn gammas(&self, model: &BodyModel, detail: f64) -> Result<Vec<f64>> {
        let k = model.num_joints();
        if let Some(w) = &self.joint_weights {
            if w.len() != k {
                return Err(Error::dimension("joint_weights", k, w.len()));
            }
        }
        Ok((0..k)
            .map(|j| {
                let part = model.joint_parts()[j];
                let base = match (&self.joint_weights, part) {
                    (Some(w), _) => w[j],
                    (None, Part::Body) => self.gamma_body,
                    (None, Part::Hand) => self.gamma_hand,
                    (None, Part::Face) => self.gamma_face,
                };
                if part == Part::Body {
                    base
                } else {
                    base * detail
                }
            })
            .collect())
    }
}

/// Posed joint locations in the camera frame.
pub fn posed_joints(model: &BodyModel, beta: &[f64], pose: &PoseParams) -> Result<Vec<Vector3<f64>>> {
    let rest = model.joints_for_shape(beta)?;
    let transforms = model.forward_kinematics(&rest, pose)?;
    Ok(rest.iter().zip(&transforms).map(|(j, t)| t.apply(j)).collect())
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// 2D term; gradient accumulated into `d` when given. Returns the value and
/// the number of weighted joints skipped for lying behind the camera.
fn term_2d(
    posed: &[Vector3<f64>],
    det: &FrameDetections,
    gamma: &[f64],
    rho: f64,
    mut d: Option<&mut [Vector3<f64>]>,
) -> (f64, usize) {
    let cam = &det.camera;
    let mut value = 0.0;
    let mut behind = 0;
    for (k, kp) in det.keypoints2d.iter().enumerate() {
        let w = gamma[k] * kp[2];
        if w == 0.0 {
            continue;
        }
        let p = posed[k];
        let Some([u, v]) = cam.project(&p) else {
            behind += 1;
            continue;
        };
        let (ru, rv) = (u - kp[0], v - kp[1]);
        let (psi, dpsi) = gm(ru * ru + rv * rv, rho);
        value += w * psi;
        if let Some(d) = d.as_deref_mut() {
            let (gu, gv) = (2.0 * w * dpsi * ru, 2.0 * w * dpsi * rv);
            let iz = 1.0 / p.z;
            d[k] += Vector3::new(
                gu * cam.fx * iz,
                gv * cam.fy * iz,
                -(gu * cam.fx * p.x + gv * cam.fy * p.y) * iz * iz,
            );
        }
    }
    (value, behind)
}

fn term_body3d(
    posed: &[Vector3<f64>],
    det: &FrameDetections,
    sets: &JointSets,
    cfg: &FitConfig,
    weight: f64,
    mut d: Option<&mut [Vector3<f64>]>,
) -> f64 {
    let s2 = cfg.metric_scale * cfg.metric_scale;
    let mut value = 0.0;
    for (target, &k) in det.body_joints3d.iter().zip(&sets.body) {
        let r = posed[k] - v3(target);
        let (psi, dpsi) = gm(r.norm_squared(), cfg.rho_3d);
        value += s2 * psi;
        if let Some(d) = d.as_deref_mut() {
            d[k] += r * (2.0 * weight * s2 * dpsi);
        }
    }
    value
}

fn term_hand_z(
    posed: &[Vector3<f64>],
    det: &FrameDetections,
    sets: &JointSets,
    cfg: &FitConfig,
    weight: f64,
    mut d: Option<&mut [Vector3<f64>]>,
) -> f64 {
    let s2 = cfg.metric_scale * cfg.metric_scale;
    let mut value = 0.0;
    for (target, &k) in det.hand_joints3d.iter().zip(&sets.hand) {
        let r = posed[k].z - target[2];
        let (psi, dpsi) = gm(r * r, cfg.rho_3d);
        value += s2 * psi;
        if let Some(d) = d.as_deref_mut() {
            d[k].z += 2.0 * weight * s2 * dpsi * r;
        }
    }
    value
}

/// Value of the 2D term and the count of weighted joints behind the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss2d {
    pub value: f64,
    pub behind_camera: usize,
}

fn check_frame(model: &BodyModel, det: &FrameDetections) -> Result<()> {
    det.validate(model)
}

/// Robust keypoint reprojection term with the base (stage-independent)
/// joint weights.
pub fn loss_2d(
    model: &BodyModel,
    beta: &[f64],
    pose: &PoseParams,
    det: &FrameDetections,
    cfg: &FitConfig,
) -> Result<Loss2d> {
    check_frame(model, det)?;
    let posed = posed_joints(model, beta, pose)?;
    let gamma = cfg.gammas(model, 1.0)?;
    let (value, behind_camera) = term_2d(&posed, det, &gamma, cfg.rho_2d, None);
    Ok(Loss2d { value, behind_camera })
}

/// Robust 3D body-joint term plus `|eta|^2`. Frames without 3D body joints
/// contribute the regularizer only.
pub fn loss_body_prior(
    model: &BodyModel,
    beta: &[f64],
    pose: &PoseParams,
    eta: &[f64],
    det: &FrameDetections,
    cfg: &FitConfig,
) -> Result<f64> {
    check_frame(model, det)?;
    let posed = posed_joints(model, beta, pose)?;
    let sets = JointSets::new(model);
    Ok(term_body3d(&posed, det, &sets, cfg, 1.0, None) + eta.iter().map(|e| e * e).sum::<f64>())
}

/// Robust hand term on depth differences only.
pub fn loss_hand_prior(
    model: &BodyModel,
    beta: &[f64],
    pose: &PoseParams,
    det: &FrameDetections,
    cfg: &FitConfig,
) -> Result<f64> {
    check_frame(model, det)?;
    let posed = posed_joints(model, beta, pose)?;
    let sets = JointSets::new(model);
    Ok(term_hand_z(&posed, det, &sets, cfg, 1.0, None))
}

/// Stage-specific weighting of the three terms.
#[derive(Debug, Clone)]
struct StageWeights {
    gamma: Vec<f64>,
    lambda_bp: f64,
    lambda_hp: f64,
}

/// Flat parameter layout: shared `beta`, then per frame
/// `[eta, root rotations, translation, detail rotations]`.
#[derive(Debug, Clone)]
struct Layout {
    num_shape: usize,
    num_eta: usize,
    roots: usize,
    detail: usize,
    frames: usize,
}

impl Layout {
    fn per_frame(&self) -> usize {
        self.num_eta + 3 * self.roots + 3 + 3 * self.detail
    }

    fn len(&self) -> usize {
        self.num_shape + self.frames * self.per_frame()
    }

    fn frame(&self, f: usize) -> usize {
        self.num_shape + f * self.per_frame()
    }

    fn eta(&self, f: usize) -> std::ops::Range<usize> {
        let o = self.frame(f);
        o..o + self.num_eta
    }

    fn root(&self, f: usize, i: usize) -> usize {
        self.frame(f) + self.num_eta + 3 * i
    }

    fn translation(&self, f: usize) -> usize {
        self.frame(f) + self.num_eta + 3 * self.roots
    }

    fn detail(&self, f: usize, i: usize) -> usize {
        self.translation(f) + 3 + 3 * i
    }

    /// Indices optimized in a stage.
    fn active(&self, free_detail: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.num_shape).collect();
        for f in 0..self.frames {
            let end = if free_detail { self.frame(f) + self.per_frame() } else { self.detail(f, 0) };
            idx.extend(self.frame(f)..end);
        }
        idx
    }
}

struct Problem<'a> {
    model: &'a BodyModel,
    decoder: &'a dyn PriorDecoder,
    frames: Vec<&'a FrameDetections>,
    sets: JointSets,
    layout: Layout,
    cfg: &'a FitConfig,
}

impl Problem<'_> {
    fn pose(&self, x: &[f64], f: usize) -> PoseParams {
        let l = &self.layout;
        let mut theta = vec![0.0; 3 * self.model.num_joints()];
        let decoded = self.decoder.decode(&x[l.eta(f)]);
        for (i, &k) in self.sets.decoded.iter().enumerate() {
            theta[3 * k..3 * k + 3].copy_from_slice(&decoded[3 * i..3 * i + 3]);
        }
        for (i, &k) in self.sets.roots.iter().enumerate() {
            let o = l.root(f, i);
            theta[3 * k..3 * k + 3].copy_from_slice(&x[o..o + 3]);
        }
        for (i, &k) in self.sets.detail.iter().enumerate() {
            let o = l.detail(f, i);
            theta[3 * k..3 * k + 3].copy_from_slice(&x[o..o + 3]);
        }
        let t = l.translation(f);
        PoseParams::from_flat(&theta, Vector3::new(x[t], x[t + 1], x[t + 2]))
    }

    /// Objective and gradient over the full parameter vector.
    fn eval(&self, x: &[f64], w: &StageWeights, grad: &mut [f64]) -> Result<f64> {
        let l = &self.layout;
        let model = self.model;
        let beta = &x[..l.num_shape];
        let rest = model.joints_for_shape(beta)?;
        let k = model.num_joints();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut d_rest = vec![Vector3::zeros(); k];
        let mut total = 0.0;
        for (f, det) in self.frames.iter().enumerate() {
            let pose = self.pose(x, f);
            let (transforms, jac) = model.forward_kinematics_jacobian(&rest, &pose)?;
            let posed: Vec<Vector3<f64>> = rest.iter().zip(&transforms).map(|(j, t)| t.apply(j)).collect();
            let mut d = vec![Vector3::zeros(); k];
            let (v2, _) = term_2d(&posed, det, &w.gamma, self.cfg.rho_2d, Some(&mut d));
            let vb = term_body3d(&posed, det, &self.sets, self.cfg, w.lambda_bp, Some(&mut d));
            let vh = term_hand_z(&posed, det, &self.sets, self.cfg, w.lambda_hp, Some(&mut d));
            let eta = &x[l.eta(f)];
            let reg: f64 = eta.iter().map(|e| e * e).sum();
            total += v2 + w.lambda_bp * (vb + reg) + w.lambda_hp * vh;

            let (d_theta, d_j) = jac.pullback_posed_joints(&rest, &transforms, &d);
            for (a, b) in d_rest.iter_mut().zip(&d_j) {
                *a += b;
            }
            let t = l.translation(f);
            let dt: Vector3<f64> = d.iter().sum();
            grad[t..t + 3].copy_from_slice(dt.as_slice());
            for (i, &j) in self.sets.roots.iter().enumerate() {
                let o = l.root(f, i);
                grad[o..o + 3].copy_from_slice(&d_theta[3 * j..3 * j + 3]);
            }
            for (i, &j) in self.sets.detail.iter().enumerate() {
                let o = l.detail(f, i);
                grad[o..o + 3].copy_from_slice(&d_theta[3 * j..3 * j + 3]);
            }
            let d_dec: Vec<f64> = self.sets.decoded.iter().flat_map(|&j| d_theta[3 * j..3 * j + 3].to_vec()).collect();
            let d_eta = self.decoder.backward(eta, &d_dec);
            for ((g, de), e) in grad[l.eta(f)].iter_mut().zip(&d_eta).zip(eta) {
                *g = de + 2.0 * w.lambda_bp * e;
            }
        }
        let nb = l.num_shape;
        let basis = model.joint_shape_basis();
        for (j, g) in grad[..nb].iter_mut().enumerate() {
            *g = (0..k)
                .flat_map(|kk| (0..3).map(move |c| (kk, c)))
                .map(|(kk, c)| d_rest[kk][c] * basis[(kk * 3 + c) * nb + j])
                .sum();
        }
        Ok(total)
    }
}

/// Initial per-frame poses and shape for [`fit_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitInit {
    /// One entry per input frame.
    pub poses: Vec<PoseFile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    /// Objective before the stage and after every accepted step.
    pub values: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Fitted pose per input frame; `None` for skipped frames.
    pub poses: Vec<Option<PoseFile>>,
    pub beta: Vec<f64>,
    /// Frames without any usable detection.
    pub skipped: Vec<usize>,
    pub stages: Vec<StageReport>,
    /// Weighted keypoints that fell behind the camera in the final state.
    pub behind_camera: usize,
    pub missing_body3d: Vec<usize>,
    pub missing_hand3d: Vec<usize>,
}

/// Decoder for the model's non-root body joints built from the config.
pub fn default_decoder(model: &BodyModel, cfg: &FitConfig) -> Result<LinearDecoder> {
    let sets = JointSets::new(model);
    LinearDecoder::random_orthogonal(cfg.prior_dim, 3 * sets.decoded.len(), cfg.prior_seed)
}

/// Fit per-frame poses and one shared shape to a sequence of detections
/// with the three-stage schedule.
pub fn fit_sequence(
    frames: &[FrameDetections],
    model: &BodyModel,
    decoder: &dyn PriorDecoder,
    cfg: &FitConfig,
    init: Option<&FitInit>,
) -> Result<FitReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Validation("fitting needs at least one frame".into()));
    }
    let sets = JointSets::new(model);
    if decoder.output_dim() != 3 * sets.decoded.len() {
        return Err(Error::dimension("prior decoder output", 3 * sets.decoded.len(), decoder.output_dim()));
    }
    if let Some(init) = init {
        if init.poses.len() != frames.len() {
            return Err(Error::dimension("initial poses", frames.len(), init.poses.len()));
        }
        for p in &init.poses {
            p.validate(model)?;
        }
    }
    for det in frames {
        det.validate(model)?;
    }
    let used: Vec<usize> = (0..frames.len()).filter(|&i| !frames[i].is_empty()).collect();
    let skipped: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].is_empty()).collect();
    if used.is_empty() {
        return Err(Error::Validation("no frame has usable detections".into()));
    }
    for &i in &skipped {
        warn!("frame {i}: no detections, skipped");
    }
    let missing_body3d: Vec<usize> = used.iter().copied().filter(|&i| frames[i].body_joints3d.is_empty()).collect();
    let missing_hand3d: Vec<usize> = used.iter().copied().filter(|&i| frames[i].hand_joints3d.is_empty()).collect();

    let layout = Layout {
        num_shape: model.num_shape(),
        num_eta: decoder.embedding_dim(),
        roots: sets.roots.len(),
        detail: sets.detail.len(),
        frames: used.len(),
    };
    let problem = Problem {
        model,
        decoder,
        frames: used.iter().map(|&i| &frames[i]).collect(),
        sets,
        layout,
        cfg,
    };
    let mut x = initial_vector(&problem, &used, init)?;

    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (s, stage) in cfg.stages.iter().enumerate() {
        let weights = StageWeights {
            gamma: cfg.gammas(model, stage.detail_gamma_scale)?,
            lambda_bp: stage.lambda_bp,
            lambda_hp: stage.lambda_hp,
        };
        let report = if stage.per_frame {
            run_per_frame(&problem, &mut x, &weights, stage)?
        } else {
            let active = problem.layout.active(stage.free_detail_joints);
            let r = run_lbfgs(&problem, &mut x, &weights, &active, stage.iterations, cfg.tolerance)?;
            StageReport {
                values: r.values,
                status: r.status,
                iterations: r.iterations,
            }
        };
        debug!(
            "stage {}: {} iterations, objective {:.6e} -> {:.6e} ({:?})",
            s + 1,
            report.iterations,
            report.values[0],
            report.values.last().copied().unwrap_or(f64::NAN),
            report.status
        );
        if report.status == Status::LineSearchFailed {
            warn!("stage {}: line search failed, keeping best iterate", s + 1);
        }
        stages.push(report);
    }

    let beta = x[..model.num_shape()].to_vec();
    let mut poses = vec![None; frames.len()];
    let mut behind_camera = 0;
    let gamma = cfg.gammas(model, 1.0)?;
    for (f, &i) in used.iter().enumerate() {
        let pose = problem.pose(&x, f);
        if !pose.is_finite() {
            return Err(Error::Numerical(format!("frame {i}: fitted pose is not finite")));
        }
        let posed = posed_joints(model, &beta, &pose)?;
        behind_camera += term_2d(&posed, &frames[i], &gamma, cfg.rho_2d, None).1;
        let psi = init.map_or_else(|| vec![0.0; model.num_expression()], |init| init.poses[i].psi.clone());
        poses[i] = Some(PoseFile::from_parts(&pose, &beta, &psi));
    }
    if behind_camera > 0 {
        warn!("{behind_camera} weighted keypoints lie behind the camera");
    }
    Ok(FitReport {
        poses,
        beta,
        skipped,
        stages,
        behind_camera,
        missing_body3d,
        missing_hand3d,
    })
}

/// Diagonal of the Hessian restricted to `active`, by central differences
/// of the analytic gradient.
fn hessian_diagonal(problem: &Problem, x: &[f64], weights: &StageWeights, active: &[usize]) -> Result<Vec<f64>> {
    let h = 1e-6;
    let mut gp = vec![0.0; x.len()];
    let mut gm = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    active
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            problem.eval(&probe, weights, &mut gp)?;
            probe[i] = x[i] - h;
            problem.eval(&probe, weights, &mut gm)?;
            probe[i] = x[i];
            Ok((gp[i] - gm[i]) / (2.0 * h))
        })
        .collect()
}

/// Minimize over the `active` entries of `x` in place.
///
/// The optimizer works on `z_i = sqrt(d_i) x_i` with `d` the Hessian
/// diagonal at the start point: translations and root rotations are orders
/// of magnitude stiffer than distal joints, and plain L-BFGS crawls on the
/// resulting spread of curvatures.
fn run_lbfgs(
    problem: &Problem,
    x: &mut [f64],
    weights: &StageWeights,
    active: &[usize],
    iterations: usize,
    tolerance: f64,
) -> Result<LbfgsResult> {
    let diag = hessian_diagonal(problem, x, weights, active)?;
    let top = diag.iter().fold(0.0f64, |m, d| m.max(*d));
    let floor = (top * 1e-2).max(1e-12);
    let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.abs().max(floor).sqrt()).collect();

    let base = x.to_vec();
    let mut full_grad = vec![0.0; x.len()];
    let mut failure: Option<Error> = None;
    let objective = |z: &[f64], g: &mut [f64]| -> f64 {
        let mut full = base.clone();
        for ((&i, v), s) in active.iter().zip(z).zip(&scale) {
            full[i] = v * s;
        }
        match problem.eval(&full, weights, &mut full_grad) {
            Ok(v) => {
                for ((gi, &i), s) in g.iter_mut().zip(active).zip(&scale) {
                    *gi = full_grad[i] * s;
                }
                v
            }
            Err(e) => {
                failure.get_or_insert(e);
                g.iter_mut().for_each(|v| *v = f64::NAN);
                f64::NAN
            }
        }
    };
    let lcfg = LbfgsConfig {
        max_iters: iterations,
        tolerance,
        ..LbfgsConfig::default()
    };
    let z0: Vec<f64> = active.iter().zip(&scale).map(|(&i, s)| x[i] / s).collect();
    let result = minimize(objective, &z0, &lcfg)?;
    if let Some(e) = failure {
        return Err(e);
    }
    for ((&i, v), s) in active.iter().zip(&result.x).zip(&scale) {
        x[i] = v * s;
    }
    Ok(result)
}

/// One optimization per frame with the shared shape held fixed. The reported
/// trajectory is the sequence objective after every accepted step.
fn run_per_frame(problem: &Problem, x: &mut [f64], weights: &StageWeights, stage: &StageConfig) -> Result<StageReport> {
    let l = &problem.layout;
    let mut scratch = vec![0.0; x.len()];
    let mut total = problem.eval(x, weights, &mut scratch)?;
    let mut values = vec![total];
    let mut status = Status::Converged;
    let mut iterations = 0;
    for f in 0..l.frames {
        let sub = Problem {
            model: problem.model,
            decoder: problem.decoder,
            frames: vec![problem.frames[f]],
            sets: problem.sets.clone(),
            layout: Layout { frames: 1, ..l.clone() },
            cfg: problem.cfg,
        };
        let range = l.frame(f)..l.frame(f) + l.per_frame();
        let mut xs: Vec<f64> = x[..l.num_shape].iter().chain(&x[range.clone()]).copied().collect();
        let active: Vec<usize> = sub
            .layout
            .active(stage.free_detail_joints)
            .into_iter()
            .filter(|&i| i >= l.num_shape)
            .collect();
        let r = run_lbfgs(&sub, &mut xs, weights, &active, stage.iterations, problem.cfg.tolerance)?;
        x[range].copy_from_slice(&xs[l.num_shape..]);
        for v in &r.values[1..] {
            values.push(total + (v - r.values[0]));
        }
        total += r.f - r.values[0];
        iterations += r.iterations;
        status = match (status, r.status) {
            (Status::LineSearchFailed, _) | (_, Status::LineSearchFailed) => Status::LineSearchFailed,
            (Status::MaxIterations, _) | (_, Status::MaxIterations) => Status::MaxIterations,
            _ => Status::Converged,
        };
    }
    Ok(StageReport {
        values,
        status,
        iterations,
    })
}

fn initial_vector(p: &Problem, used: &[usize], init: Option<&FitInit>) -> Result<Vec<f64>> {
    let l = &p.layout;
    let model = p.model;
    let mut x = vec![0.0; l.len()];
    if let Some(init) = init {
        let n = used.len() as f64;
        for &i in used {
            for (b, v) in x[..l.num_shape].iter_mut().zip(&init.poses[i].beta) {
                *b += v / n;
            }
        }
    }
    let rest = model.joints_for_shape(&x[..l.num_shape])?;
    for (f, &i) in used.iter().enumerate() {
        let det = p.frames[f];
        if let Some(init) = init {
            let pose = init.poses[i].pose();
            let flat = pose.flat();
            let dec: Vec<f64> = p.sets.decoded.iter().flat_map(|&k| flat[3 * k..3 * k + 3].to_vec()).collect();
            let eta = p.decoder.encode(&dec);
            x[l.eta(f)].copy_from_slice(&eta);
            for (j, &k) in p.sets.roots.iter().enumerate() {
                let o = l.root(f, j);
                x[o..o + 3].copy_from_slice(&flat[3 * k..3 * k + 3]);
            }
            for (j, &k) in p.sets.detail.iter().enumerate() {
                let o = l.detail(f, j);
                x[o..o + 3].copy_from_slice(&flat[3 * k..3 * k + 3]);
            }
            let t = l.translation(f);
            x[t..t + 3].copy_from_slice(pose.global_translation.as_slice());
            continue;
        }
        // Place the first root at its 3D detection, or back-project its
        // keypoint to the default depth.
        let root = p.sets.roots[0];
        let body_slot = p.sets.body.iter().position(|&k| k == root);
        let target = match (body_slot, det.body_joints3d.is_empty()) {
            (Some(s), false) => v3(&det.body_joints3d[s]),
            _ => {
                let z = p.cfg.init_depth;
                let cam = &det.camera;
                match det.keypoints2d.get(root).filter(|kp| kp[2] > 0.0) {
                    Some(kp) => Vector3::new((kp[0] - cam.cx) / cam.fx * z, (kp[1] - cam.cy) / cam.fy * z, z),
                    None => Vector3::new(0.0, 0.0, z),
                }
            }
        };
        let t = l.translation(f);
        x[t..t + 3].copy_from_slice((target - rest[root]).as_slice());
    }
    Ok(x)
}

/// Detections generated from a known pose: keypoints with Gaussian pixel
/// noise and confidence 1 (0 behind the camera), exact 3D joints.
pub fn synthesize_detections<R: Rng>(
    model: &BodyModel,
    beta: &[f64],
    pose: &PoseParams,
    camera: Intrinsics,
    pixel_noise: f64,
    rng: &mut R,
) -> Result<FrameDetections> {
    let posed = posed_joints(model, beta, pose)?;
    let noise = Normal::new(0.0, pixel_noise.max(0.0))
        .map_err(|e| Error::Validation(format!("pixel noise {pixel_noise}: {e}")))?;
    let keypoints2d = posed
        .iter()
        .map(|p| match camera.project(p) {
            Some([u, v]) => [u + noise.sample(rng), v + noise.sample(rng), 1.0],
            None => [0.0, 0.0, 0.0],
        })
        .collect();
    let sets = JointSets::new(model);
    let pick = |ids: &[usize]| ids.iter().map(|&k| [posed[k].x, posed[k].y, posed[k].z]).collect();
    Ok(FrameDetections {
        keypoints2d,
        body_joints3d: pick(&sets.body),
        hand_joints3d: pick(&sets.hand),
        camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::synthetic::{cylinder_arm, FINGER_A, WRIST};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Intrinsics {
        Intrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 256.0,
            cy: 256.0,
        }
    }

    fn pose(k: usize) -> PoseParams {
        let mut p = PoseParams::rest(k);
        p.joint_rotations[0] = Vector3::new(0.1, -0.2, 0.3);
        p.joint_rotations[1] = Vector3::new(0.0, 0.4, -0.3);
        p.joint_rotations[2] = Vector3::new(0.2, 0.1, 0.2);
        p.joint_rotations[3] = Vector3::new(0.0, 0.0, 0.3);
        p.global_translation = Vector3::new(-0.3, 0.1, 2.0);
        p
    }

    fn exact(m: &BodyModel, beta: &[f64], p: &PoseParams) -> FrameDetections {
        synthesize_detections(m, beta, p, camera(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn geman_mcclure_examples() {
        assert_eq!(geman_mcclure(&[0.0, 0.0], 2.0), 0.0);
        assert_relative_eq!(geman_mcclure(&[3.0, 4.0], 5.0), 12.5, epsilon = 1e-12);
        assert!((geman_mcclure(&[1e9], 3.0) - 9.0).abs() < 1e-6);
        let mut prev = 0.0;
        for i in 0..100 {
            let v = geman_mcclure(&[i as f64 * 0.1], 1.5);
            assert!(v >= prev && v <= 2.25);
            prev = v;
        }
    }

    #[test]
    fn loss_2d_examples() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let p = pose(m.num_joints());
        let cfg = FitConfig::default();
        let mut det = exact(&m, &beta, &p);
        assert_eq!(loss_2d(&m, &beta, &p, &det, &cfg).unwrap().value, 0.0);

        // One body joint offset by (3, 4) px, unit weights.
        let cfg1 = FitConfig {
            joint_weights: Some(vec![1.0; m.num_joints()]),
            ..cfg.clone()
        };
        det.keypoints2d[WRIST][0] += 3.0;
        det.keypoints2d[WRIST][1] += 4.0;
        let v = loss_2d(&m, &beta, &p, &det, &cfg1).unwrap().value;
        assert_relative_eq!(v, geman_mcclure(&[3.0, 4.0], 100.0), max_relative = 1e-9);

        for kp in &mut det.keypoints2d {
            kp[2] = 0.0;
        }
        assert_eq!(loss_2d(&m, &beta, &p, &det, &cfg1).unwrap().value, 0.0);
    }

    #[test]
    fn zero_confidence_joints_are_ignored() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let p = pose(m.num_joints());
        let cfg = FitConfig::default();
        let mut det = synthesize_detections(&m, &beta, &p, camera(), 2.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        det.keypoints2d[FINGER_A][2] = 0.0;
        let before = loss_2d(&m, &beta, &p, &det, &cfg).unwrap().value;
        det.keypoints2d[FINGER_A][0] += 1e4;
        assert_eq!(loss_2d(&m, &beta, &p, &det, &cfg).unwrap().value, before);
    }

    #[test]
    fn behind_camera_counted() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let mut p = pose(m.num_joints());
        let det = exact(&m, &beta, &p);
        p.global_translation.z = -5.0;
        let l = loss_2d(&m, &beta, &p, &det, &FitConfig::default()).unwrap();
        assert_eq!((l.value, l.behind_camera), (0.0, m.num_joints()));
    }

    #[test]
    fn body_prior_examples() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let rest = PoseParams::rest(m.num_joints());
        let cfg = FitConfig {
            metric_scale: 1.0,
            ..FitConfig::default()
        };
        let det = exact(&m, &beta, &rest);
        let mut eta = vec![0.0; 32];
        assert_eq!(loss_body_prior(&m, &beta, &rest, &eta, &det, &cfg).unwrap(), 0.0);
        eta[0] = 1.0;
        assert_eq!(loss_body_prior(&m, &beta, &rest, &eta, &det, &cfg).unwrap(), 1.0);

        let mut moved = det.clone();
        let offsets = [[0.01, 0.0, -0.02], [0.3, 0.1, 0.0], [0.0, 0.0, 0.05]];
        for (j, o) in moved.body_joints3d.iter_mut().zip(offsets) {
            for c in 0..3 {
                j[c] += o[c];
            }
        }
        let oracle: f64 = offsets.iter().map(|o| geman_mcclure(o, 0.1)).sum();
        let v = loss_body_prior(&m, &beta, &rest, &[0.0], &moved, &cfg).unwrap();
        assert_relative_eq!(v, oracle, max_relative = 1e-9);
    }

    #[test]
    fn hand_prior_is_depth_only() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let p = pose(m.num_joints());
        let cfg = FitConfig {
            metric_scale: 1.0,
            ..FitConfig::default()
        };
        let mut det = exact(&m, &beta, &p);
        assert!(loss_hand_prior(&m, &beta, &p, &det, &cfg).unwrap().abs() < 1e-25);
        det.hand_joints3d[0][0] += 0.3;
        det.hand_joints3d[1][1] -= 0.2;
        assert!(loss_hand_prior(&m, &beta, &p, &det, &cfg).unwrap().abs() < 1e-25);
        det.hand_joints3d[1][2] += 0.04;
        let v = loss_hand_prior(&m, &beta, &p, &det, &cfg).unwrap();
        assert_relative_eq!(v, geman_mcclure(&[0.04], 0.1), max_relative = 1e-9);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let m = cylinder_arm();
        let beta = vec![0.1, -0.2, 0.3, 0.2];
        let p = pose(m.num_joints());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = [
            synthesize_detections(&m, &beta, &p, camera(), 25.0, &mut rng).unwrap(),
            synthesize_detections(&m, &beta, &p, camera(), 25.0, &mut rng).unwrap(),
        ];
        let mut frames = frames.to_vec();
        for j in &mut frames[1].body_joints3d {
            j[2] += 0.05;
        }
        frames[0].hand_joints3d[0][2] -= 0.03;
        let cfg = FitConfig::default();
        let decoder = default_decoder(&m, &cfg).unwrap();
        let sets = JointSets::new(&m);
        let layout = Layout {
            num_shape: m.num_shape(),
            num_eta: decoder.embedding_dim(),
            roots: sets.roots.len(),
            detail: sets.detail.len(),
            frames: 2,
        };
        let problem = Problem {
            model: &m,
            decoder: &decoder,
            frames: frames.iter().collect(),
            sets,
            layout,
            cfg: &cfg,
        };
        let n = problem.layout.len();
        let x: Vec<f64> = (0..n).map(|i| 0.05 * ((i as f64) * 1.7).sin()).collect();
        let mut x = x;
        for f in 0..2 {
            x[problem.layout.translation(f) + 2] = 2.0;
        }
        let w = StageWeights {
            gamma: cfg.gammas(&m, 2.0).unwrap(),
            lambda_bp: 0.7,
            lambda_hp: 1.3,
        };
        let mut g = vec![0.0; n];
        let f0 = problem.eval(&x, &w, &mut g).unwrap();
        let mut scratch = vec![0.0; n];
        let h = 1e-6;
        // Central differences carry roughly eps * |f| / h of roundoff.
        let floor = 1e-2 + 1e-9 * f0.abs() / h;
        for i in 0..n {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (problem.eval(&a, &w, &mut scratch).unwrap() - problem.eval(&b, &w, &mut scratch).unwrap()) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(floor);
            assert!(err < 1e-5, "param {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn perfect_init_stays_put_and_never_increases() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let truth = pose(m.num_joints());
        let det = exact(&m, &beta, &truth);
        let cfg = FitConfig::default();
        let decoder = default_decoder(&m, &cfg).unwrap();
        let init = FitInit {
            poses: vec![PoseFile::from_parts(&truth, &beta, &[0.0, 0.0])],
        };
        let r = fit_sequence(&[det.clone()], &m, &decoder, &cfg, Some(&init)).unwrap();
        for s in &r.stages {
            assert!(s.values.windows(2).all(|w| w[1] <= w[0]), "{:?}", s.values);
        }
        let fitted = r.poses[0].as_ref().unwrap();
        let joints = posed_joints(&m, &fitted.beta, &fitted.pose()).unwrap();
        let expect = posed_joints(&m, &beta, &truth).unwrap();
        // The |eta|^2 term pulls the optimum a few microns toward rest.
        for (a, b) in joints.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-4, "{}", (a - b).norm());
        }
    }

    #[test]
    fn empty_frames_are_skipped() {
        let m = cylinder_arm();
        let beta = vec![0.0; m.num_shape()];
        let truth = pose(m.num_joints());
        let det = exact(&m, &beta, &truth);
        let empty = FrameDetections {
            keypoints2d: vec![[0.0, 0.0, 0.0]; m.num_joints()],
            body_joints3d: Vec::new(),
            hand_joints3d: Vec::new(),
            camera: camera(),
        };
        let cfg = FitConfig::default();
        let decoder = default_decoder(&m, &cfg).unwrap();
        let r = fit_sequence(&[empty, det], &m, &decoder, &cfg, None).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert!(r.poses[0].is_none() && r.poses[1].is_some());
    }

    #[test]
    fn detections_round_trip_and_validate() {
        let m = cylinder_arm();
        let det = exact(&m, &[0.0; 4], &pose(m.num_joints()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        det.save(&path).unwrap();
        assert_eq!(FrameDetections::load(&path).unwrap(), det);
        let mut bad = det.clone();
        bad.keypoints2d[0][2] = 1.5;
        assert!(bad.validate(&m).is_err());
        bad = det;
        bad.body_joints3d.pop();
        assert!(bad.validate(&m).is_err());
    }
}
