//! Synthetic datasets rendered from a known ground-truth avatar on the
//! bundled cylinder-arm body.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{synthesize_detections, Intrinsics};
use crate::avatar::{logit, sh, AvatarConfig, GaussianAvatar};
use crate::bodymodel::io::PoseFile;
use crate::bodymodel::synthetic::cylinder_arm;
use crate::bodymodel::{BodyModel, Part, PoseParams};
use crate::error::{Error, Result};
use crate::imaging;
use crate::rasterizer::Camera;

use super::dataset::{
    create_layout, detections_path, frame_id, image_path, mask_path, pose_path, write_manifest, Split,
};
use super::eval::render_novel;

/// Directory (inside the dataset root) holding the ground-truth archive.
pub const GROUND_TRUTH_DIR: &str = "ground_truth";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train_frames: usize,
    pub test_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Standard deviation of the keypoint noise in pixels.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_frames: 24,
            test_frames: 8,
            width: 128,
            height: 128,
            seed: 0,
            pixel_noise: 1.0,
        }
    }
}

const GT_OPACITY: f64 = 0.95;
/// Camera distance to the arm root.
const DEPTH: f64 = 1.4;

fn part_color(part: Part, c: &Vector3<f64>) -> [f64; 3] {
    let tau = std::f64::consts::TAU;
    match part {
        Part::Body => {
            let band = 0.12 * (tau * c.x / 0.12).sin();
            let around = 0.08 * c.z.atan2(c.y).cos();
            [0.78 + band + around, 0.50 + band, 0.36 + around]
        }
        Part::Hand => {
            let t = 0.1 * (tau * c.y / 0.08).cos();
            [0.90 - t, 0.72, 0.60 + t]
        }
        Part::Face => [0.32, 0.54 + 0.1 * (tau * c.z / 0.1).sin(), 0.86],
    }
}

/// Ground-truth avatar: template Gaussians with a procedural color
/// pattern per part, high opacity and zeroed networks.
pub fn ground_truth_avatar(model: &BodyModel, beta: &[f64], seed: u64) -> Result<GaussianAvatar> {
    let cfg = AvatarConfig {
        sh_degree: 0,
        seed,
        ..AvatarConfig::default()
    };
    let mut avatar = GaussianAvatar::init_with_shape(model, beta, &cfg)?;
    for g in &mut avatar.gaussians {
        let color = part_color(g.part, &g.center);
        g.sh[0] = color.map(sh::dc_from_color);
        g.opacity = logit(GT_OPACITY);
    }
    Ok(avatar)
}

/// Camera looking down +z at the arm, sized to `cfg`.
pub fn synth_camera(cfg: &SynthConfig) -> Result<Camera> {
    let f = 1.5 * cfg.width.min(cfg.height) as f64;
    Camera::new(f, f, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0, cfg.width, cfg.height)
}

/// Random arm pose in front of [`synth_camera`].
pub fn random_pose<R: Rng>(num_joints: usize, rng: &mut R) -> PoseParams {
    let mut p = PoseParams::rest(num_joints);
    let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let limits = [0.25, 0.6, 0.4, 0.3, 0.3];
    for (r, l) in p.joint_rotations.iter_mut().zip(limits) {
        *r = v(l);
    }
    p.global_translation = Vector3::new(-0.3, 0.0, DEPTH) + v(0.03);
    p
}

/// Write a complete dataset to `root`: the body model, camera, split,
/// frames (24 train and 8 test by default) and the ground-truth archive.
pub fn synth(root: &Path, cfg: &SynthConfig) -> Result<GaussianAvatar> {
    if cfg.train_frames == 0 {
        return Err(Error::Validation("synthetic dataset needs at least one training frame".into()));
    }
    create_layout(root)?;
    let model = cylinder_arm();
    model.save(&root.join("model.json"))?;
    let camera = synth_camera(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let beta: Vec<f64> = (0..model.num_shape()).map(|_| rng.random_range(-0.3..0.3)).collect();
    let psi = vec![0.0; model.num_expression()];
    let avatar = ground_truth_avatar(&model, &beta, cfg.seed)?;
    let intrinsics = Intrinsics {
        fx: camera.fx,
        fy: camera.fy,
        cx: camera.cx,
        cy: camera.cy,
    };

    let total = cfg.train_frames + cfg.test_frames;
    let mut split = Split {
        identity: "cylinder-arm".into(),
        ..Split::default()
    };
    for k in 0..total {
        let id = frame_id(k);
        let pose = random_pose(model.num_joints(), &mut rng);
        let file = PoseFile::from_parts(&pose, &beta, &psi);
        let render = render_novel(&avatar, &model, &file, &camera, [0.0; 3])?;
        imaging::write_rgb(&image_path(root, &id), render.color.view())?;
        imaging::write_mask(&mask_path(root, &id), render.alpha.view())?;
        file.save(&pose_path(root, &id))?;
        synthesize_detections(&model, &beta, &pose, intrinsics, cfg.pixel_noise, &mut rng)?
            .save(&detections_path(root, &id))?;
        if k < cfg.train_frames {
            split.train.push(id);
        } else {
            split.test.push(id);
        }
    }
    write_manifest(root, &camera, &split)?;
    avatar.save_archive(&root.join(GROUND_TRUTH_DIR), &model)?;
    Ok(avatar)
}
