//! Rendering posed avatars and scoring them against held-out frames.

use std::path::Path;

use ndarray::s;

use crate::avatar::GaussianAvatar;
use crate::bodymodel::io::PoseFile;
use crate::bodymodel::{BodyModel, Part};
use crate::error::{Error, Result};
use crate::objectives::{psnr, ssim, PerceptualScorer};
use crate::rasterizer::{rasterize, Camera, RenderOutput};

use super::dataset::Frame;

/// Relative padding added on every side of a region box.
pub const REGION_PADDING: f64 = 0.1;

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionBox {
    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, other: &RegionBox) -> bool {
        other.is_empty() || (self.x0 <= other.x0 && self.y0 <= other.y0 && other.x1 <= self.x1 && other.y1 <= self.y1)
    }
}

/// Evaluation regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    Hand,
    Face,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Full, Region::Hand, Region::Face];

    pub fn name(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::Hand => "hand",
            Region::Face => "face",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegionBoxes {
    pub full: RegionBox,
    pub hand: RegionBox,
    pub face: RegionBox,
}

impl RegionBoxes {
    pub fn get(&self, region: Region) -> RegionBox {
        match region {
            Region::Full => self.full,
            Region::Hand => self.hand,
            Region::Face => self.face,
        }
    }
}

#[derive(Clone, Copy)]
struct Bounds([f64; 4]);

impl Bounds {
    fn new() -> Self {
        Bounds([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY])
    }

    fn add(&mut self, u: f64, v: f64) {
        let b = &mut self.0;
        b[0] = b[0].min(u);
        b[1] = b[1].min(v);
        b[2] = b[2].max(u);
        b[3] = b[3].max(v);
    }

    /// Padded, clipped pixel box.
    fn to_box(self, padding: f64, camera: &Camera) -> RegionBox {
        let [xa, ya, xb, yb] = self.0;
        if !xa.is_finite() {
            return RegionBox::default();
        }
        let (px, py) = (padding * (xb - xa), padding * (yb - ya));
        let clip = |v: f64, hi: usize| v.clamp(0.0, hi as f64) as usize;
        RegionBox {
            x0: clip((xa - px).floor(), camera.width),
            y0: clip((ya - py).floor(), camera.height),
            x1: clip((xb + px).ceil() + 1.0, camera.width),
            y1: clip((yb + py).ceil() + 1.0, camera.height),
        }
    }
}

/// Boxes around the projected posed template vertices: all of them for
/// the full region, and the hand- and face-labeled ones. Each tight bound
/// is padded by `padding` of its size and clipped to the image; a region
/// with nothing on screen gets an empty box.
pub fn region_boxes(model: &BodyModel, pose: &PoseFile, camera: &Camera, padding: f64) -> Result<RegionBoxes> {
    let mesh = model.posed_mesh(&pose.beta, &pose.psi, &pose.pose())?;
    let (mut full, mut hand, mut face) = (Bounds::new(), Bounds::new(), Bounds::new());
    for (v, part) in mesh.vertices.iter().zip(model.part_labels()) {
        let view = camera.to_view(v);
        if view.z <= camera.near {
            continue;
        }
        let (u, w) = camera.project_view(&view);
        full.add(u, w);
        match part {
            Part::Hand => hand.add(u, w),
            Part::Face => face.add(u, w),
            Part::Body => {}
        }
    }
    Ok(RegionBoxes {
        full: full.to_box(padding, camera),
        hand: hand.to_box(padding, camera),
        face: face.to_box(padding, camera),
    })
}

/// Articulate the avatar into `pose` and rasterize it.
pub fn render_novel(
    avatar: &GaussianAvatar,
    model: &BodyModel,
    pose: &PoseFile,
    camera: &Camera,
    background: [f64; 3],
) -> Result<RenderOutput> {
    pose.validate(model)?;
    let art = avatar.articulate(model, &pose.pose(), &pose.beta, camera)?;
    Ok(rasterize(&art.scene, camera, background)?.0)
}

/// Scores over one image region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionScore {
    pub region: Region,
    pub psnr: f64,
    pub ssim: f64,
    /// Set when an external perceptual scorer was supplied.
    pub perceptual: Option<f64>,
    /// The region fell outside the image and was skipped; scores are NaN.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub id: String,
    /// Full, hand and face, in that order.
    pub regions: Vec<RegionScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScores>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl EvalReport {
    fn visible(&self, region: Region) -> Vec<&RegionScore> {
        self.frames
            .iter()
            .flat_map(|f| f.regions.iter())
            .filter(|r| r.region == region && !r.empty)
            .collect()
    }

    /// Mean `(psnr, ssim)` of a region over the frames where it is visible.
    pub fn mean(&self, region: Region) -> Option<(f64, f64)> {
        let hits = self.visible(region);
        if hits.is_empty() {
            return None;
        }
        let n = hits.len() as f64;
        Some((
            hits.iter().map(|r| r.psnr).sum::<f64>() / n,
            hits.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    fn mean_perceptual(&self, region: Region) -> Option<f64> {
        let hits: Vec<f64> = self.visible(region).iter().filter_map(|r| r.perceptual).collect();
        (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
    }

    /// Per-frame rows followed by `mean` rows; the perceptual column is
    /// empty without an external scorer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,region,psnr,ssim,perceptual,empty\n");
        for f in &self.frames {
            for r in &f.regions {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    f.id,
                    r.region.name(),
                    r.psnr,
                    r.ssim,
                    cell(r.perceptual),
                    r.empty
                ));
            }
        }
        for region in Region::ALL {
            if let Some((p, s)) = self.mean(region) {
                let lp = cell(self.mean_perceptual(region));
                out.push_str(&format!("mean,{},{p},{s},{lp},false\n", region.name()));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Render every frame at its pose and score the full, hand and face boxes.
/// Frames must be non-empty.
pub fn evaluate(
    avatar: &GaussianAvatar,
    model: &BodyModel,
    frames: &[Frame],
    camera: &Camera,
    background: [f64; 3],
    perceptual: Option<&dyn PerceptualScorer>,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Validation("no frames to evaluate".into()));
    }
    let mut report = EvalReport { frames: Vec::new() };
    for frame in frames {
        let render = render_novel(avatar, model, &frame.pose, camera, background)?;
        let boxes = region_boxes(model, &frame.pose, camera, REGION_PADDING)?;
        let mut regions = Vec::with_capacity(3);
        for region in Region::ALL {
            let b = boxes.get(region);
            if b.is_empty() {
                regions.push(RegionScore {
                    region,
                    psnr: f64::NAN,
                    ssim: f64::NAN,
                    perceptual: None,
                    empty: true,
                });
                continue;
            }
            let crop = s![b.y0..b.y1, b.x0..b.x1, ..];
            let (a, t) = (render.color.slice(crop), frame.image.slice(crop));
            let perceptual = match perceptual {
                Some(p) => Some(p.loss_and_grad(a, t)?.0),
                None => None,
            };
            regions.push(RegionScore {
                region,
                psnr: psnr(a, t)?,
                ssim: ssim(a, t)?,
                perceptual,
                empty: false,
            });
        }
        report.frames.push(FrameScores {
            id: frame.id.clone(),
            regions,
        });
    }
    Ok(report)
}
