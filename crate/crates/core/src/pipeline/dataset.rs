//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   camera.json          rasterizer camera (intrinsics, size, extrinsics)
//!   split.json           {"identity": "...", "train": [ids], "test": [ids]} (optional)
//!   images/000000.png    RGB frames
//!   masks/000000.png     foreground masks
//!   poses/000000.json    body parameters per frame
//!   detections/000000.json  keypoints and 3D joints (optional, used by fitting)
//! ```
//!
//! Frame ids are the zero-padded file stems of `images/`. Without
//! `split.json` every frame is a training frame.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::align::FrameDetections;
use crate::bodymodel::io::PoseFile;
use crate::bodymodel::BodyModel;
use crate::error::{read_json, write_json, Error, Result};
use crate::imaging;
use crate::rasterizer::Camera;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub identity: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub image: Array3<f64>,
    pub mask: Array2<f64>,
    pub pose: PoseFile,
    pub detections: Option<FrameDetections>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub identity: String,
    pub camera: Camera,
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

/// File name of frame `index`.
pub fn frame_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

pub fn pose_path(root: &Path, id: &str) -> PathBuf {
    root.join("poses").join(format!("{id}.json"))
}

pub fn detections_path(root: &Path, id: &str) -> PathBuf {
    root.join("detections").join(format!("{id}.json"))
}

/// Create the layout directories under `root`.
pub fn create_layout(root: &Path) -> Result<()> {
    for sub in ["images", "masks", "poses", "detections"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("missing file {}", path.display())))
    }
}

/// Sorted frame ids found in `root/images`.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("images");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load the camera and ids without reading any frame.
pub fn load_split(root: &Path) -> Result<(Camera, Split)> {
    let camera_file = root.join("camera.json");
    require(&camera_file)?;
    let camera = Camera::load(&camera_file)?;
    let split_file = root.join("split.json");
    let split = if split_file.is_file() {
        let mut s: Split = read_json(&split_file)?;
        s.train.sort();
        s.test.sort();
        s
    } else {
        Split {
            identity: String::new(),
            train: list_frames(root)?,
            test: Vec::new(),
        }
    };
    if split.identity.is_empty() {
        let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("subject");
        return Ok((
            camera,
            Split {
                identity: name.to_string(),
                ..split
            },
        ));
    }
    Ok((camera, split))
}

/// Load one frame, checking sizes against `camera` and the pose against
/// `model` when given.
pub fn load_frame(root: &Path, id: &str, camera: &Camera, model: Option<&BodyModel>) -> Result<Frame> {
    let (img_p, mask_p, pose_p, det_p) = (
        image_path(root, id),
        mask_path(root, id),
        pose_path(root, id),
        detections_path(root, id),
    );
    for p in [&img_p, &mask_p, &pose_p] {
        require(p)?;
    }
    let image = imaging::read_rgb(&img_p)?;
    let mask = imaging::read_mask(&mask_p)?;
    let (h, w) = (camera.height, camera.width);
    if image.dim() != (h, w, 3) {
        return Err(Error::Validation(format!(
            "{}: image is {:?}, camera expects {h}x{w}",
            img_p.display(),
            image.dim()
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::Validation(format!(
            "{}: mask is {:?}, camera expects {h}x{w}",
            mask_p.display(),
            mask.dim()
        )));
    }
    let pose = PoseFile::load(&pose_p)?;
    if let Some(m) = model {
        pose.validate(m)
            .map_err(|e| Error::Validation(format!("{}: {e}", pose_p.display())))?;
    }
    let detections = if det_p.is_file() { Some(FrameDetections::load(&det_p)?) } else { None };
    Ok(Frame {
        id: id.to_string(),
        image,
        mask,
        pose,
        detections,
    })
}

/// Load every frame of the dataset at `root`, in sorted id order.
pub fn load_dataset(root: &Path, model: Option<&BodyModel>) -> Result<Dataset> {
    let (camera, split) = load_split(root)?;
    if split.train.is_empty() {
        return Err(Error::Validation(format!("{}: no training frames", root.display())));
    }
    let load = |ids: &[String]| -> Result<Vec<Frame>> {
        ids.iter().map(|id| load_frame(root, id, &camera, model)).collect()
    };
    let train = load(&split.train)?;
    let test = load(&split.test)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        identity: split.identity,
        camera,
        train,
        test,
    })
}

/// Write `camera.json` and `split.json`.
pub fn write_manifest(root: &Path, camera: &Camera, split: &Split) -> Result<()> {
    write_json(&root.join("camera.json"), camera)?;
    write_json(&root.join("split.json"), split)
}
