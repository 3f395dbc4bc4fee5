//! Avatar archive: one directory holding a versioned manifest, a copy of the
//! body model, the Gaussian arrays and the network checkpoints.
//!
//! ```text
//! manifest.json   {"format", "version", "sh_degree", "num_gaussians", "shape", "files"}
//! model.json      body model file
//! gaussians.json  {"centers", "rotations", "log_scales", "opacities", "sh", "parts"}
//! nets.json       {"encoding", "lbs_net", "pose_net", "conf_net"}
//! ```

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{sh, Gaussian, GaussianAvatar};
use crate::bodymodel::{BodyModel, Part};
use crate::error::{read_json, write_json, Error, Result};
use crate::nets::{Mlp, PosEncoding};

pub const ARCHIVE_VERSION: u32 = 1;
const FORMAT: &str = "gsavatar-archive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveFiles {
    pub model: String,
    pub gaussians: String,
    pub nets: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub version: u32,
    pub sh_degree: usize,
    pub num_gaussians: usize,
    pub shape: Vec<f64>,
    pub files: ArchiveFiles,
}

#[derive(Serialize, Deserialize)]
struct GaussianArrays {
    centers: Vec<[f64; 3]>,
    rotations: Vec<[f64; 4]>,
    log_scales: Vec<[f64; 3]>,
    opacities: Vec<f64>,
    sh: Vec<Vec<[f64; 3]>>,
    parts: Vec<Part>,
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    encoding: PosEncoding,
    lbs_net: Mlp,
    pose_net: Mlp,
    conf_net: Mlp,
}

fn arr(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl GaussianAvatar {
    /// Write the archive into `dir` (created if missing).
    pub fn save_archive(&self, dir: &Path, model: &BodyModel) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ArchiveManifest {
            format: FORMAT.into(),
            version: ARCHIVE_VERSION,
            sh_degree: self.sh_degree,
            num_gaussians: self.len(),
            shape: self.shape.clone(),
            files: ArchiveFiles {
                model: "model.json".into(),
                gaussians: "gaussians.json".into(),
                nets: "nets.json".into(),
            },
        };
        model.save(&dir.join(&manifest.files.model))?;
        let g = &self.gaussians;
        let arrays = GaussianArrays {
            centers: g.iter().map(|g| arr(&g.center)).collect(),
            rotations: g.iter().map(|g| g.rotation).collect(),
            log_scales: g.iter().map(|g| arr(&g.log_scale)).collect(),
            opacities: g.iter().map(|g| g.opacity).collect(),
            sh: g.iter().map(|g| g.sh.clone()).collect(),
            parts: g.iter().map(|g| g.part).collect(),
        };
        write_json(&dir.join(&manifest.files.gaussians), &arrays)?;
        let nets = NetFile {
            encoding: self.encoding,
            lbs_net: self.lbs_net.clone(),
            pose_net: self.pose_net.clone(),
            conf_net: self.conf_net.clone(),
        };
        write_json(&dir.join(&manifest.files.nets), &nets)?;
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Read an archive written by [`save_archive`](Self::save_archive).
    pub fn load_archive(dir: &Path) -> Result<(GaussianAvatar, BodyModel)> {
        let manifest_path = dir.join("manifest.json");
        let manifest: ArchiveManifest = read_json(&manifest_path)?;
        if manifest.format != FORMAT {
            return Err(Error::Validation(format!(
                "{}: not an avatar archive (format {:?})",
                manifest_path.display(),
                manifest.format
            )));
        }
        if manifest.version != ARCHIVE_VERSION {
            return Err(Error::Validation(format!(
                "{}: unsupported archive version {} (expected {ARCHIVE_VERSION})",
                manifest_path.display(),
                manifest.version
            )));
        }
        if manifest.sh_degree > sh::MAX_DEGREE {
            return Err(Error::Validation(format!("archive sh degree {} too large", manifest.sh_degree)));
        }
        let model = BodyModel::load(&dir.join(&manifest.files.model))?;
        let a: GaussianArrays = read_json(&dir.join(&manifest.files.gaussians))?;
        let n = manifest.num_gaussians;
        for (what, len) in [
            ("centers", a.centers.len()),
            ("rotations", a.rotations.len()),
            ("log_scales", a.log_scales.len()),
            ("opacities", a.opacities.len()),
            ("sh", a.sh.len()),
            ("parts", a.parts.len()),
        ] {
            if len != n {
                return Err(Error::dimension(format!("gaussians.{what}"), n, len));
            }
        }
        let ncoef = sh::num_coeffs(manifest.sh_degree);
        let mut gaussians = Vec::with_capacity(n);
        for i in 0..n {
            if a.sh[i].len() != ncoef {
                return Err(Error::dimension(format!("gaussians.sh[{i}]"), ncoef, a.sh[i].len()));
            }
            let g = Gaussian {
                center: Vector3::from(a.centers[i]),
                rotation: a.rotations[i],
                log_scale: Vector3::from(a.log_scales[i]),
                opacity: a.opacities[i],
                sh: a.sh[i].clone(),
                part: a.parts[i],
            };
            if !g.is_finite() {
                return Err(Error::Validation(format!("gaussian {i} has non-finite parameters")));
            }
            gaussians.push(g);
        }
        let nets: NetFile = read_json(&dir.join(&manifest.files.nets))?;
        for (name, net) in [("lbs_net", &nets.lbs_net), ("pose_net", &nets.pose_net), ("conf_net", &nets.conf_net)] {
            Mlp::from_layers(net.layers().to_vec())
                .map_err(|e| Error::Validation(format!("nets.{name}: {e}")))?;
        }
        if nets.lbs_net.input_dim() != nets.encoding.output_dim() {
            return Err(Error::dimension("nets.lbs_net input", nets.encoding.output_dim(), nets.lbs_net.input_dim()));
        }
        if manifest.shape.len() != model.num_shape() {
            return Err(Error::dimension("manifest.shape", model.num_shape(), manifest.shape.len()));
        }
        let mut avatar = GaussianAvatar {
            gaussians,
            sh_degree: manifest.sh_degree,
            encoding: nets.encoding,
            lbs_net: nets.lbs_net,
            pose_net: nets.pose_net,
            conf_net: nets.conf_net,
            shape: manifest.shape,
            reference_vertices: Vec::new(),
            reference_weights: ndarray::Array2::zeros((0, 0)),
            base_weights: ndarray::Array2::zeros((0, 0)),
            nearest_distance: Vec::new(),
        };
        avatar.set_reference(&model)?;
        Ok((avatar, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::AvatarConfig;
    use crate::bodymodel::synthetic::cylinder_arm;

    #[test]
    fn round_trip() {
        let m = cylinder_arm();
        let cfg = AvatarConfig {
            sh_degree: 1,
            lbs_width: 8,
            pose_width: 4,
            conf_width: 4,
            ..AvatarConfig::default()
        };
        let mut a = GaussianAvatar::init_from_model(&m, &cfg).unwrap();
        a.gaussians[2].sh[1] = [0.1, -0.2, 0.3];
        a.gaussians[5].rotation = [0.5, 0.5, 0.5, 0.5];
        let dir = tempfile::tempdir().unwrap();
        a.save_archive(dir.path(), &m).unwrap();
        let (b, m2) = GaussianAvatar::load_archive(dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(m2.num_vertices(), m.num_vertices());
    }

    #[test]
    fn rejects_unknown_version() {
        let m = cylinder_arm();
        let cfg = AvatarConfig {
            sh_degree: 0,
            lbs_width: 8,
            pose_width: 4,
            conf_width: 4,
            ..AvatarConfig::default()
        };
        let a = GaussianAvatar::init_from_model(&m, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save_archive(dir.path(), &m).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        let err = GaussianAvatar::load_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
