//! The training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avatar::GaussianAvatar;
use crate::bodymodel::BodyModel;
use crate::densify::{DensifyReport, DensifyState};
use crate::error::{Error, Result};
use crate::objectives::{self, LossParts};
use crate::rasterizer::{rasterize, rasterize_backward, Camera};

use super::config::TrainConfig;
use super::dataset::{Dataset, Frame};
use super::eval::{evaluate, EvalReport, Region};
use super::optim::AvatarAdam;

/// File names written into the output directory.
pub const AVATAR_DIR: &str = "avatar";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const DENSIFY_LOG: &str = "densify_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub frame: usize,
    pub total: f64,
    pub parts: LossParts,
    pub gaussians: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub avatar: GaussianAvatar,
    pub history: Vec<StepRecord>,
    pub densify: Vec<DensifyReport>,
    pub initial_gaussians: usize,
}

impl TrainOutcome {
    /// Exponential moving average of the loss with span `span`.
    pub fn loss_ema(&self, span: usize) -> Vec<f64> {
        let a = 2.0 / (span as f64 + 1.0);
        let mut out = Vec::with_capacity(self.history.len());
        let mut acc = None;
        for r in &self.history {
            let v = match acc {
                None => r.total,
                Some(prev) => a * r.total + (1.0 - a) * prev,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }
}

struct Logs {
    train: Option<std::fs::File>,
    train_path: PathBuf,
    densify_path: Option<PathBuf>,
    eval_path: Option<PathBuf>,
}

impl Logs {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(Logs {
                train: None,
                train_path: PathBuf::new(),
                densify_path: None,
                eval_path: None,
            });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let train_path = dir.join(TRAIN_LOG);
        let mut file = std::fs::File::create(&train_path).map_err(|e| Error::io(&train_path, e))?;
        writeln!(file, "step,frame,total,confidence_l1,mask,ssim,perceptual,confidence_reg,gaussians")
            .map_err(|e| Error::io(&train_path, e))?;
        let densify_path = dir.join(DENSIFY_LOG);
        if densify_path.exists() {
            std::fs::remove_file(&densify_path).map_err(|e| Error::io(&densify_path, e))?;
        }
        let eval_path = dir.join(EVAL_LOG);
        std::fs::write(&eval_path, "step,region,psnr,ssim\n").map_err(|e| Error::io(&eval_path, e))?;
        Ok(Logs {
            train: Some(file),
            train_path,
            densify_path: Some(densify_path),
            eval_path: Some(eval_path),
        })
    }

    fn step(&mut self, r: &StepRecord, id: &str) -> Result<()> {
        if let Some(f) = &mut self.train {
            let p = &r.parts;
            writeln!(
                f,
                "{},{id},{},{},{},{},{},{},{}",
                r.step, r.total, p.confidence_l1, p.mask, p.ssim, p.perceptual, p.confidence_reg, r.gaussians
            )
            .map_err(|e| Error::io(&self.train_path, e))?;
        }
        Ok(())
    }

    fn eval(&self, step: usize, report: &EvalReport) -> Result<()> {
        let Some(path) = &self.eval_path else {
            return Ok(());
        };
        let mut rows = String::new();
        for region in Region::ALL {
            if let Some((p, s)) = report.mean(region) {
                rows.push_str(&format!("{step},{},{p},{s}\n", region.name()));
            }
        }
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(rows.as_bytes()).map_err(|e| Error::io(path, e))
    }

    fn densify(&self, report: &DensifyReport) -> Result<()> {
        match &self.densify_path {
            Some(p) => report.append_csv(p),
            None => Ok(()),
        }
    }
}

fn is_densify_step(step: usize, cfg: &TrainConfig) -> bool {
    let r = cfg.densify.interval;
    step >= cfg.densify_start && step < cfg.densify_end && step > 0 && step % r == 0
}

/// Fresh avatar initialized on the template shaped by the first training
/// frame's `beta`.
pub fn initial_avatar(model: &BodyModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<GaussianAvatar> {
    let first = dataset
        .train
        .first()
        .ok_or_else(|| Error::Validation("dataset has no training frames".into()))?;
    GaussianAvatar::init_with_shape(model, &first.pose.beta, &cfg.effective_avatar())
}

/// Optimize a fresh avatar on the training frames. With `out_dir`, logs go
/// there and the final avatar is archived in `out_dir/avatar`; a
/// non-finite loss writes `out_dir/checkpoint` and aborts.
pub fn train(model: &BodyModel, dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let avatar = initial_avatar(model, dataset, cfg)?;
    train_from(avatar, model, dataset, cfg, out_dir)
}

/// Like [`train`], starting from a given avatar.
pub fn train_from(
    mut avatar: GaussianAvatar,
    model: &BodyModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Validation("dataset has no training frames".into()));
    }
    for f in &dataset.train {
        f.pose.validate(model)
            .map_err(|e| Error::Validation(format!("frame {}: {e}", f.id)))?;
    }
    let camera: &Camera = &dataset.camera;
    let extent = model.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AvatarAdam::new(&avatar);
    let mut density = DensifyState::new(cfg.effective_densify(), avatar.len())?;
    let mut logs = Logs::open(out_dir)?;
    let initial = avatar.len();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut reports = Vec::new();
    info!(
        "training {} gaussians on {} frames for {} steps",
        initial,
        dataset.train.len(),
        cfg.iterations
    );

    for step in 0..cfg.iterations {
        let index = rng.random_range(0..dataset.train.len());
        let frame: &Frame = &dataset.train[index];
        let abort = |avatar: &GaussianAvatar, why: String| -> Error {
            let saved = out_dir.map(|d| {
                let dir = d.join(CHECKPOINT_DIR);
                match avatar.save_archive(&dir, model) {
                    Ok(()) => format!("; checkpoint in {}", dir.display()),
                    Err(e) => format!("; checkpoint failed: {e}"),
                }
            });
            Error::Numerical(format!("{why} on frame {} at step {step}{}", frame.id, saved.unwrap_or_default()))
        };

        let pose = frame.pose.pose();
        let art = match avatar.articulate(model, &pose, &frame.pose.beta, camera) {
            Ok(a) => a,
            Err(Error::Numerical(m)) => return Err(abort(&avatar, m)),
            Err(e) => return Err(e),
        };
        let (render, cache) = rasterize(&art.scene, camera, cfg.background)?;
        let objective = match objectives::evaluate(
            &render,
            frame.image.view(),
            frame.mask.view(),
            &avatar.conf_net,
            &cfg.loss,
            None,
        ) {
            Ok(o) => o,
            Err(Error::Numerical(m)) => return Err(abort(&avatar, m)),
            Err(e) => return Err(e),
        };
        let scene_grads = rasterize_backward(&art.scene, camera, &cache, &objective.output_grads)?;
        let grads = avatar.articulate_backward(&art, &scene_grads)?;
        if grads.centers.iter().any(|g| !g.iter().all(|v| v.is_finite()))
            || grads.sh.iter().flatten().flatten().any(|v| !v.is_finite())
            || grads.opacities.iter().any(|v| !v.is_finite())
        {
            return Err(abort(&avatar, "non-finite gradient".into()));
        }

        let position_lr = cfg.lr.position_at(step, cfg.iterations);
        adam.step(&mut avatar, &grads, &objective.conf_net_grads, &cfg.lr, position_lr)?;
        if avatar.gaussians.iter().any(|g| !g.is_finite()) {
            return Err(abort(&avatar, "non-finite parameters after update".into()));
        }
        density.record_gradients(&grads.view_grad_norm, Some(&grads.centers))?;

        let record = StepRecord {
            step,
            frame: index,
            total: objective.total,
            parts: objective.parts,
            gaussians: avatar.len(),
        };
        if step % cfg.log_every == 0 {
            logs.step(&record, &frame.id)?;
        }
        history.push(record);

        let done = step + 1;
        if is_densify_step(done, cfg) {
            let report = density.densify_and_prune(&mut avatar, extent, done)?;
            adam.remap(&report.origins);
            logs.densify(&report)?;
            debug!("step {done}: {} gaussians after densification", report.total_live());
            reports.push(report);
        } else if done % cfg.densify.interval == 0 {
            avatar.refresh_caches();
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !dataset.test.is_empty() {
            let report = evaluate(&avatar, model, &dataset.test, camera, cfg.background, None)?;
            if let Some((p, s)) = report.mean(Region::Full) {
                info!("step {done}: held-out PSNR {p:.2} dB, SSIM {s:.4}");
            }
            logs.eval(done, &report)?;
        }
        if done % 100 == 0 {
            debug!("step {done}: loss {:.6}, {} gaussians", objective.total, avatar.len());
        }
    }

    // Match what a reload of the archive computes.
    avatar.refresh_caches();
    if let Some(dir) = out_dir {
        avatar.save_archive(&dir.join(AVATAR_DIR), model)?;
    }
    info!("finished with {} gaussians", avatar.len());
    Ok(TrainOutcome {
        avatar,
        history,
        densify: reports,
        initial_gaussians: initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densify_steps_follow_the_window() {
        let cfg = TrainConfig::default();
        let steps: Vec<usize> = (0..2000).filter(|s| is_densify_step(*s, &cfg)).collect();
        assert_eq!(steps, [400, 500, 600, 700, 800, 900]);
    }

    #[test]
    fn ema_smooths_toward_recent_values() {
        let rec = |v| StepRecord {
            step: 0,
            frame: 0,
            total: v,
            parts: LossParts::default(),
            gaussians: 0,
        };
        let out = TrainOutcome {
            avatar: GaussianAvatar::init_from_model(
                &crate::bodymodel::synthetic::cylinder_arm(),
                &crate::avatar::AvatarConfig {
                    lbs_width: 4,
                    pose_width: 4,
                    conf_width: 4,
                    ..Default::default()
                },
            )
            .unwrap(),
            history: vec![rec(1.0), rec(0.0), rec(0.0)],
            densify: vec![],
            initial_gaussians: 0,
        };
        let ema = out.loss_ema(3);
        assert_eq!(ema, [1.0, 0.5, 0.25]);
    }
}
