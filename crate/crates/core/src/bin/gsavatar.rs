//! Command-line front end: synthesize data, fit body parameters, train,
//! render and evaluate avatars.
//!
//! Log verbosity follows the `GSAVATAR_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`). Exit codes: 0 on success,
//! 1 for invalid input, 2 for numerical failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use gsavatar::align::{default_decoder, fit_sequence, FitConfig, FrameDetections};
use gsavatar::avatar::GaussianAvatar;
use gsavatar::bodymodel::io::PoseFile;
use gsavatar::bodymodel::BodyModel;
use gsavatar::imaging;
use gsavatar::pipeline::dataset::{detections_path, load_split, pose_path};
use gsavatar::pipeline::{evaluate, load_dataset, render_novel, synth, train, Region, SynthConfig, TrainConfig};
use gsavatar::rasterizer::Camera;

#[derive(Parser)]
#[command(name = "gsavatar", version, about = "Articulated Gaussian avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cylinder-arm dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        train_frames: usize,
        #[arg(long, default_value_t = 8)]
        test_frames: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Fit body parameters to every frame's detections.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for fitted pose files.
        #[arg(long)]
        out: PathBuf,
        /// Body model file; defaults to `<data>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train an avatar on the training frames.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render an avatar archive in a pose.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Orbit the camera about the body root by this many radians.
        #[arg(long, default_value_t = 0.0)]
        orbit: f64,
        /// Output directory for color.png, alpha.png and depth.dpt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an avatar archive on the held-out frames.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        avatar: PathBuf,
        /// Metrics table (CSV); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn model_path(data: &Path, model: Option<PathBuf>) -> PathBuf {
    model.unwrap_or_else(|| data.join("model.json"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            train_frames,
            test_frames,
            size,
        } => {
            let cfg = SynthConfig {
                train_frames,
                test_frames,
                width: size,
                height: size,
                seed,
                ..SynthConfig::default()
            };
            synth(&out, &cfg)?;
            info!("wrote {} frames to {}", train_frames + test_frames, out.display());
        }
        Command::Fit { data, out, model } => {
            let model = BodyModel::load(&model_path(&data, model))?;
            let (_, split) = load_split(&data)?;
            let mut ids: Vec<String> = split.train.iter().chain(&split.test).cloned().collect();
            ids.sort();
            let frames = ids
                .iter()
                .map(|id| FrameDetections::load(&detections_path(&data, id)))
                .collect::<gsavatar::Result<Vec<_>>>()?;
            let cfg = FitConfig::default();
            let decoder = default_decoder(&model, &cfg)?;
            let report = fit_sequence(&frames, &model, &decoder, &cfg, None)?;
            std::fs::create_dir_all(out.join("poses")).with_context(|| format!("creating {}", out.display()))?;
            for (id, pose) in ids.iter().zip(&report.poses) {
                if let Some(p) = pose {
                    p.save(&pose_path(&out, id))?;
                }
            }
            for (k, s) in report.stages.iter().enumerate() {
                info!("stage {}: {} iterations, objective {:?}", k + 1, s.iterations, s.values.last());
            }
            if !report.skipped.is_empty() {
                info!("skipped frames without detections: {:?}", report.skipped);
            }
        }
        Command::Train {
            data,
            out,
            config,
            overrides,
            model,
        } => {
            let model = BodyModel::load(&model_path(&data, model))?;
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("--set expects KEY=VALUE, got {kv:?}");
                };
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let ds = load_dataset(&data, Some(&model))?;
            let outcome = train(&model, &ds, &cfg, Some(&out))?;
            if !ds.test.is_empty() {
                let report = evaluate(&outcome.avatar, &model, &ds.test, &ds.camera, cfg.background, None)?;
                report.write_csv(&out.join("metrics.csv"))?;
                if let Some((p, s)) = report.mean(Region::Full) {
                    info!("held-out PSNR {p:.2} dB, SSIM {s:.4}");
                }
            }
        }
        Command::Render {
            avatar,
            pose,
            camera,
            orbit,
            out,
        } => {
            let (avatar, model) = GaussianAvatar::load_archive(&avatar)?;
            let pose = PoseFile::load(&pose)?;
            let mut cam = Camera::load(&camera)?;
            if orbit != 0.0 {
                let root = gsavatar::align::posed_joints(&model, &pose.beta, &pose.pose())?[0];
                cam = cam.orbited(&root, orbit);
            }
            let r = render_novel(&avatar, &model, &pose, &cam, [0.0; 3])?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            imaging::write_rgb(&out.join("color.png"), r.color.view())?;
            imaging::write_mask(&out.join("alpha.png"), r.alpha.view())?;
            imaging::write_depth(&out.join("depth.dpt"), r.depth.view())?;
        }
        Command::Eval { data, avatar, out } => {
            let (avatar, model) = GaussianAvatar::load_archive(&avatar)?;
            let ds = load_dataset(&data, Some(&model))?;
            let frames = if ds.test.is_empty() { &ds.train } else { &ds.test };
            let report = evaluate(&avatar, &model, frames, &ds.camera, [0.0; 3], None)?;
            match out {
                Some(p) => report.write_csv(&p)?,
                None => print!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GSAVATAR_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<gsavatar::Error>().map_or(1, gsavatar::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
