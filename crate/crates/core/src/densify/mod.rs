//! Part-aware adaptive density control.
//!
//! Every Gaussian keeps a ring buffer of its last `2R` per-step positional
//! gradient norms. Its densification threshold follows the trend of that
//! history:
//!
//! ```text
//! ε_i = e + (λ_t / R) · (Σ_{last R} ∇_i − Σ_{R before that} ∇_i)
//! ```
//!
//! with `(e, λ_t)` chosen by the Gaussian's part. With negative `λ_t`, a
//! rising gradient lowers the threshold and densifies sooner. Gaussians whose
//! mean recent gradient exceeds `ε_i` are cloned (small) or split (large);
//! Gaussians that are nearly transparent or drift away from the template are
//! pruned.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::avatar::{Gaussian, GaussianAvatar};
use crate::bodymodel::Part;
use crate::error::{Error, Result};

/// Threshold constants of one part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartConstants {
    /// Base threshold `e`.
    pub base: f64,
    /// History coefficient `λ_t`.
    pub history: f64,
    /// Maximum distance from the template before pruning (model units).
    pub template_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyConfig {
    /// Window length `R` in steps; also the densification interval.
    pub interval: usize,
    pub opacity_prune: f64,
    /// Indexed by [`Part::index`].
    pub parts: [PartConstants; 3],
    /// Gaussians with max scale below this fraction of the extent are cloned.
    pub clone_fraction: f64,
    pub split_factor: f64,
    pub split_children: usize,
    /// Upper bound on the live Gaussian count.
    pub max_gaussians: Option<usize>,
    pub seed: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            interval: 100,
            opacity_prune: 0.005,
            parts: [
                PartConstants {
                    base: 2e-4,
                    history: -9.0,
                    template_distance: 0.05,
                },
                PartConstants {
                    base: 1e-4,
                    history: -4.5,
                    template_distance: 0.02,
                },
                PartConstants {
                    base: 1.4e-4,
                    history: -6.3,
                    template_distance: 0.02,
                },
            ],
            clone_fraction: 0.01,
            split_factor: 1.6,
            split_children: 2,
            max_gaussians: None,
            seed: 0,
        }
    }
}

impl DensifyConfig {
    /// Same settings with the history term disabled (`λ_t = 0`): a fixed
    /// per-part threshold.
    pub fn fixed_threshold(&self) -> Self {
        let mut c = self.clone();
        for p in &mut c.parts {
            p.history = 0.0;
        }
        c
    }

    pub fn constants(&self, part: Part) -> &PartConstants {
        &self.parts[part.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::Validation("densification interval must be positive".into()));
        }
        if !(self.split_factor > 0.0) || self.split_children == 0 {
            return Err(Error::Validation("split factor and child count must be positive".into()));
        }
        for p in &self.parts {
            if !(p.base.is_finite() && p.history.is_finite() && p.template_distance > 0.0) {
                return Err(Error::Validation(format!("invalid part constants {p:?}")));
            }
        }
        Ok(())
    }
}

/// Where a Gaussian after [`DensifyState::densify_and_prune`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Unchanged Gaussian at this previous index.
    Kept(usize),
    /// New child of the Gaussian at this previous index.
    Child(usize),
}

impl Origin {
    pub fn source(self) -> usize {
        match self {
            Origin::Kept(i) | Origin::Child(i) => i,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartCounts {
    pub splits: usize,
    pub clones: usize,
    pub prunes: usize,
    /// Live Gaussians of this part after the event.
    pub live: usize,
    pub mean_threshold: f64,
    pub min_threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyReport {
    pub step: usize,
    /// Indexed by [`Part::index`].
    pub parts: [PartCounts; 3],
    /// One entry per Gaussian after the event.
    pub origins: Vec<Origin>,
}

impl DensifyReport {
    pub fn total_live(&self) -> usize {
        self.origins.len()
    }

    pub fn is_noop(&self) -> bool {
        self.parts.iter().all(|p| p.splits == 0 && p.clones == 0 && p.prunes == 0)
    }

    /// Append one row per part to a CSV file, writing a header when new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let new = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = String::new();
        if new {
            out.push_str("step,part,splits,clones,prunes,live,mean_threshold,min_threshold\n");
        }
        for part in Part::ALL {
            let c = &self.parts[part.index()];
            out.push_str(&format!(
                "{},{},{},{},{},{},{:e},{:e}\n",
                self.step,
                part.name(),
                c.splits,
                c.clones,
                c.prunes,
                c.live,
                c.mean_threshold,
                c.min_threshold
            ));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Gradient history and density-control settings.
#[derive(Debug, Clone)]
pub struct DensifyState {
    config: DensifyConfig,
    /// `N × 2R`, ring-indexed by `head`.
    history: Vec<f64>,
    /// Slot written by the next push.
    head: usize,
    /// Number of pushes so far, saturating at `2R`.
    filled: usize,
    /// Accumulated canonical positional gradients since the last event.
    directions: Vec<Vector3<f64>>,
    rng: ChaCha8Rng,
}

impl DensifyState {
    pub fn new(config: DensifyConfig, num_gaussians: usize) -> Result<Self> {
        config.validate()?;
        let len = 2 * config.interval;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(DensifyState {
            history: vec![0.0; num_gaussians * len],
            head: 0,
            filled: 0,
            directions: vec![Vector3::zeros(); num_gaussians],
            config,
            rng,
        })
    }

    pub fn config(&self) -> &DensifyConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    fn buffer_len(&self) -> usize {
        2 * self.config.interval
    }

    /// Push one step of gradient norms (one per live Gaussian). The optional
    /// positional gradients steer clone offsets.
    pub fn record_gradients(&mut self, norms: &[f64], positional: Option<&[Vector3<f64>]>) -> Result<()> {
        let n = self.len();
        if norms.len() != n {
            return Err(Error::dimension("gradient norms", n, norms.len()));
        }
        let len = self.buffer_len();
        for (i, v) in norms.iter().enumerate() {
            self.history[i * len + self.head] = *v;
        }
        if let Some(p) = positional {
            if p.len() != n {
                return Err(Error::dimension("positional gradients", n, p.len()));
            }
            for (d, g) in self.directions.iter_mut().zip(p) {
                *d += g;
            }
        }
        self.head = (self.head + 1) % len;
        self.filled = (self.filled + 1).min(len);
        Ok(())
    }

    /// History of Gaussian `i`, oldest first.
    pub fn history(&self, i: usize) -> Vec<f64> {
        let len = self.buffer_len();
        let row = &self.history[i * len..(i + 1) * len];
        (0..self.filled)
            .map(|k| row[(self.head + len - self.filled + k) % len])
            .collect()
    }

    /// `(Σ last R, Σ the R before)` for Gaussian `i`; the second sum covers
    /// only what has been recorded.
    pub fn window_sums(&self, i: usize) -> (f64, f64) {
        let r = self.config.interval;
        let len = self.buffer_len();
        let row = &self.history[i * len..(i + 1) * len];
        let at = |back: usize| row[(self.head + len - 1 - back) % len];
        let recent = (0..r.min(self.filled)).map(at).sum();
        let previous = (r..self.filled).map(at).sum();
        (recent, previous)
    }

    /// `ε_i` for Gaussian `i` of `part`; the base value until the buffer
    /// holds `2R` entries.
    pub fn adaptive_threshold(&self, i: usize, part: Part) -> f64 {
        let c = self.config.constants(part);
        if self.filled < self.buffer_len() {
            return c.base;
        }
        let (recent, previous) = self.window_sums(i);
        c.base + c.history / self.config.interval as f64 * (recent - previous)
    }

    /// Mean of the last `R` recorded gradient norms.
    pub fn mean_recent(&self, i: usize) -> f64 {
        let k = self.config.interval.min(self.filled);
        if k == 0 {
            return 0.0;
        }
        self.window_sums(i).0 / k as f64
    }

    /// Split, clone and prune. `extent` is the template bounding-box
    /// diagonal.
    pub fn densify_and_prune(&mut self, avatar: &mut GaussianAvatar, extent: f64, step: usize) -> Result<DensifyReport> {
        let n = avatar.len();
        if n != self.len() {
            return Err(Error::dimension("densify state gaussians", avatar.len(), self.len()));
        }
        let mut report = DensifyReport {
            step,
            ..DensifyReport::default()
        };

        let old_parts: Vec<Part> = avatar.gaussians.iter().map(|g| g.part).collect();
        // Candidates and their margin over the threshold.
        let mut thresholds = vec![0.0; n];
        let mut candidates = Vec::new();
        for (i, g) in avatar.gaussians.iter().enumerate() {
            let eps = self.adaptive_threshold(i, g.part);
            thresholds[i] = eps;
            let m = self.mean_recent(i);
            if m > eps {
                candidates.push((m - eps, i));
            }
        }
        if let Some(max) = self.config.max_gaussians {
            let room = max.saturating_sub(n);
            if candidates.len() > room {
                candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                candidates.truncate(room);
            }
        }
        let mut selected = vec![false; n];
        for (_, i) in &candidates {
            selected[*i] = true;
        }

        let clone_limit = self.config.clone_fraction * extent;
        let mut gaussians: Vec<Gaussian> = Vec::with_capacity(n + candidates.len());
        let mut origins: Vec<Origin> = Vec::with_capacity(n + candidates.len());
        let mut children: Vec<(Gaussian, usize)> = Vec::new();
        for (i, g) in avatar.gaussians.iter().enumerate() {
            if !selected[i] {
                gaussians.push(g.clone());
                origins.push(Origin::Kept(i));
                continue;
            }
            let counts = &mut report.parts[g.part.index()];
            let max_scale = g.scale().max();
            if max_scale < clone_limit {
                counts.clones += 1;
                gaussians.push(g.clone());
                origins.push(Origin::Kept(i));
                let mut c = g.clone();
                let d = self.directions[i];
                if d.norm() > 0.0 {
                    c.center -= d.normalize() * (0.5 * max_scale);
                }
                children.push((c, i));
            } else {
                counts.splits += 1;
                let r = g.rotation_matrix();
                let s = g.scale();
                for _ in 0..self.config.split_children {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut self.rng));
                    let mut c = g.clone();
                    c.center = g.center + r * Matrix3::from_diagonal(&s) * z;
                    c.log_scale = g.log_scale.map(|v| v - self.config.split_factor.ln());
                    children.push((c, i));
                }
            }
        }
        for (c, i) in children {
            gaussians.push(c);
            origins.push(Origin::Child(i));
        }

        // Prune on opacity and template distance, children included.
        avatar.gaussians = gaussians;
        avatar.refresh_caches();
        let dist = avatar.template_distances().to_vec();
        let mut keep = Vec::with_capacity(avatar.len());
        for (j, g) in avatar.gaussians.iter().enumerate() {
            let limit = self.config.constants(g.part).template_distance;
            let prune = g.alpha() < self.config.opacity_prune || dist[j] > limit;
            if prune {
                report.parts[g.part.index()].prunes += 1;
            }
            keep.push(!prune);
        }
        if !keep.iter().any(|k| *k) {
            return Err(Error::Numerical(format!(
                "density control at step {step} would prune all {} Gaussians",
                keep.len()
            )));
        }
        let mut idx = 0;
        avatar.gaussians.retain(|_| {
            idx += 1;
            keep[idx - 1]
        });
        let origins: Vec<Origin> = origins.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(o, _)| o).collect();
        avatar.refresh_caches();

        // Remap buffers: children inherit their parent's history.
        let len = self.buffer_len();
        let mut history = Vec::with_capacity(origins.len() * len);
        for o in &origins {
            let s = o.source();
            history.extend_from_slice(&self.history[s * len..(s + 1) * len]);
        }
        self.history = history;
        self.directions = vec![Vector3::zeros(); origins.len()];

        for part in Part::ALL {
            let c = &mut report.parts[part.index()];
            c.live = avatar.gaussians.iter().filter(|g| g.part == part).count();
            let ts: Vec<f64> = thresholds
                .iter()
                .zip(&old_parts)
                .filter(|(_, p)| **p == part)
                .map(|(t, _)| *t)
                .collect();
            if !ts.is_empty() {
                c.mean_threshold = ts.iter().sum::<f64>() / ts.len() as f64;
                c.min_threshold = ts.iter().copied().fold(f64::INFINITY, f64::min);
            }
        }
        report.origins = origins;
        Ok(report)
    }
}
