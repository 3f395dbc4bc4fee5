//! Training configuration read from flat `key = value` text files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! overrides the default listed in [`TrainConfig::default`]. Command-line
//! overrides use the same keys through [`TrainConfig::set`].

use std::path::Path;

use crate::avatar::AvatarConfig;
use crate::densify::DensifyConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// Per-group Adam learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRates {
    /// Start of the exponential position schedule.
    pub position: f64,
    /// End of the exponential position schedule.
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    /// Degree-0 color; higher SH bands use a twentieth of it.
    pub sh: f64,
    pub nets: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            nets: 1e-3,
        }
    }
}

impl LearningRates {
    /// Position rate after `step` of `total` steps, log-linear between the
    /// endpoints.
    pub fn position_at(&self, step: usize, total: usize) -> f64 {
        let t = if total <= 1 { 0.0 } else { (step as f64 / (total - 1) as f64).clamp(0.0, 1.0) };
        (self.position.ln() * (1.0 - t) + self.position_final.ln() * t).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub avatar: AvatarConfig,
    pub lr: LearningRates,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    /// Densify at steps in `[densify_start, densify_end)` that are multiples
    /// of the densify interval.
    pub densify_start: usize,
    pub densify_end: usize,
    /// Use the history-adaptive threshold; `false` fixes it at the base.
    pub adaptive: bool,
    pub background: [f64; 3],
    /// Write a training-log row every this many steps.
    pub log_every: usize,
    /// Score the test split every this many steps; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            seed: 0,
            avatar: AvatarConfig::default(),
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            densify_start: 400,
            densify_end: 1000,
            adaptive: true,
            background: [0.0; 3],
            log_every: 1,
            eval_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("config key `{key}`: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Read a config file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Apply `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Validation(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    /// Set one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parts = &mut self.densify.parts;
        match key {
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sh_degree" => self.avatar.sh_degree = parse(key, value)?,
            "encoding_frequencies" => self.avatar.encoding_frequencies = parse(key, value)?,
            "lbs_width" => self.avatar.lbs_width = parse(key, value)?,
            "lbs_layers" => self.avatar.lbs_layers = parse(key, value)?,
            "pose_width" => self.avatar.pose_width = parse(key, value)?,
            "conf_width" => self.avatar.conf_width = parse(key, value)?,
            "conf_layers" => self.avatar.conf_layers = parse(key, value)?,
            "lr_position" => self.lr.position = parse(key, value)?,
            "lr_position_final" => self.lr.position_final = parse(key, value)?,
            "lr_scale" => self.lr.scale = parse(key, value)?,
            "lr_rotation" => self.lr.rotation = parse(key, value)?,
            "lr_opacity" => self.lr.opacity = parse(key, value)?,
            "lr_sh" => self.lr.sh = parse(key, value)?,
            "lr_nets" => self.lr.nets = parse(key, value)?,
            "lambda_m" => self.loss.lambda_m = parse(key, value)?,
            "lambda_s" => self.loss.lambda_s = parse(key, value)?,
            "lambda_l" => self.loss.lambda_l = parse(key, value)?,
            "mu" => self.loss.mu = parse(key, value)?,
            "confidence_reg" => self.loss.confidence_reg = parse(key, value)?,
            "densify_start" => self.densify_start = parse(key, value)?,
            "densify_end" => self.densify_end = parse(key, value)?,
            "densify_interval" => self.densify.interval = parse(key, value)?,
            "opacity_prune" => self.densify.opacity_prune = parse(key, value)?,
            "max_gaussians" => {
                let v: usize = parse(key, value)?;
                self.densify.max_gaussians = (v > 0).then_some(v);
            }
            "adaptive" => self.adaptive = parse(key, value)?,
            "threshold_body" => parts[0].base = parse(key, value)?,
            "threshold_hand" => parts[1].base = parse(key, value)?,
            "threshold_face" => parts[2].base = parse(key, value)?,
            "history_body" => parts[0].history = parse(key, value)?,
            "history_hand" => parts[1].history = parse(key, value)?,
            "history_face" => parts[2].history = parse(key, value)?,
            "background" => {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?;
                self.background = v
                    .try_into()
                    .map_err(|_| Error::Validation("config key `background` needs three numbers".into()))?;
            }
            "log_every" => self.log_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Err(Error::Validation(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Density-control settings actually used, with the seed applied and
    /// the history term removed when `adaptive` is off.
    pub fn effective_densify(&self) -> DensifyConfig {
        let mut d = if self.adaptive { self.densify.clone() } else { self.densify.fixed_threshold() };
        d.seed = self.seed;
        d
    }

    /// Avatar settings with the seed applied.
    pub fn effective_avatar(&self) -> AvatarConfig {
        AvatarConfig {
            seed: self.seed,
            ..self.avatar.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.densify.validate()?;
        let lr = &self.lr;
        for (name, v) in [
            ("lr_position", lr.position),
            ("lr_position_final", lr.position_final),
            ("lr_scale", lr.scale),
            ("lr_rotation", lr.rotation),
            ("lr_opacity", lr.opacity),
            ("lr_sh", lr.sh),
            ("lr_nets", lr.nets),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.densify_start >= self.densify_end {
            return Err(Error::Validation("densify_start must be below densify_end".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Validation("log_every must be at least 1".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation("background must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_overrides_defaults() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\niterations = 50\n\nbackground = 1 0.5 0  # white-ish\nadaptive=false\nmax_gaussians = 0\n")
            .unwrap();
        assert_eq!(cfg.iterations, 50);
        assert_eq!(cfg.background, [1.0, 0.5, 0.0]);
        assert!(!cfg.adaptive);
        assert_eq!(cfg.densify.max_gaussians, None);
        assert_eq!(cfg.effective_densify().parts[0].history, 0.0);
    }

    #[test]
    fn bad_lines_are_reported_with_line_numbers() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_text("iterations = 5\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(err.to_string().contains("bogus"));
        assert!(cfg.apply_text("iterations 5").is_err());
        assert!(cfg.apply_text("lr_sh = -1").is_err());
        assert!(cfg.apply_text("background = 1 2").is_err());
    }

    #[test]
    fn position_rate_decays_log_linearly() {
        let lr = LearningRates::default();
        assert_eq!(lr.position_at(0, 101), 1.6e-4);
        assert!((lr.position_at(100, 101) - 1.6e-6).abs() < 1e-18);
        assert!((lr.position_at(50, 101) - 1.6e-5).abs() < 1e-15);
    }
}
