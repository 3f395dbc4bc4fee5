//! Training objective: confidence-weighted L1, mask loss, SSIM and an
//! optional perceptual term.
//!
//! ```text
//! C     = μ + exp(E(I_r, D_r))          per pixel, inputs detached
//! L_c   = mean(C · |I_r − I|)
//! L     = L_c + λ_m · mean|α − M| + λ_s · (1 − SSIM) + λ_l · L_perceptual
//! ```

mod ssim;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpGrads};
use crate::rasterizer::{OutputGrads, RenderOutput};

pub use ssim::{ssim, ssim_with_grad};

/// Weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    /// Confidence floor `μ`.
    pub mu: f64,
    /// Weight of `-mean(log C)`; zero leaves the confidence unregularized.
    pub confidence_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_m: 0.1,
            lambda_s: 0.01,
            lambda_l: 0.04,
            mu: 1.0,
            confidence_reg: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_s", self.lambda_s),
            ("lambda_l", self.lambda_l),
            ("mu", self.mu),
            ("confidence_reg", self.confidence_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// External perceptual similarity model (for example a learned metric).
pub trait PerceptualScorer {
    /// Loss value and its gradient with respect to `rendered`.
    fn loss_and_grad(&self, rendered: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<(f64, Array3<f64>)>;
}

/// Individual loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub confidence_l1: f64,
    pub mask: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub confidence_reg: f64,
}

/// `L_c + λ_m L_m + λ_s (1 − SSIM) + λ_l L_perceptual − w mean(log C)`;
/// the last term is already folded into `parts.confidence_reg`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.confidence_l1
        + w.lambda_m * parts.mask
        + w.lambda_s * (1.0 - parts.ssim)
        + w.lambda_l * parts.perceptual
        + parts.confidence_reg
}

/// Per-pixel network input `[r, g, b, depth]`, `HW × 4`.
fn confidence_features(color: ArrayView3<f64>, depth: ArrayView2<f64>) -> Array2<f64> {
    let (h, w, _) = color.dim();
    Array2::from_shape_fn((h * w, 4), |(p, c)| {
        let (y, x) = (p / w, p % w);
        if c < 3 {
            color[[y, x, c]]
        } else {
            depth[[y, x]]
        }
    })
}

/// `C = μ + exp(E(color, depth))`, `H × W`.
pub fn confidence(net: &Mlp, color: ArrayView3<f64>, depth: ArrayView2<f64>, mu: f64) -> Result<Array2<f64>> {
    let (h, w, _) = color.dim();
    if depth.dim() != (h, w) {
        return Err(Error::dimension("depth", format!("{h}x{w}"), format!("{:?}", depth.dim())));
    }
    let e = net.forward(confidence_features(color, depth).view())?;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| mu + e[[y * w + x, 0]].exp()))
}

/// `mean(C · |rendered − target|)` over pixels and channels.
pub fn confidence_l1(conf: ArrayView2<f64>, rendered: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    if rendered.dim() != target.dim() {
        return Err(Error::dimension("target image", format!("{:?}", rendered.dim()), format!("{:?}", target.dim())));
    }
    let (h, w, c) = rendered.dim();
    if conf.dim() != (h, w) {
        return Err(Error::dimension("confidence map", format!("{h}x{w}"), format!("{:?}", conf.dim())));
    }
    let mut sum = 0.0;
    for ((y, x, ch), r) in rendered.indexed_iter() {
        sum += conf[[y, x]] * (r - target[[y, x, ch]]).abs();
    }
    Ok(sum / (h * w * c) as f64)
}

/// `mean |alpha − mask|`.
pub fn mask_loss(alpha: ArrayView2<f64>, mask: ArrayView2<f64>) -> Result<f64> {
    if alpha.dim() != mask.dim() {
        return Err(Error::dimension("mask", format!("{:?}", alpha.dim()), format!("{:?}", mask.dim())));
    }
    let n = alpha.len() as f64;
    Ok(alpha.iter().zip(mask.iter()).map(|(a, m)| (a - m).abs()).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio for unit dynamic range; identical images
/// report [`PSNR_IDENTICAL`].
pub fn psnr(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::dimension("psnr images", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { PSNR_IDENTICAL } else { -10.0 * mse.log10() })
}

pub const PSNR_IDENTICAL: f64 = 99.0;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss values and gradients for one rendered frame.
#[derive(Debug, Clone)]
pub struct Objective {
    pub parts: LossParts,
    pub total: f64,
    pub confidence: Array2<f64>,
    pub output_grads: OutputGrads,
    pub conf_net_grads: MlpGrads,
}

/// Evaluate the full objective against `target` and `mask`.
pub fn evaluate(
    render: &RenderOutput,
    target: ArrayView3<f64>,
    mask: ArrayView2<f64>,
    conf_net: &Mlp,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualScorer>,
) -> Result<Objective> {
    weights.validate()?;
    let (h, w, ch) = render.color.dim();
    if target.dim() != (h, w, ch) {
        return Err(Error::dimension("target image", format!("{h}x{w}x{ch}"), format!("{:?}", target.dim())));
    }
    if mask.dim() != (h, w) {
        return Err(Error::dimension("mask", format!("{h}x{w}"), format!("{:?}", mask.dim())));
    }
    let npix = (h * w) as f64;
    let nval = npix * ch as f64;

    // The confidence network sees detached renders.
    let features = confidence_features(render.color.view(), render.depth.view());
    let (e, cache) = conf_net.forward_cached(features.view())?;
    let exp_e = e.column(0).mapv(f64::exp);
    let conf = Array2::from_shape_fn((h, w), |(y, x)| weights.mu + exp_e[y * w + x]);

    let mut d_color = Array3::zeros((h, w, ch));
    let mut d_e = Array2::zeros((h * w, 1));
    let mut lc = 0.0;
    let mut log_c = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = conf[[y, x]];
            let mut abs_sum = 0.0;
            for k in 0..ch {
                let r = render.color[[y, x, k]] - target[[y, x, k]];
                abs_sum += r.abs();
                d_color[[y, x, k]] = c * sign(r) / nval;
            }
            lc += c * abs_sum;
            log_c += c.ln();
            let p = y * w + x;
            d_e[[p, 0]] = exp_e[p] * abs_sum / nval - weights.confidence_reg * exp_e[p] / (c * npix);
        }
    }
    let parts_lc = lc / nval;
    let reg = -weights.confidence_reg * log_c / npix;

    let mut d_alpha = Array2::zeros((h, w));
    let mut lm = 0.0;
    for ((y, x), a) in render.alpha.indexed_iter() {
        let r = a - mask[[y, x]];
        lm += r.abs();
        d_alpha[[y, x]] = weights.lambda_m * sign(r) / npix;
    }
    lm /= npix;

    let (s, d_ssim) = ssim_with_grad(render.color.view(), target)?;
    d_color.scaled_add(-weights.lambda_s, &d_ssim);

    let mut lp = 0.0;
    if let Some(scorer) = perceptual {
        let (v, g) = scorer.loss_and_grad(render.color.view(), target)?;
        if g.dim() != (h, w, ch) {
            return Err(Error::dimension("perceptual gradient", format!("{h}x{w}x{ch}"), format!("{:?}", g.dim())));
        }
        lp = v;
        d_color.scaled_add(weights.lambda_l, &g);
    }

    let parts = LossParts {
        confidence_l1: parts_lc,
        mask: lm,
        ssim: s,
        perceptual: lp,
        confidence_reg: reg,
    };
    let (conf_net_grads, _) = conf_net.backward(&cache, d_e.view());
    let total = total_loss(&parts, weights);
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {total}")));
    }
    Ok(Objective {
        parts,
        total,
        confidence: conf,
        output_grads: OutputGrads {
            color: d_color,
            depth: None,
            alpha: Some(d_alpha),
        },
        conf_net_grads,
    })
}

/// Mean of an image over its first two axes, per channel.
pub fn channel_means(img: ArrayView3<f64>) -> Vec<f64> {
    img.mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .map(|m| m.to_vec())
        .unwrap_or_default()
}
