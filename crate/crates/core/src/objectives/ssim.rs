//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) over the
//! valid region, averaged over pixels and channels, with its exact gradient.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Window length along an axis of length `n`: 11, or the largest odd
/// length that fits.
fn window_len(n: usize) -> usize {
    let w = WINDOW.min(n);
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

fn kernel(len: usize) -> Vec<f64> {
    let c = (len / 2) as f64;
    let k: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

struct Filter {
    ky: Vec<f64>,
    kx: Vec<f64>,
}

impl Filter {
    fn new(h: usize, w: usize) -> Self {
        Filter {
            ky: kernel(window_len(h)),
            kx: kernel(window_len(w)),
        }
    }

    fn out_dim(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 1 - self.ky.len(), w + 1 - self.kx.len())
    }

    /// Valid-region separable correlation.
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        let (oh, ow) = self.out_dim(h, w);
        let mut tmp = Array2::<f64>::zeros((h, ow));
        for y in 0..h {
            for o in 0..ow {
                tmp[[y, o]] = self.kx.iter().enumerate().map(|(i, k)| k * x[[y, o + i]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros((oh, ow));
        for o in 0..oh {
            for xo in 0..ow {
                out[[o, xo]] = self.ky.iter().enumerate().map(|(i, k)| k * tmp[[o + i, xo]]).sum();
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply).
    fn adjoint(&self, g: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (oh, ow) = g.dim();
        let mut tmp = Array2::<f64>::zeros((h, ow));
        for o in 0..oh {
            for xo in 0..ow {
                let v = g[[o, xo]];
                for (i, k) in self.ky.iter().enumerate() {
                    tmp[[o + i, xo]] += k * v;
                }
            }
        }
        let mut out = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for o in 0..ow {
                let v = tmp[[y, o]];
                for (i, k) in self.kx.iter().enumerate() {
                    out[[y, o + i]] += k * v;
                }
            }
        }
        out
    }
}

fn check(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension("ssim images", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if a.dim().0 == 0 || a.dim().1 == 0 {
        return Err(Error::Validation("ssim needs a non-empty image".into()));
    }
    Ok(())
}

struct Moments {
    mx: Array2<f64>,
    my: Array2<f64>,
    mxx: Array2<f64>,
    myy: Array2<f64>,
    mxy: Array2<f64>,
}

fn moments(f: &Filter, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Moments {
    Moments {
        mx: f.apply(x),
        my: f.apply(y),
        mxx: f.apply((&x * &x).view()),
        myy: f.apply((&y * &y).view()),
        mxy: f.apply((&x * &y).view()),
    }
}

#[inline]
fn terms(m: &Moments, i: [usize; 2]) -> (f64, f64, f64, f64) {
    let (mx, my) = (m.mx[i], m.my[i]);
    let a = 2.0 * mx * my + C1;
    let b = 2.0 * (m.mxy[i] - mx * my) + C2;
    let c = mx * mx + my * my + C1;
    let d = (m.mxx[i] - mx * mx) + (m.myy[i] - my * my) + C2;
    (a, b, c, d)
}

/// Mean SSIM of two `H × W × C` images.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    check(&a, &b)?;
    let (h, w, ch) = a.dim();
    let f = Filter::new(h, w);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        let m = moments(&f, a.slice(s![.., .., c]), b.slice(s![.., .., c]));
        for ((i, j), _) in m.mx.indexed_iter() {
            let (ta, tb, tc, td) = terms(&m, [i, j]);
            total += ta * tb / (tc * td);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<(f64, Array3<f64>)> {
    check(&a, &b)?;
    let (h, w, ch) = a.dim();
    let f = Filter::new(h, w);
    let (oh, ow) = f.out_dim(h, w);
    let norm = 1.0 / (oh * ow * ch) as f64;
    let mut total = 0.0;
    let mut grad = Array3::zeros((h, w, ch));
    for c in 0..ch {
        let x = a.slice(s![.., .., c]);
        let y = b.slice(s![.., .., c]);
        let m = moments(&f, x, y);
        let mut g_mx = Array2::zeros((oh, ow));
        let mut g_mxx = Array2::zeros((oh, ow));
        let mut g_mxy = Array2::zeros((oh, ow));
        for i in 0..oh {
            for j in 0..ow {
                let (ta, tb, tc, td) = terms(&m, [i, j]);
                let cd = tc * td;
                let s = ta * tb / cd;
                total += s;
                let (mx, my) = (m.mx[[i, j]], m.my[[i, j]]);
                g_mx[[i, j]] = norm * ((2.0 * my * tb - 2.0 * my * ta) / cd - s * 2.0 * mx / tc + s * 2.0 * mx / td);
                g_mxx[[i, j]] = norm * (-s / td);
                g_mxy[[i, j]] = norm * (2.0 * ta / cd);
            }
        }
        let back_mx = f.adjoint(g_mx.view(), h, w);
        let back_mxx = f.adjoint(g_mxx.view(), h, w);
        let back_mxy = f.adjoint(g_mxy.view(), h, w);
        let mut gc = grad.slice_mut(s![.., .., c]);
        for ((i, j), v) in gc.indexed_iter_mut() {
            *v = back_mx[[i, j]] + 2.0 * x[[i, j]] * back_mxx[[i, j]] + y[[i, j]] * back_mxy[[i, j]];
        }
    }
    Ok((total * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn img(h: usize, w: usize, seed: f64) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            0.5 + 0.4 * ((y as f64 * 0.7 + x as f64 * 1.3 + c as f64 + seed) * (1.0 + seed)).sin()
        })
    }

    #[test]
    fn identical_is_one() {
        let a = img(20, 17, 0.3);
        assert_relative_eq!(ssim(a.view(), a.view()).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_pair_closed_form() {
        let a = Array3::zeros((16, 16, 3));
        let b = Array3::ones((16, 16, 3));
        assert_relative_eq!(ssim(a.view(), b.view()).unwrap(), C1 / (1.0 + C1), epsilon = 1e-12);
    }

    #[test]
    fn symmetric() {
        let a = img(14, 19, 0.1);
        let b = img(14, 19, 0.7);
        assert_relative_eq!(ssim(a.view(), b.view()).unwrap(), ssim(b.view(), a.view()).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn small_images_use_shrunken_window() {
        let a = img(6, 5, 0.2);
        let b = img(6, 5, 0.9);
        let v = ssim(a.view(), b.view()).unwrap();
        assert!(v.is_finite() && v < 1.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = img(13, 12, 0.4);
        let b = img(13, 12, 1.1);
        let (v, g) = ssim_with_grad(a.view(), b.view()).unwrap();
        assert_relative_eq!(v, ssim(a.view(), b.view()).unwrap(), epsilon = 1e-14);
        let h = 1e-6;
        for &(y, x, c) in &[(0, 0, 0), (6, 6, 1), (12, 11, 2), (3, 9, 0), (10, 2, 1)] {
            let mut p = a.clone();
            let mut q = a.clone();
            p[[y, x, c]] += h;
            q[[y, x, c]] -= h;
            let fd = (ssim(p.view(), b.view()).unwrap() - ssim(q.view(), b.view()).unwrap()) / (2.0 * h);
            assert_relative_eq!(g[[y, x, c]], fd, epsilon = 1e-8);
        }
    }
}
