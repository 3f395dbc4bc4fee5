//! Real spherical-harmonic color up to degree 3 in the usual splatting
//! convention: `color = Σ_j b_j(d) c_j + 0.5`, clamped to `[0, 1]`.

use nalgebra::Vector3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

pub fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values and their gradients with respect to the unit direction.
fn basis(degree: usize, d: &Vector3<f64>) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let (x, y, z) = (d.x, d.y, d.z);
    let n = num_coeffs(degree);
    let mut b = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    b.push(C0);
    g.push(Vector3::zeros());
    if degree >= 1 {
        b.extend([-C1 * y, C1 * z, -C1 * x]);
        g.extend([
            Vector3::new(0.0, -C1, 0.0),
            Vector3::new(0.0, 0.0, C1),
            Vector3::new(-C1, 0.0, 0.0),
        ]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            C2[0] * x * y,
            C2[1] * y * z,
            C2[2] * (2.0 * zz - xx - yy),
            C2[3] * x * z,
            C2[4] * (xx - yy),
        ]);
        g.extend([
            C2[0] * Vector3::new(y, x, 0.0),
            C2[1] * Vector3::new(0.0, z, y),
            C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z),
            C2[3] * Vector3::new(z, 0.0, x),
            C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            C3[0] * y * (3.0 * xx - yy),
            C3[1] * x * y * z,
            C3[2] * y * (4.0 * zz - xx - yy),
            C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * x * (4.0 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3.0 * yy),
        ]);
        g.extend([
            C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0),
            C3[1] * Vector3::new(y * z, x * z, x * y),
            C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z),
            C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy),
            C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z),
            C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy),
            C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0),
        ]);
    }
    (b, g)
}

/// Color seen along `view` (unnormalized, from the camera to the Gaussian).
pub fn eval(degree: usize, coeffs: &[[f64; 3]], view: &Vector3<f64>) -> [f64; 3] {
    let d = view.normalize();
    let (b, _) = basis(degree, &d);
    let mut c = [0.5; 3];
    for (bj, cj) in b.iter().zip(coeffs) {
        for ch in 0..3 {
            c[ch] += bj * cj[ch];
        }
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Gradients of `eval` with respect to the coefficients and the view vector.
pub fn backward(
    degree: usize,
    coeffs: &[[f64; 3]],
    view: &Vector3<f64>,
    d_color: &[f64; 3],
) -> (Vec<[f64; 3]>, Vector3<f64>) {
    let len = view.norm();
    let d = view / len;
    let (b, g) = basis(degree, &d);
    let mut raw = [0.5; 3];
    for (bj, cj) in b.iter().zip(coeffs) {
        for ch in 0..3 {
            raw[ch] += bj * cj[ch];
        }
    }
    // The clamp passes gradient only strictly inside the range.
    let mut dc = *d_color;
    for ch in 0..3 {
        if !(raw[ch] > 0.0 && raw[ch] < 1.0) {
            dc[ch] = 0.0;
        }
    }
    let d_coeffs: Vec<[f64; 3]> = b.iter().map(|bj| dc.map(|v| v * bj)).collect();
    let mut d_dir = Vector3::zeros();
    if degree > 0 {
        for (gj, cj) in g.iter().zip(coeffs) {
            let s: f64 = (0..3).map(|ch| cj[ch] * dc[ch]).sum();
            d_dir += gj * s;
        }
    }
    // d = v / |v|  =>  dv = (I - d dᵀ) dd / |v|.
    let d_view = (d_dir - d * d.dot(&d_dir)) / len;
    (d_coeffs, d_view)
}

/// Degree-0 coefficient producing `color` (before clamping).
pub fn dc_from_color(color: f64) -> f64 {
    (color - 0.5) / C0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coeffs(n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|j| {
                let f = j as f64;
                [0.1 * (f * 1.3).sin(), 0.08 * (f * 0.7).cos(), -0.05 * (f + 0.5).sin()]
            })
            .collect()
    }

    #[test]
    fn degree_zero_is_view_independent() {
        let c = [[dc_from_color(0.2), dc_from_color(0.5), dc_from_color(0.9)]];
        for v in [Vector3::new(1.0, 2.0, 3.0), Vector3::new(-4.0, 0.1, 0.2)] {
            let out = eval(0, &c, &v);
            assert_relative_eq!(out[0], 0.2, epsilon = 1e-12);
            assert_relative_eq!(out[2], 0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn basis_is_orthonormal_on_sphere() {
        // Monte-Carlo-free check: integrate with a Fibonacci lattice.
        let m = 20000;
        let n = num_coeffs(3);
        let mut gram = vec![0.0; n * n];
        for i in 0..m {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / m as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let (b, _) = basis(3, &Vector3::new(r * phi.cos(), r * phi.sin(), z));
            for a in 0..n {
                for c in 0..n {
                    gram[a * n + c] += b[a] * b[c] * 4.0 * std::f64::consts::PI / m as f64;
                }
            }
        }
        for a in 0..n {
            for c in 0..n {
                let expect = if a == c { 1.0 } else { 0.0 };
                assert!((gram[a * n + c] - expect).abs() < 2e-3, "{a} {c} {}", gram[a * n + c]);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for degree in 0..=MAX_DEGREE {
            let c = coeffs(num_coeffs(degree));
            let v = Vector3::new(0.3, -0.8, 1.7);
            let dcol = [0.7, -0.4, 1.1];
            let f = |c: &[[f64; 3]], v: &Vector3<f64>| {
                let o = eval(degree, c, v);
                (0..3).map(|k| o[k] * dcol[k]).sum::<f64>()
            };
            let (dc, dv) = backward(degree, &c, &v, &dcol);
            let h = 1e-6;
            for k in 0..3 {
                let mut a = v;
                let mut b = v;
                a[k] += h;
                b[k] -= h;
                assert_relative_eq!(dv[k], (f(&c, &a) - f(&c, &b)) / (2.0 * h), epsilon = 1e-8);
            }
            for j in 0..c.len() {
                for ch in 0..3 {
                    let mut a = c.clone();
                    let mut b = c.clone();
                    a[j][ch] += h;
                    b[j][ch] -= h;
                    assert_relative_eq!(dc[j][ch], (f(&a, &v) - f(&b, &v)) / (2.0 * h), epsilon = 1e-8);
                }
            }
        }
    }
}
