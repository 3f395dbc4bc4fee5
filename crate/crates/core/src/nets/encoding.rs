use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// `x -> [x, sin(2^0 π x), cos(2^0 π x), ..., sin(2^(L-1) π x), cos(2^(L-1) π x)]`,
/// each block holding the three coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PosEncoding {
    pub fn new(num_frequencies: usize, include_input: bool) -> Self {
        PosEncoding {
            num_frequencies,
            include_input,
        }
    }

    pub fn output_dim(&self) -> usize {
        3 * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    pub fn encode_into(&self, x: &Vector3<f64>, out: &mut [f64]) {
        let mut o = 0;
        if self.include_input {
            out[..3].copy_from_slice(x.as_slice());
            o = 3;
        }
        for j in 0..self.num_frequencies {
            let f = (1u64 << j) as f64 * PI;
            for c in 0..3 {
                let (s, co) = (f * x[c]).sin_cos();
                out[o + c] = s;
                out[o + 3 + c] = co;
            }
            o += 6;
        }
    }

    pub fn encode(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    /// Pull a gradient with respect to the encoding back to `x`.
    pub fn backward(&self, x: &Vector3<f64>, grad: &[f64]) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        let mut o = 0;
        if self.include_input {
            g += Vector3::new(grad[0], grad[1], grad[2]);
            o = 3;
        }
        for j in 0..self.num_frequencies {
            let f = (1u64 << j) as f64 * PI;
            for c in 0..3 {
                let (s, co) = (f * x[c]).sin_cos();
                g[c] += f * (co * grad[o + c] - s * grad[o + 3 + c]);
            }
            o += 6;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_single_frequency() {
        let e = PosEncoding::new(1, true);
        assert_eq!(e.encode(&Vector3::zeros()), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn no_frequencies_is_identity() {
        let e = PosEncoding::new(0, true);
        let x = Vector3::new(0.3, -2.0, 7.5);
        assert_eq!(e.encode(&x), vec![0.3, -2.0, 7.5]);
    }

    #[test]
    fn matches_direct_trigonometry() {
        let e = PosEncoding::new(4, true);
        let x = Vector3::new(0.123, -0.456, 0.789);
        let out = e.encode(&x);
        for j in 0..4 {
            for c in 0..3 {
                let arg = 2f64.powi(j as i32) * PI * x[c];
                assert!((out[3 + 6 * j + c] - arg.sin()).abs() < 1e-12);
                assert!((out[3 + 6 * j + 3 + c] - arg.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let e = PosEncoding::new(3, true);
        let x = Vector3::new(0.2, -0.1, 0.35);
        let w: Vec<f64> = (0..e.output_dim()).map(|i| (i as f64 * 0.37).cos()).collect();
        let f = |x: &Vector3<f64>| e.encode(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = e.backward(&x, &w);
        let h = 1e-6;
        for c in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            assert!((g[c] - (f(&xp) - f(&xm)) / (2.0 * h)).abs() < 1e-7);
        }
    }
}
