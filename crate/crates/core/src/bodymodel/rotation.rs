//! Axis-angle rotations (Rodrigues) with analytic derivatives.

use nalgebra::{Matrix3, Vector3};
use std::f64::consts::PI;

/// Below this angle the trigonometric coefficients switch to their Taylor
/// series; the closed forms lose precision to cancellation there.
const SERIES_ANGLE: f64 = 1e-2;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients of `R = I + a K + b K^2` with `K = [w]x`, plus
/// `c = a'(t)/t` and `d = b'(t)/t` used by the derivative.
fn coefficients(angle: f64) -> (f64, f64, f64, f64) {
    let t2 = angle * angle;
    if angle < SERIES_ANGLE {
        let t4 = t2 * t2;
        let a = 1.0 - t2 / 6.0 + t4 / 120.0;
        let b = 0.5 - t2 / 24.0 + t4 / 720.0;
        let c = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0;
        let d = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0;
        (a, b, c, d)
    } else {
        let (s, co) = angle.sin_cos();
        let a = s / angle;
        let b = (1.0 - co) / t2;
        let c = (angle * co - s) / (t2 * angle);
        let d = (angle * s - 2.0 * (1.0 - co)) / (t2 * t2);
        (a, b, c, d)
    }
}

/// Rotation matrix for an axis-angle vector.
pub fn axis_angle_to_matrix(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = coefficients(w.norm());
    let k = skew(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix and its partial derivatives with respect to each
/// axis-angle component.
pub fn axis_angle_jacobian(w: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, c, d) = coefficients(w.norm());
    let k = skew(w);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let mut dr = [Matrix3::zeros(); 3];
    for (i, out) in dr.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(i, 1.0));
        *out = e * a + (e * k + k * e) * b + k * (c * w[i]) + k2 * (d * w[i]);
    }
    (r, dr)
}

/// Map an axis-angle vector to the equivalent one with magnitude below 2π
/// (and at most π), preserving the rotation it represents.
pub fn canonicalize(w: &Vector3<f64>) -> Vector3<f64> {
    let angle = w.norm();
    if angle <= PI || !angle.is_finite() {
        return *w;
    }
    let axis = w / angle;
    let mut wrapped = angle.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    axis * wrapped
}

/// Rotation matrix of a (not necessarily normalized) quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    unit_quaternion_matrix(w, x, y, z)
}

fn unit_quaternion_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient with respect to the rotation matrix back to the raw
/// (unnormalized) quaternion components.
pub fn quaternion_matrix_backward(q: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = d_rot;
    // dR/dw, dR/dx, dR/dy, dR/dz for a unit quaternion parameterization.
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    let du = [g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz)];
    // Normalization: du/dq = (I - u u^T) / n.
    let proj: f64 = du.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
    [
        (du[0] - proj * u[0]) / n,
        (du[1] - proj * u[1]) / n,
        (du[2] - proj * u[2]) / n,
        (du[3] - proj * u[3]) / n,
    ]
}
