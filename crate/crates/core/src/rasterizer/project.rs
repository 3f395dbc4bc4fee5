//! Perspective projection of 3D Gaussians to screen-space Gaussians.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::camera::Camera;

/// Screen-space low-pass dilation added to the projected covariance diagonal (px²).
pub const DILATION: f64 = 0.3;

/// Mahalanobis radius of the screen-space footprint; contributions beyond
/// it are exactly zero.
pub const CUTOFF_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z of the center.
    pub depth: f64,
    pub view: Vector3<f64>,
    pub view_cov: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// Half extents of the footprint's bounding rectangle.
    pub half_extent: Vector2<f64>,
}

fn projection_jacobian(camera: &Camera, v: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / v.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * v.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * v.y * iz2,
    )
}

/// Project a Gaussian; `None` when the center lies outside `(near, far)` or
/// the footprint is degenerate.
pub fn project(mean: &Vector3<f64>, cov: &Matrix3<f64>, camera: &Camera) -> Option<Projected> {
    let rot = camera.rotation_matrix();
    let view = rot * mean + camera.translation_vector();
    if !(view.z > camera.near && view.z < camera.far) {
        return None;
    }
    let view_cov = rot * cov * rot.transpose();
    let jacobian = projection_jacobian(camera, &view);
    let mut cov2d = jacobian * view_cov * jacobian.transpose();
    cov2d[(0, 0)] += DILATION;
    cov2d[(1, 1)] += DILATION;
    // Keep exact symmetry.
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -off, -off, cov2d[(0, 0)]) / det;
    let (u, v) = camera.project_view(&view);
    Some(Projected {
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: view.z,
        view,
        view_cov,
        jacobian,
        half_extent: Vector2::new(
            CUTOFF_SIGMAS * cov2d[(0, 0)].sqrt(),
            CUTOFF_SIGMAS * cov2d[(1, 1)].sqrt(),
        ),
    })
}

/// Gradients with respect to a world-space Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectGrad {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// Pull screen-space gradients (mean, symmetric covariance, view depth)
/// back to the world-space mean and covariance.
pub fn project_backward(
    p: &Projected,
    camera: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
    d_depth: f64,
) -> ProjectGrad {
    let rot = camera.rotation_matrix();
    let (x, y, z) = (p.view.x, p.view.y, p.view.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    let j = &p.jacobian;
    let d_view_cov = j.transpose() * d_cov2d * j;
    let d_j = 2.0 * d_cov2d * j * p.view_cov;

    let mut dv = Vector3::zeros();
    dv.x += d_mean2d.x * fx * iz;
    dv.y += d_mean2d.y * fy * iz;
    dv.z += -d_mean2d.x * fx * x * iz2 - d_mean2d.y * fy * y * iz2;
    dv.z += d_depth;
    dv.x += d_j[(0, 2)] * (-fx * iz2);
    dv.y += d_j[(1, 2)] * (-fy * iz2);
    dv.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);

    ProjectGrad {
        mean: rot.transpose() * dv,
        cov: rot.transpose() * d_view_cov * rot,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bodymodel::rotation::axis_angle_to_matrix;
    use approx::assert_relative_eq;

    fn camera() -> Camera {
        Camera::new(120.0, 110.0, 32.0, 30.0, 64, 60).unwrap()
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let p = project(&Vector3::new(0.0, 0.0, 3.0), &(Matrix3::identity() * 0.01), &camera()).unwrap();
        assert_eq!(p.mean2d, Vector2::new(32.0, 30.0));
        assert_eq!(p.depth, 3.0);
    }

    #[test]
    fn isotropic_covariance_first_order() {
        let s = 0.02;
        let z = 2.5;
        let cam = camera();
        let p = project(&Vector3::new(0.0, 0.0, z), &(Matrix3::identity() * s * s), &cam).unwrap();
        assert_relative_eq!(p.cov2d[(0, 0)], (cam.fx * s / z).powi(2) + DILATION, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(1, 1)], (cam.fy * s / z).powi(2) + DILATION, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = camera();
        assert!(project(&Vector3::new(0.0, 0.0, cam.near), &Matrix3::identity(), &cam).is_none());
        assert!(project(&Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity(), &cam).is_none());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut cam = camera();
        cam.set_extrinsics(&axis_angle_to_matrix(&Vector3::new(0.1, -0.2, 0.05)), &Vector3::new(0.1, 0.0, 0.3));
        let mean = Vector3::new(0.2, -0.15, 2.0);
        let a = Matrix3::new(0.03, 0.01, 0.0, -0.02, 0.04, 0.01, 0.005, 0.0, 0.02);
        let cov = a * a.transpose();
        let gm = Vector2::new(0.7, -1.3);
        let gc = Matrix2::new(0.4, 0.25, 0.25, -0.6);
        let gd = 0.9;
        let f = |m: &Vector3<f64>, c: &Matrix3<f64>| {
            let p = project(m, c, &cam).unwrap();
            gm.dot(&p.mean2d) + gc.dot(&p.cov2d) + gd * p.depth
        };
        let p = project(&mean, &cov, &cam).unwrap();
        let g = project_backward(&p, &cam, &gm, &gc, gd);
        let h = 1e-6;
        for i in 0..3 {
            let mut mp = mean;
            let mut mm = mean;
            mp[i] += h;
            mm[i] -= h;
            assert_relative_eq!(g.mean[i], (f(&mp, &cov) - f(&mm, &cov)) / (2.0 * h), epsilon = 1e-6);
        }
        for r in 0..3 {
            for c in 0..3 {
                let mut cp = cov;
                let mut cm = cov;
                cp[(r, c)] += h;
                cm[(r, c)] -= h;
                assert_relative_eq!(g.cov[(r, c)], (f(&mean, &cp) - f(&mean, &cm)) / (2.0 * h), epsilon = 1e-5);
            }
        }
    }
}
