use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bodymodel::rotation::axis_angle_to_matrix;
use crate::error::{Error, Result};

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Camera space is x right, y down, z forward; pixel `(i, j)` is sampled at
/// its center `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    /// World-to-camera rotation, row-major.
    #[serde(default = "identity_rows")]
    pub rotation: [[f64; 3]; 3],
    #[serde(default)]
    pub translation: [f64; 3],
}

fn default_near() -> f64 {
    0.01
}

fn default_far() -> f64 {
    100.0
}

fn identity_rows() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

impl Camera {
    /// Camera at the world origin looking down +z.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: default_near(),
            far: default_far(),
            rotation: identity_rows(),
            translation: [0.0; 3],
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Read and validate a camera JSON file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cam: Camera = crate::error::read_json(path)?;
        cam.validate()?;
        Ok(cam)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::error::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!("camera focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Validation(format!("camera needs 0 < near < far, got {} {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera image size must be non-zero".into()));
        }
        let r = self.rotation_matrix();
        if (r * r.transpose() - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::Validation("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::new(self.translation[0], self.translation[1], self.translation[2])
    }

    pub fn set_extrinsics(&mut self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) {
        for (r, row) in self.rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rotation[(r, c)];
            }
        }
        self.translation = [translation.x, translation.y, translation.z];
    }

    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    /// Pinhole projection of a camera-space point.
    pub fn project_view(&self, v: &Vector3<f64>) -> (f64, f64) {
        (self.fx * v.x / v.z + self.cx, self.fy * v.y / v.z + self.cy)
    }

    /// Rotate this camera about a vertical (camera y) axis through `pivot`
    /// (world coordinates) by `angle` radians, keeping the pivot in view.
    pub fn orbited(&self, pivot: &Vector3<f64>, angle: f64) -> Camera {
        let r = self.rotation_matrix();
        let t = self.translation_vector();
        let axis_world = r.transpose() * Vector3::y();
        let spin = axis_angle_to_matrix(&(axis_world * angle));
        // World points are rotated by spin^-1 about the pivot before viewing.
        let new_r = r * spin.transpose();
        let new_t = r * pivot + t - new_r * pivot;
        let mut cam = self.clone();
        cam.set_extrinsics(&new_r, &new_t);
        cam
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        let mut c = Camera::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap();
        c.near = 2.0;
        c.far = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn orbit_half_turn_keeps_pivot_depth() {
        let cam = Camera::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let pivot = Vector3::new(0.1, 0.0, 2.0);
        let back = cam.orbited(&pivot, std::f64::consts::PI);
        assert_relative_eq!(back.to_view(&pivot), cam.to_view(&pivot), epsilon = 1e-12);
        // A point in front of the pivot ends up behind it.
        let front = Vector3::new(0.1, 0.0, 1.8);
        assert!(back.to_view(&front).z > back.to_view(&pivot).z);
        assert_relative_eq!(back.center(), Vector3::new(0.2, 0.0, 4.0), epsilon = 1e-12);
    }
}
