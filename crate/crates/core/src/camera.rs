//! Pinhole camera with OpenCV conventions: x right, y down, z forward.
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its centre is at `+0.5`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: [
                [rotation[(0, 0)], rotation[(0, 1)], rotation[(0, 2)]],
                [rotation[(1, 0)], rotation[(1, 1)], rotation[(1, 2)]],
                [rotation[(2, 0)], rotation[(2, 1)], rotation[(2, 2)]],
            ],
            translation: [translation.x, translation.y, translation.z],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("camera", "view direction parallel to up"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Camera::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0, r, t, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera", format!("focal lengths must be positive, got {} / {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "zero image size"));
        }
        let r = self.r();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || r.determinant() < 0.0 {
            return Err(Error::invalid("camera", format!("rotation is not orthonormal (error {err:.2e})")));
        }
        Ok(())
    }

    pub fn r(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation.concat())
    }

    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r().transpose() * self.t())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r() * p + self.t()
    }

    /// Continuous pixel coordinates and camera depth of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let c = self.to_camera(p);
        Vector3::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    /// Unit ray direction in camera coordinates through continuous pixel
    /// position `(x, y)`.
    pub fn ray_camera(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0).normalize()
    }

    /// World-space origin and unit direction of the ray through the centre of
    /// pixel `(px, py)`.
    pub fn pixel_ray(&self, px: usize, py: usize) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.ray_camera(px as f64 + 0.5, py as f64 + 0.5);
        (self.center(), self.r().transpose() * d)
    }

    /// The same view at `1/factor` resolution.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::invalid(
                "downsampling factor",
                format!("{factor} does not divide {}x{}", self.width, self.height),
            ));
        }
        let s = factor as f64;
        Ok(Camera {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        })
    }
}
