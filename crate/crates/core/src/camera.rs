use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera, OpenCV convention: +x right, +y down, +z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub near: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!("camera {}: focal lengths must be positive", self.id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!("camera {}: empty resolution", self.id)));
        }
        if (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max() > 1e-7 {
            return Err(Error::invalid(format!("camera {}: rotation is not orthonormal", self.id)));
        }
        if !(self.near >= 0.0) {
            return Err(Error::invalid(format!("camera {}: negative near clip", self.id)));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
        near: f64,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            id,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            near,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera-space ray direction through the center of pixel `(i, j)`,
    /// normalized to unit depth.
    #[inline]
    pub fn ray(&self, i: u32, j: u32) -> Vector3<f64> {
        Vector3::new(
            (i as f64 + 0.5 - self.cx) / self.fx,
            (j as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Pixel coordinates (continuous, pixel centers at `.5`) of a camera-space point.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy)
    }

    pub fn center_world(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}
