//! The canonical-space 2D Gaussian surfel.
//!
//! A surfel is a planar Gaussian disk embedded in 3D: a center, a tangent frame
//! `[t_u, t_v, t_w]` stored as a quaternion, two tangent-plane scales stored in
//! log space, a pre-sigmoid opacity and a degree-0 RGB color.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Number of scalar parameters carried by one surfel.
pub const SURFEL_PARAMS: usize = 13;

/// Offsets into the flat per-surfel parameter row.
pub mod offsets {
    pub const CENTER: usize = 0;
    pub const ROT: usize = 3;
    pub const LOG_SCALE: usize = 7;
    pub const OPACITY: usize = 9;
    pub const COLOR: usize = 10;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub center: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`.
    pub rot_q: [f64; 4],
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

/// Orthonormal right-handed tangent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub t_u: Vector3<f64>,
    pub t_v: Vector3<f64>,
    pub t_w: Vector3<f64>,
}

impl Frame {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.t_u, self.t_v, self.t_w])
    }
}

/// Homogeneous tangent-plane transform and the rank-2 covariance of a surfel.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfelGeometry {
    pub h: Matrix4<f64>,
    pub sigma: Matrix3<f64>,
}

/// A surfel after deformation into pose space: center plus the two scaled
/// tangent axes `s_u t_u`, `s_v t_v` (no longer orthogonal in general after
/// blended skinning).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosedSurfel {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    /// Post-sigmoid opacity.
    pub opacity: f64,
}

impl PosedSurfel {
    pub fn covariance(&self) -> Matrix3<f64> {
        self.axis_u * self.axis_u.transpose() + self.axis_v * self.axis_v.transpose()
    }

    pub fn point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.center + self.axis_u * u + self.axis_v * v
    }
}

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Surfel {
    pub fn new(center: Vector3<f64>, rot_q: [f64; 4], scale: [f64; 2], opacity: f64, color: [f64; 3]) -> Self {
        Surfel {
            center,
            rot_q,
            log_scale: [scale[0].ln(), scale[1].ln()],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scales(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn frame(&self) -> Result<Frame> {
        build_frame(&self.rot_q)
    }

    pub fn validate(&self) -> Result<()> {
        let [su, sv] = self.scales();
        if !(su.is_finite() && sv.is_finite() && su > 0.0 && sv > 0.0) {
            return Err(Error::invalid(format!("surfel scale ({su}, {sv}) not finite and positive")));
        }
        if !self.center.iter().all(|c| c.is_finite()) || !self.opacity_logit.is_finite() {
            return Err(Error::invalid("non-finite surfel center or opacity"));
        }
        build_frame(&self.rot_q).map(|_| ())
    }

    /// The surfel as it sits in canonical space, without deformation.
    pub fn rest_posed(&self) -> Result<PosedSurfel> {
        let frame = self.frame()?;
        let [su, sv] = self.scales();
        Ok(PosedSurfel { center: self.center, axis_u: frame.t_u * su, axis_v: frame.t_v * sv, opacity: self.opacity() })
    }

    pub fn geometry(&self) -> Result<SurfelGeometry> {
        let frame = self.frame()?;
        let [su, sv] = self.scales();
        let mut h = Matrix4::zeros();
        h.fixed_view_mut::<3, 1>(0, 0).copy_from(&(frame.t_u * su));
        h.fixed_view_mut::<3, 1>(0, 1).copy_from(&(frame.t_v * sv));
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center);
        h[(3, 3)] = 1.0;
        Ok(SurfelGeometry { h, sigma: covariance_from(&frame, su, sv) })
    }

    pub fn to_params(&self) -> [f64; SURFEL_PARAMS] {
        let c = &self.center;
        let q = &self.rot_q;
        [
            c.x,
            c.y,
            c.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.log_scale[0],
            self.log_scale[1],
            self.opacity_logit,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }

    pub fn from_params(p: &[f64; SURFEL_PARAMS]) -> Self {
        Surfel {
            center: Vector3::new(p[0], p[1], p[2]),
            rot_q: [p[3], p[4], p[5], p[6]],
            log_scale: [p[7], p[8]],
            opacity_logit: p[9],
            color: [p[10], p[11], p[12]],
        }
    }

    /// Rescale `rot_q` to unit length.
    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.rot_q);
        if n > 0.0 && n.is_finite() {
            for c in &mut self.rot_q {
                *c /= n;
            }
        }
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of the normalized quaternion.
///
/// Non-unit inputs are normalized first so that gradients taken through this
/// map stay consistent with the stored (renormalized) parameters.
pub fn quat_to_matrix(q: &[f64; 4]) -> Result<Matrix3<f64>> {
    if !q.iter().all(|c| c.is_finite()) {
        return Err(Error::invalid(format!("non-finite quaternion {q:?}")));
    }
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(Error::invalid("zero-length quaternion"));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Vector-Jacobian product of [`quat_to_matrix`]: maps `dL/dR` to `dL/dq`
/// for the raw (possibly non-unit) quaternion.
pub fn quat_to_matrix_vjp(q: &[f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q);
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let g_hat = [d_r.dot(&dw), d_r.dot(&dx), d_r.dot(&dy), d_r.dot(&dz)];
    let q_hat = [w, x, y, z];
    let radial: f64 = g_hat.iter().zip(&q_hat).map(|(g, q)| g * q).sum();
    std::array::from_fn(|i| (g_hat[i] - q_hat[i] * radial) / n)
}

pub fn build_frame(rot_q: &[f64; 4]) -> Result<Frame> {
    let r = quat_to_matrix(rot_q)?;
    let t_u: Vector3<f64> = r.column(0).into();
    let t_v: Vector3<f64> = r.column(1).into();
    Ok(Frame { t_u, t_v, t_w: t_u.cross(&t_v) })
}

/// Point on the surfel plane at local coordinates `(u, v)`.
pub fn tangent_point(surfel: &Surfel, u: f64, v: f64) -> Result<Vector3<f64>> {
    let f = surfel.frame()?;
    let [su, sv] = surfel.scales();
    Ok(surfel.center + f.t_u * (su * u) + f.t_v * (sv * v))
}

/// Unnormalized 2D Gaussian `exp(-(u² + v²) / 2)`.
#[inline]
pub fn kernel(u: f64, v: f64) -> f64 {
    (-0.5 * (u * u + v * v)).exp()
}

fn covariance_from(frame: &Frame, su: f64, sv: f64) -> Matrix3<f64> {
    let a = frame.t_u * su;
    let b = frame.t_v * sv;
    a * a.transpose() + b * b.transpose()
}

/// `R S Sᵀ Rᵀ` with `S = diag(s_u, s_v, 0)`.
pub fn covariance(surfel: &Surfel) -> Result<Matrix3<f64>> {
    let [su, sv] = surfel.scales();
    Ok(covariance_from(&surfel.frame()?, su, sv))
}
