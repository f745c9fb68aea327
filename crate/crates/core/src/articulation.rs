//! Skeleton, forward kinematics and linear blend skinning of surfels.
//!
//! Surfels live in a canonical T-pose. For every frame the pose vector
//! (optionally corrected by the pose MLP) drives forward kinematics; each
//! surfel is then carried into pose space by the weighted sum of per-joint
//! skinning transforms, with weights given by the nearest rig vertex and
//! optionally refined by the LBS MLP on the encoded canonical position.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::surfel::{quat_to_matrix, PosedSurfel, Surfel};

/// Floor added to nearest-vertex weights before taking their log.
pub const WEIGHT_FLOOR: f64 = 1e-8;

pub const DEFAULT_ENCODING_LEVELS: usize = 4;
pub const LBS_HIDDEN: [usize; 2] = [64, 64];
pub const POSE_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest rotation relative to the parent, quaternion `(w, x, y, z)`.
    pub rest_rotation: [f64; 4],
    /// Rest offset from the parent joint, in the parent frame.
    pub rest_translation: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    rest_local: Vec<Matrix3<f64>>,
    rest_world_inv: Vec<Matrix4<f64>>,
    rest_positions: Vec<Vector3<f64>>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::invalid("skeleton needs at least one joint"));
        }
        let mut roots = 0;
        for (k, j) in joints.iter().enumerate() {
            match j.parent {
                None => roots += 1,
                Some(p) if p >= k => {
                    return Err(Error::invalid(format!("joint {k} has parent {p}; parents must precede children")))
                }
                Some(_) => {}
            }
        }
        if roots != 1 {
            return Err(Error::invalid(format!("skeleton has {roots} roots, expected exactly one")));
        }
        let rest_local = joints
            .iter()
            .map(|j| quat_to_matrix(&j.rest_rotation))
            .collect::<Result<Vec<_>>>()?;
        let mut skel = Skeleton { joints, rest_local, rest_world_inv: Vec::new(), rest_positions: Vec::new() };
        let rest = skel.world_transforms(&vec![0.0; 3 * skel.len()]);
        skel.rest_positions = rest.iter().map(|m| m.fixed_view::<3, 1>(0, 3).into()).collect();
        skel.rest_world_inv = rest.iter().map(rigid_inverse).collect();
        Ok(skel)
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    /// Joint centers in the canonical rest pose.
    pub fn rest_positions(&self) -> &[Vector3<f64>] {
        &self.rest_positions
    }

    fn local(&self, k: usize, theta: &[f64]) -> Matrix4<f64> {
        let j = &self.joints[k];
        let r = self.rest_local[k] * rodrigues(&axis_angle(theta, k));
        homogeneous(&r, &j.rest_translation)
    }

    fn world_transforms(&self, theta: &[f64]) -> Vec<Matrix4<f64>> {
        let mut world: Vec<Matrix4<f64>> = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let local = self.local(k, theta);
            let m = match self.joints[k].parent {
                Some(p) => world[p] * local,
                None => local,
            };
            world.push(m);
        }
        world
    }
}

fn axis_angle(theta: &[f64], k: usize) -> Vector3<f64> {
    Vector3::new(theta[3 * k], theta[3 * k + 1], theta[3 * k + 2])
}

fn homogeneous(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
    let rt = r.transpose();
    homogeneous(&rt, &(-(rt * t)))
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients `A = sin θ / θ`, `B = (1 - cos θ) / θ²` and their
/// derivatives divided by θ, with series expansions near zero.
fn rodrigues_coefficients(angle: f64) -> (f64, f64, f64, f64) {
    let t2 = angle * angle;
    if angle < 1e-4 {
        (
            1.0 - t2 / 6.0,
            0.5 - t2 / 24.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        )
    } else {
        let (s, c) = angle.sin_cos();
        (
            s / angle,
            (1.0 - c) / t2,
            (angle * c - s) / (t2 * angle),
            (angle * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn rodrigues(v: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coefficients(v.norm());
    let k = skew(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix and its partial derivatives with respect to each
/// component of the axis-angle vector.
pub fn rodrigues_jacobian(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = rodrigues_coefficients(v.norm());
    let k = skew(v);
    let k2 = k * k;
    let r = Matrix3::identity() + k * a + k2 * b;
    let d = std::array::from_fn(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        e * a + (e * k + k * e) * b + k * (da * v[i]) + k2 * (db * v[i])
    });
    (r, d)
}

/// Map an axis-angle vector to the equivalent one with magnitude at most π.
pub fn wrap_axis_angle(v: Vector3<f64>) -> Vector3<f64> {
    let angle = v.norm();
    if angle <= PI {
        return v;
    }
    let wrapped = angle - 2.0 * PI * (angle / (2.0 * PI)).round();
    v * (wrapped / angle)
}

pub fn wrap_pose(theta: &mut [f64]) {
    for c in theta.chunks_exact_mut(3) {
        let w = wrap_axis_angle(Vector3::new(c[0], c[1], c[2]));
        c.copy_from_slice(w.as_slice());
    }
}

/// Per-frame pose: dataset pose, shape metadata and the calibration offset.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub theta_t: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta_theta: Vec<f64>,
}

impl PoseParams {
    pub fn new(theta_t: Vec<f64>, beta: Vec<f64>) -> Self {
        let delta_theta = vec![0.0; theta_t.len()];
        PoseParams { theta_t, beta, delta_theta }
    }

    /// `theta_T + delta_theta`, wrapped into the principal range.
    pub fn theta(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.theta_t.iter().zip(&self.delta_theta).map(|(a, b)| a + b).collect();
        wrap_pose(&mut t);
        t
    }
}

/// World and skinning transforms of every joint at one pose.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTransforms {
    /// Joint-to-world transforms; at zero pose these are the rest transforms.
    pub world: Vec<Matrix4<f64>>,
    /// `world · rest⁻¹`: maps canonical points into pose space (identity at zero pose).
    pub skinning: Vec<Matrix4<f64>>,
}

impl JointTransforms {
    pub fn joint_positions(&self) -> Vec<Vector3<f64>> {
        self.world.iter().map(|m| m.fixed_view::<3, 1>(0, 3).into()).collect()
    }

    pub fn rotation(&self, k: usize) -> Matrix3<f64> {
        self.skinning[k].fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self, k: usize) -> Vector3<f64> {
        self.skinning[k].fixed_view::<3, 1>(0, 3).into()
    }
}

pub fn forward_kinematics(skel: &Skeleton, theta: &[f64]) -> Result<JointTransforms> {
    if theta.len() != 3 * skel.len() {
        return Err(Error::invalid(format!(
            "pose has {} entries, skeleton with {} joints needs {}",
            theta.len(),
            skel.len(),
            3 * skel.len()
        )));
    }
    if !theta.iter().all(|t| t.is_finite()) {
        return Err(Error::invalid("non-finite pose entry"));
    }
    let world = skel.world_transforms(theta);
    let skinning = world.iter().zip(&skel.rest_world_inv).map(|(w, inv)| w * inv).collect();
    Ok(JointTransforms { world, skinning })
}

/// Gradient of a loss with respect to the pose vector, given its gradient
/// with respect to each joint's skinning rotation and translation.
pub fn forward_kinematics_vjp(
    skel: &Skeleton,
    theta: &[f64],
    transforms: &JointTransforms,
    d_rot: &[Matrix3<f64>],
    d_trans: &[Vector3<f64>],
) -> Vec<f64> {
    let k_count = skel.len();
    let mut d_world: Vec<Matrix4<f64>> = (0..k_count)
        .map(|k| {
            let mut ds = Matrix4::zeros();
            ds.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_rot[k]);
            ds.fixed_view_mut::<3, 1>(0, 3).copy_from(&d_trans[k]);
            ds * skel.rest_world_inv[k].transpose()
        })
        .collect();
    let mut d_theta = vec![0.0; 3 * k_count];
    for k in (0..k_count).rev() {
        let local = skel.local(k, theta);
        let d_local = match skel.joints[k].parent {
            Some(p) => {
                let dl = transforms.world[p].transpose() * d_world[k];
                let contrib = d_world[k] * local.transpose();
                d_world[p] += contrib;
                dl
            }
            None => d_world[k],
        };
        let d_r: Matrix3<f64> = d_local.fixed_view::<3, 3>(0, 0).into();
        let d_e = skel.rest_local[k].transpose() * d_r;
        let (_, jac) = rodrigues_jacobian(&axis_angle(theta, k));
        for i in 0..3 {
            d_theta[3 * k + i] = d_e.dot(&jac[i]);
        }
    }
    d_theta
}

/// Sinusoidal encoding of a canonical position: for each level `l`,
/// `sin(2^l π p)` for x, y, z followed by `cos(2^l π p)` for x, y, z.
pub fn positional_encode(p: &Vector3<f64>, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * levels);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        out.extend((0..3).map(|i| (f * p[i]).sin()));
        out.extend((0..3).map(|i| (f * p[i]).cos()));
    }
    out
}

pub fn positional_encode_vjp(p: &Vector3<f64>, levels: usize, grad: &[f64]) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        for i in 0..3 {
            let (s, c) = (f * p[i]).sin_cos();
            g[i] += f * (c * grad[6 * l + i] - s * grad[6 * l + 3 + i]);
        }
    }
    g
}

/// Corrected skinning weights: softmax over joints of
/// `log(W_nearest + 1e-8) + logits`.
pub fn correct_weights(nearest: &[f64], logits: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = nearest.iter().zip(logits).map(|(w, o)| (w + WEIGHT_FLOOR).ln() + o).collect();
    softmax(&z)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax_vjp(w: &[f64], grad: &[f64]) -> Vec<f64> {
    let dot: f64 = w.iter().zip(grad).map(|(a, b)| a * b).sum();
    w.iter().zip(grad).map(|(wk, gk)| wk * (gk - dot)).collect()
}

/// `(Σ w_k R_k, Σ w_k T_k)` over the skinning transforms. The blended
/// rotation is deliberately left un-orthonormalized.
pub fn blend_transforms(weights: &[f64], transforms: &JointTransforms) -> (Matrix3<f64>, Vector3<f64>) {
    let mut r = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let s = &transforms.skinning[k];
        r += s.fixed_view::<3, 3>(0, 0) * w;
        t += s.fixed_view::<3, 1>(0, 3) * w;
    }
    (r, t)
}

/// Carry a canonical surfel into pose space: the center is transformed
/// affinely, the scaled tangent axes (and hence `Σ = R Σ_c Rᵀ`) linearly.
pub fn deform_surfel(surfel: &Surfel, r_blend: &Matrix3<f64>, t_blend: &Vector3<f64>) -> Result<PosedSurfel> {
    let f = surfel.frame()?;
    let [su, sv] = surfel.scales();
    Ok(PosedSurfel {
        center: r_blend * surfel.center + t_blend,
        axis_u: r_blend * (f.t_u * su),
        axis_v: r_blend * (f.t_v * sv),
        opacity: surfel.opacity(),
    })
}

/// Nearest-vertex weights plus the two correction networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinField {
    joint_count: usize,
    /// Row-major `surfels × joints`.
    pub nearest_weights: Vec<f64>,
    pub levels: usize,
    pub lbs_mlp: Mlp,
    pub pose_mlp: Mlp,
}

impl SkinField {
    pub fn new(joint_count: usize, nearest_weights: Vec<f64>, levels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut lbs = vec![6 * levels];
        lbs.extend(LBS_HIDDEN);
        lbs.push(joint_count);
        let lbs_mlp = Mlp::new_zero_output(&lbs, rng);
        let pose_mlp = Mlp::new_zero_output(&[3 * joint_count, POSE_HIDDEN, 3 * joint_count], rng);
        Self::from_parts(joint_count, nearest_weights, levels, lbs_mlp, pose_mlp)
    }

    pub fn from_parts(
        joint_count: usize,
        nearest_weights: Vec<f64>,
        levels: usize,
        lbs_mlp: Mlp,
        pose_mlp: Mlp,
    ) -> Result<Self> {
        if joint_count == 0 || nearest_weights.len() % joint_count != 0 {
            return Err(Error::invalid("nearest weight table does not match joint count"));
        }
        if lbs_mlp.input_dim() != 6 * levels || lbs_mlp.output_dim() != joint_count {
            return Err(Error::invalid("LBS network shape does not match encoding levels and joints"));
        }
        if pose_mlp.input_dim() != 3 * joint_count || pose_mlp.output_dim() != 3 * joint_count {
            return Err(Error::invalid("pose network shape does not match joint count"));
        }
        for (i, row) in nearest_weights.chunks_exact(joint_count).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::WeightSum { vertex: i, sum });
            }
        }
        Ok(SkinField { joint_count, nearest_weights, levels, lbs_mlp, pose_mlp })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn surfel_count(&self) -> usize {
        self.nearest_weights.len() / self.joint_count
    }

    pub fn nearest(&self, i: usize) -> &[f64] {
        &self.nearest_weights[i * self.joint_count..(i + 1) * self.joint_count]
    }

    /// Eq.-15-style corrected weights for surfel `i` at encoded position `enc`.
    pub fn corrected_weights(&self, enc: &[f64], i: usize) -> Vec<f64> {
        let logits = self.lbs_mlp.forward(enc, &mut MlpCache::default());
        correct_weights(self.nearest(i), &logits)
    }

    /// `theta_T + MLP_pose(theta_T)`.
    pub fn calibrate_pose(&self, theta_t: &[f64]) -> Vec<f64> {
        calibrate_pose(&self.pose_mlp, theta_t)
    }
}

pub fn calibrate_pose(pose_mlp: &Mlp, theta_t: &[f64]) -> Vec<f64> {
    let delta = pose_mlp.forward(theta_t, &mut MlpCache::default());
    theta_t.iter().zip(&delta).map(|(a, b)| a + b).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::surfel::IDENTITY_QUAT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn chain_skeleton(n: usize) -> Skeleton {
        let joints = (0..n)
            .map(|k| Joint {
                name: format!("j{k}"),
                parent: k.checked_sub(1),
                rest_rotation: if k == 1 { [0.9f64.sqrt(), 0.0, 0.1f64.sqrt(), 0.0] } else { IDENTITY_QUAT },
                rest_translation: if k == 0 { Vector3::new(0.1, 0.2, -0.3) } else { Vector3::new(0.0, 0.5, 0.1) },
            })
            .collect();
        Skeleton::new(joints).unwrap()
    }

    fn random_theta(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        (0..3 * k).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn skeleton_validation() {
        let j = |parent| Joint {
            name: String::new(),
            parent,
            rest_rotation: IDENTITY_QUAT,
            rest_translation: Vector3::zeros(),
        };
        assert!(Skeleton::new(vec![]).is_err());
        assert!(Skeleton::new(vec![j(None), j(None)]).is_err());
        assert!(Skeleton::new(vec![j(None), j(Some(1))]).is_err());
        assert!(Skeleton::new(vec![j(None), j(Some(0))]).is_ok());
    }

    #[test]
    fn zero_pose_reproduces_rest() {
        let skel = chain_skeleton(4);
        let t = forward_kinematics(&skel, &[0.0; 12]).unwrap();
        for (p, q) in t.joint_positions().iter().zip(skel.rest_positions()) {
            assert!((p - q).norm() < 1e-9);
        }
        for s in &t.skinning {
            assert!((s - Matrix4::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn single_joint_quarter_turn() {
        let skel = Skeleton::new(vec![Joint {
            name: "root".into(),
            parent: None,
            rest_rotation: IDENTITY_QUAT,
            rest_translation: Vector3::zeros(),
        }])
        .unwrap();
        let t = forward_kinematics(&skel, &[0.0, 0.0, PI / 2.0]).unwrap();
        let ex = t.world[0].fixed_view::<3, 3>(0, 0) * Vector3::x();
        assert!((ex - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn pose_dimension_mismatch() {
        let skel = chain_skeleton(2);
        assert!(matches!(forward_kinematics(&skel, &[0.0; 5]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn chain_matches_naive_matrix_products() {
        let skel = chain_skeleton(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let theta = random_theta(&mut rng, 3);
            let t = forward_kinematics(&skel, &theta).unwrap();
            // independent chain: explicit per-joint 4x4 products from the root
            let mut acc = Matrix4::identity();
            for k in 0..3 {
                let j = &skel.joints()[k];
                let axis = Vector3::new(theta[3 * k], theta[3 * k + 1], theta[3 * k + 2]);
                let rot = nalgebra::Rotation3::from_scaled_axis(axis);
                let rest = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    j.rest_rotation[0],
                    j.rest_rotation[1],
                    j.rest_rotation[2],
                    j.rest_rotation[3],
                ));
                let mut local = (rest.to_rotation_matrix() * rot).to_homogeneous();
                local.fixed_view_mut::<3, 1>(0, 3).copy_from(&j.rest_translation);
                acc *= local;
                let p: Vector3<f64> = acc.fixed_view::<3, 1>(0, 3).into();
                assert!((p - t.joint_positions()[k]).norm() < 1e-9);
            }
            for k in 0..3 {
                let r = t.rotation(k);
                assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-7);
                assert!((r.determinant() - 1.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn fk_is_deterministic() {
        let skel = chain_skeleton(5);
        let theta = random_theta(&mut ChaCha8Rng::seed_from_u64(1), 5);
        assert_eq!(forward_kinematics(&skel, &theta).unwrap(), forward_kinematics(&skel, &theta).unwrap());
    }

    #[test]
    fn rodrigues_matches_nalgebra_and_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for scale in [1e-7, 1e-5, 1e-3, 0.5, 2.0, 3.0] {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize()
                * scale;
            let (r, jac) = rodrigues_jacobian(&v);
            let oracle = nalgebra::Rotation3::from_scaled_axis(v);
            assert!((r - oracle.matrix()).norm() < 1e-13);
            for i in 0..3 {
                let h = 1e-6;
                let mut vp = v;
                vp[i] += h;
                let mut vm = v;
                vm[i] -= h;
                let fd = (rodrigues(&vp) - rodrigues(&vm)) / (2.0 * h);
                assert!((fd - jac[i]).norm() < 1e-8, "scale {scale} axis {i}");
            }
        }
    }

    #[test]
    fn wrap_keeps_rotation() {
        let v = Vector3::new(2.0, -3.0, 1.5);
        let w = wrap_axis_angle(v);
        assert!(w.norm() <= PI);
        assert!((rodrigues(&v) - rodrigues(&w)).norm() < 1e-12);
        let small = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(wrap_axis_angle(small), small);
    }

    #[test]
    fn pose_params_theta_is_sum() {
        let mut p = PoseParams::new(vec![0.1, 0.2, 0.3], vec![]);
        p.delta_theta = vec![0.01, -0.02, 0.0];
        let t = p.theta();
        assert!((t[0] - 0.11).abs() < 1e-15 && (t[1] - 0.18).abs() < 1e-15 && t[2] == 0.3);
    }

    #[test]
    fn fk_vjp_matches_finite_differences() {
        let skel = chain_skeleton(4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let theta = random_theta(&mut rng, 4);
        let wr: Vec<Matrix3<f64>> = (0..4).map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let wt: Vec<Vector3<f64>> = (0..4).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let loss = |th: &[f64]| {
            let t = forward_kinematics(&skel, th).unwrap();
            (0..4).map(|k| t.rotation(k).dot(&wr[k]) + t.translation(k).dot(&wt[k])).sum::<f64>()
        };
        let t = forward_kinematics(&skel, &theta).unwrap();
        let g = forward_kinematics_vjp(&skel, &theta, &t, &wr, &wt);
        for i in 0..12 {
            let h = 1e-6;
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (loss(&tp) - loss(&tm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn encoding_layout() {
        let z = positional_encode(&Vector3::zeros(), 3);
        assert_eq!(z.len(), 18);
        for l in 0..3 {
            assert_eq!(&z[6 * l..6 * l + 3], &[0.0; 3]);
            assert_eq!(&z[6 * l + 3..6 * l + 6], &[1.0; 3]);
        }
        let e = positional_encode(&Vector3::new(0.5, 0.0, 0.0), 1);
        assert_eq!(e[0], 1.0);
        assert!(e[3].abs() < 1e-15);
    }

    #[test]
    fn encoding_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let e = positional_encode(&p, 4);
        assert_eq!(e.len(), 24);
        let mut idx = 0;
        for l in 0..4 {
            for func in [f64::sin, f64::cos] {
                for c in 0..3 {
                    let want = func(2f64.powi(l) * PI * p[c]);
                    assert!((e[idx] - want).abs() < 1e-15);
                    idx += 1;
                }
            }
        }
    }

    #[test]
    fn encoding_vjp_matches_finite_differences() {
        let p = Vector3::new(0.3, -0.45, 0.8);
        let w: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let g = positional_encode_vjp(&p, 4, &w);
        for i in 0..3 {
            let h = 1e-6;
            let mut pp = p;
            pp[i] += h;
            let mut pm = p;
            pm[i] -= h;
            let f = |q: &Vector3<f64>| positional_encode(q, 4).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_logits_keep_one_hot() {
        for k in 1..=32 {
            for j in 0..k {
                let mut w = vec![0.0; k];
                w[j] = 1.0;
                let c = correct_weights(&w, &vec![0.0; k]);
                for (i, v) in c.iter().enumerate() {
                    if i == j {
                        assert!(*v > 1.0 - 1e-6);
                    } else {
                        assert!(*v < 1e-7 && *v > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_logits_uniform_stays_uniform() {
        let k = 7;
        let c = correct_weights(&vec![1.0 / k as f64; k], &vec![0.0; k]);
        for v in c {
            assert!((v - 1.0 / k as f64).abs() < 1e-15);
        }
    }

    /// Compensated-summation softmax without max subtraction, used as a
    /// higher-precision reference.
    fn softmax_reference(z: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for &x in &e {
            let t = s + x;
            comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            s = t;
        }
        let total = s + comp;
        e.iter().map(|v| v / total).collect()
    }

    #[test]
    fn corrected_weights_match_reference_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let k = rng.random_range(2..24);
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let near: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z: Vec<f64> = near.iter().zip(&logits).map(|(w, o)| (w + WEIGHT_FLOOR).ln() + o).collect();
            let want = softmax_reference(&z);
            let got = correct_weights(&near, &logits);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blend_one_hot_and_identical() {
        let skel = chain_skeleton(3);
        let theta = random_theta(&mut ChaCha8Rng::seed_from_u64(6), 3);
        let t = forward_kinematics(&skel, &theta).unwrap();
        let (r, tr) = blend_transforms(&[0.0, 1.0, 0.0], &t);
        assert_eq!(r, t.rotation(1));
        assert_eq!(tr, t.translation(1));

        let same = JointTransforms { world: vec![t.world[0]; 3], skinning: vec![t.skinning[0]; 3] };
        let (r, tr) = blend_transforms(&[0.2, 0.5, 0.3], &same);
        assert!((r - same.rotation(0)).norm() < 1e-15);
        assert!((tr - same.translation(0)).norm() < 1e-15);
    }

    #[test]
    fn blend_matches_dense_sum() {
        let skel = chain_skeleton(4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = forward_kinematics(&skel, &random_theta(&mut rng, 4)).unwrap();
        let w = softmax(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let dense: Matrix4<f64> = t.skinning.iter().zip(&w).map(|(m, wk)| m * *wk).sum();
        let (r, tr) = blend_transforms(&w, &t);
        assert!((r - dense.fixed_view::<3, 3>(0, 0)).norm() < 1e-12);
        assert!((tr - dense.fixed_view::<3, 1>(0, 3)).norm() < 1e-12);
    }

    #[test]
    fn deform_identity_translation_rotation() {
        let s = Surfel::new(Vector3::new(0.3, 0.1, -0.2), [0.9, 0.1, 0.3, -0.2], [0.2, 0.05], 0.7, [0.0; 3]);
        let sigma_c = crate::surfel::covariance(&s).unwrap();
        let p = deform_surfel(&s, &Matrix3::identity(), &Vector3::zeros()).unwrap();
        assert!((p.center - s.center).norm() < 1e-15);
        assert!((p.covariance() - sigma_c).norm() < 1e-15);

        let shift = Vector3::new(1.0, -2.0, 0.5);
        let p = deform_surfel(&s, &Matrix3::identity(), &shift).unwrap();
        assert!((p.center - (s.center + shift)).norm() < 1e-15);
        assert!((p.covariance() - sigma_c).norm() < 1e-15);

        let rot = rodrigues(&Vector3::new(0.4, -1.2, 0.7));
        let p = deform_surfel(&s, &rot, &Vector3::zeros()).unwrap();
        let mut a: Vec<f64> = p.covariance().symmetric_eigenvalues().iter().copied().collect();
        let mut b: Vec<f64> = sigma_c.symmetric_eigenvalues().iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn calibrate_pose_zero_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new_zero_output(&[6, 8, 6], &mut rng);
        let theta_t = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        assert_eq!(calibrate_pose(&mlp, &theta_t), theta_t);

        // output bias only -> constant correction
        let mut c = mlp.clone();
        let n = c.params().len();
        for (i, p) in c.params_mut()[n - 6..].iter_mut().enumerate() {
            *p = 0.01 * i as f64;
        }
        let got = calibrate_pose(&c, &theta_t);
        for i in 0..6 {
            assert!((got[i] - (theta_t[i] + 0.01 * i as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn calibrate_pose_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut mlp = Mlp::new_zero_output(&[6, 8, 6], &mut rng);
        for p in mlp.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let theta_t: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp| calibrate_pose(m, &theta_t).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let mut cache = MlpCache::default();
        mlp.forward(&theta_t, &mut cache);
        let mut g = vec![0.0; mlp.params().len()];
        mlp.backward(&cache, &w, &mut g);
        for i in 0..g.len() {
            let h = 1e-5;
            let mut mp = mlp.clone();
            mp.params_mut()[i] += h;
            let mut mm = mlp.clone();
            mm.params_mut()[i] -= h;
            let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / scale < 1e-4 || (fd - g[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn skin_field_rejects_bad_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = SkinField::new(2, vec![0.5, 0.5, 0.6, 0.3], 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::WeightSum { vertex: 1, .. }));
    }
}
