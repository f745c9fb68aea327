//! The full differentiable chain for one frame: pose calibration, forward
//! kinematics, weight correction, skinning, rendering and loss, with the
//! matching reverse pass down to every trainable tensor.

use nalgebra::{Matrix3, Vector3};

use crate::articulation::{
    forward_kinematics, forward_kinematics_vjp, positional_encode, positional_encode_vjp, softmax, softmax_vjp,
    JointTransforms, Skeleton, SkinField, WEIGHT_FLOOR,
};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imagebuf::{Image, Plane};
use crate::loss::{loss_l1_grad, loss_mask_grad, loss_ssim_grad, total_loss, LossParts, LossWeights};
use crate::mlp::MlpCache;
use crate::raster::{render, render_backward, PosedGrad, RenderOptions, RenderOutput};
use crate::surfel::{quat_to_matrix, quat_to_matrix_vjp, sigmoid, PosedSurfel, Surfel, SURFEL_PARAMS};
use crate::train::AblationConfig;

/// Everything needed to render the body: canonical surfels, their skinning
/// field and the skeleton.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub surfels: Vec<Surfel>,
    pub skin: SkinField,
    pub skeleton: Skeleton,
}

impl Model {
    pub fn new(surfels: Vec<Surfel>, skin: SkinField, skeleton: Skeleton) -> Result<Self> {
        if skin.surfel_count() != surfels.len() {
            return Err(Error::invalid(format!(
                "{} surfels but {} nearest-weight rows",
                surfels.len(),
                skin.surfel_count()
            )));
        }
        if skin.joint_count() != skeleton.len() {
            return Err(Error::invalid("skin field and skeleton disagree on the joint count"));
        }
        for (i, s) in surfels.iter().enumerate() {
            s.validate().map_err(|e| Error::invalid(format!("surfel {i}: {e}")))?;
        }
        Ok(Model { surfels, skin, skeleton })
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.surfels.iter().map(|s| s.color).collect()
    }
}

/// Intermediate values of the pose-space forward pass.
#[derive(Clone, Debug)]
pub struct Posed {
    /// Pose actually fed to forward kinematics.
    pub theta: Vec<f64>,
    pub transforms: JointTransforms,
    /// Row-major `surfels × joints` skinning weights in use.
    pub weights: Vec<f64>,
    pub blends: Vec<(Matrix3<f64>, Vector3<f64>)>,
    pub surfels: Vec<PosedSurfel>,
    lbs_caches: Vec<MlpCache>,
    pose_cache: MlpCache,
}

/// Skinning weights of every surfel, row-major `surfels × joints`.
pub fn skinning_weights(model: &Model, ablation: &AblationConfig) -> Vec<f64> {
    skinning_weights_cached(model, ablation).0
}

fn skinning_weights_cached(model: &Model, ablation: &AblationConfig) -> (Vec<f64>, Vec<MlpCache>) {
    if !ablation.enable_lbs_opt {
        return (model.skin.nearest_weights.clone(), Vec::new());
    }
    let k = model.skin.joint_count();
    let mut weights = Vec::with_capacity(model.len() * k);
    let mut caches = Vec::with_capacity(model.len());
    for (i, s) in model.surfels.iter().enumerate() {
        let enc = positional_encode(&s.center, model.skin.levels);
        let mut cache = MlpCache::default();
        let logits = model.skin.lbs_mlp.forward(&enc, &mut cache);
        let z: Vec<f64> = model.skin.nearest(i).iter().zip(&logits).map(|(w, o)| (w + WEIGHT_FLOOR).ln() + o).collect();
        weights.extend(softmax(&z));
        caches.push(cache);
    }
    (weights, caches)
}

/// Pose used for forward kinematics: `theta_T`, plus the pose network's
/// correction when calibration is enabled.
pub fn calibrated_theta(skin: &SkinField, theta_t: &[f64], ablation: &AblationConfig) -> Vec<f64> {
    if ablation.enable_pose_calib {
        skin.calibrate_pose(theta_t)
    } else {
        theta_t.to_vec()
    }
}

/// Carry the canonical model into the pose described by `theta_t`.
pub fn pose_model(model: &Model, theta_t: &[f64], ablation: &AblationConfig) -> Result<Posed> {
    let mut pose_cache = MlpCache::default();
    let theta = if ablation.enable_pose_calib {
        let delta = model.skin.pose_mlp.forward(theta_t, &mut pose_cache);
        theta_t.iter().zip(&delta).map(|(a, b)| a + b).collect()
    } else {
        theta_t.to_vec()
    };
    let transforms = forward_kinematics(&model.skeleton, &theta)?;
    let (weights, lbs_caches) = skinning_weights_cached(model, ablation);
    let k = model.skin.joint_count();
    let mut blends = Vec::with_capacity(model.len());
    let mut surfels = Vec::with_capacity(model.len());
    for (i, s) in model.surfels.iter().enumerate() {
        let (r, t) = blend(&weights[i * k..(i + 1) * k], &transforms);
        let frame = quat_to_matrix(&s.rot_q)?;
        let [su, sv] = s.scales();
        surfels.push(PosedSurfel {
            center: r * s.center + t,
            axis_u: r * (frame.column(0) * su),
            axis_v: r * (frame.column(1) * sv),
            opacity: sigmoid(s.opacity_logit),
        });
        blends.push((r, t));
    }
    Ok(Posed { theta, transforms, weights, blends, surfels, lbs_caches, pose_cache })
}

#[inline]
fn blend(weights: &[f64], transforms: &JointTransforms) -> (Matrix3<f64>, Vector3<f64>) {
    crate::articulation::blend_transforms(weights, transforms)
}

/// Gradients for every trainable tensor plus the dataset pose.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    /// Per surfel, in [`Surfel::to_params`] order.
    pub surfels: Vec<[f64; SURFEL_PARAMS]>,
    pub lbs_mlp: Vec<f64>,
    pub pose_mlp: Vec<f64>,
    pub theta_t: Vec<f64>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        ModelGrad {
            surfels: vec![[0.0; SURFEL_PARAMS]; model.len()],
            lbs_mlp: vec![0.0; model.skin.lbs_mlp.params().len()],
            pose_mlp: vec![0.0; model.skin.pose_mlp.params().len()],
            theta_t: vec![0.0; model.skeleton.len() * 3],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.surfels.iter().flatten().chain(&self.lbs_mlp).chain(&self.pose_mlp).chain(&self.theta_t).all(|g| g.is_finite())
    }
}

/// Reverse pass from posed-surfel gradients to the model.
pub fn pose_backward(
    model: &Model,
    posed: &Posed,
    theta_t: &[f64],
    ablation: &AblationConfig,
    grads: &[PosedGrad],
) -> Result<ModelGrad> {
    let k_count = model.skin.joint_count();
    let mut out = ModelGrad::zeros(model);
    let mut d_rot = vec![Matrix3::zeros(); k_count];
    let mut d_trans = vec![Vector3::zeros(); k_count];
    let transforms = &posed.transforms;
    let rots: Vec<Matrix3<f64>> = (0..k_count).map(|k| transforms.rotation(k)).collect();
    let trans: Vec<Vector3<f64>> = (0..k_count).map(|k| transforms.translation(k)).collect();
    let mut d_w = vec![0.0; k_count];
    for (i, (s, g)) in model.surfels.iter().zip(grads).enumerate() {
        let gs = &mut out.surfels[i];
        gs[10..13].copy_from_slice(&g.color);
        let op = sigmoid(s.opacity_logit);
        gs[9] = g.opacity * op * (1.0 - op);
        if g.center == Vector3::zeros() && g.axis_u == Vector3::zeros() && g.axis_v == Vector3::zeros() {
            continue;
        }
        let (b, _) = &posed.blends[i];
        let frame = quat_to_matrix(&s.rot_q)?;
        let [su, sv] = s.scales();
        let tu: Vector3<f64> = frame.column(0).into();
        let tv: Vector3<f64> = frame.column(1).into();
        let bt = b.transpose();
        let mut d_center = bt * g.center;
        let d_au = bt * g.axis_u;
        let d_av = bt * g.axis_v;
        gs[7] = su * tu.dot(&d_au);
        gs[8] = sv * tv.dot(&d_av);
        let mut d_frame = Matrix3::zeros();
        d_frame.set_column(0, &(d_au * su));
        d_frame.set_column(1, &(d_av * sv));
        gs[3..7].copy_from_slice(&quat_to_matrix_vjp(&s.rot_q, &d_frame));

        let d_b = g.center * s.center.transpose() + g.axis_u * (tu * su).transpose() + g.axis_v * (tv * sv).transpose();
        let d_t = g.center;
        let w = &posed.weights[i * k_count..(i + 1) * k_count];
        for k in 0..k_count {
            d_w[k] = d_b.dot(&rots[k]) + d_t.dot(&trans[k]);
            if w[k] != 0.0 {
                d_rot[k] += d_b * w[k];
                d_trans[k] += d_t * w[k];
            }
        }
        if ablation.enable_lbs_opt {
            let d_logits = softmax_vjp(w, &d_w);
            let d_enc = model.skin.lbs_mlp.backward(&posed.lbs_caches[i], &d_logits, &mut out.lbs_mlp);
            d_center += positional_encode_vjp(&s.center, model.skin.levels, &d_enc);
        }
        gs[0..3].copy_from_slice(d_center.as_slice());
    }
    let d_theta = forward_kinematics_vjp(&model.skeleton, &posed.theta, transforms, &d_rot, &d_trans);
    out.theta_t = if ablation.enable_pose_calib {
        let d_in = model.skin.pose_mlp.backward(&posed.pose_cache, &d_theta, &mut out.pose_mlp);
        d_theta.iter().zip(&d_in).map(|(a, b)| a + b).collect()
    } else {
        d_theta
    };
    debug_assert_eq!(out.theta_t.len(), theta_t.len());
    Ok(out)
}

/// Loss terms of one rendered frame and their gradients with respect to the
/// rendered image and alpha map.
#[derive(Clone, Debug)]
pub struct FrameLoss {
    pub parts: LossParts,
    pub total: f64,
    pub d_image: Image,
    pub d_alpha: Plane,
}

pub fn frame_loss(
    out: &RenderOutput,
    target: &Image,
    mask: &Plane,
    weights: &LossWeights,
    ablation: &AblationConfig,
) -> Result<FrameLoss> {
    let (l1, g1) = loss_l1_grad(&out.image, target)?;
    let (ls, gs) = loss_ssim_grad(&out.image, target)?;
    let (lm, gm) = loss_mask_grad(&out.alpha, mask)?;
    let parts = LossParts { mask: lm, l1, ssim: ls };
    let total = total_loss(&parts, weights, ablation);
    let mut d_image = g1;
    for (d, s) in d_image.data.iter_mut().zip(&gs.data) {
        *d = weights.lambda2 * *d + weights.lambda3 * s;
    }
    let mut d_alpha = gm;
    let lm_w = if ablation.enable_mask_loss { weights.lambda1 } else { 0.0 };
    d_alpha.data.iter_mut().for_each(|v| *v *= lm_w);
    Ok(FrameLoss { parts, total, d_image, d_alpha })
}

/// One full forward and backward evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: FrameLoss,
    pub grad: ModelGrad,
    pub posed: Posed,
    /// Per-surfel posed gradients (world space), used by density control.
    pub posed_grads: Vec<PosedGrad>,
    pub render: RenderOutput,
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    theta_t: &[f64],
    camera: &Camera,
    target: &Image,
    mask: &Plane,
    weights: &LossWeights,
    ablation: &AblationConfig,
    opts: &RenderOptions,
) -> Result<Evaluation> {
    let posed = pose_model(model, theta_t, ablation)?;
    let colors = model.colors();
    let render_out = render(camera, &posed.surfels, &colors, opts);
    let loss = frame_loss(&render_out, target, mask, weights, ablation)?;
    let posed_grads = render_backward(camera, &posed.surfels, &colors, opts, &render_out, &loss.d_image, &loss.d_alpha)?;
    let grad = pose_backward(model, &posed, theta_t, ablation, &posed_grads)?;
    Ok(Evaluation { loss, grad, posed, posed_grads, render: render_out })
}

/// Loss only, for finite differences and evaluation.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_loss(
    model: &Model,
    theta_t: &[f64],
    camera: &Camera,
    target: &Image,
    mask: &Plane,
    weights: &LossWeights,
    ablation: &AblationConfig,
    opts: &RenderOptions,
) -> Result<f64> {
    let posed = pose_model(model, theta_t, ablation)?;
    let out = render(camera, &posed.surfels, &model.colors(), opts);
    Ok(frame_loss(&out, target, mask, weights, ablation)?.total)
}

/// Render the model at a pose.
pub fn render_pose(
    model: &Model,
    theta_t: &[f64],
    camera: &Camera,
    ablation: &AblationConfig,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let posed = pose_model(model, theta_t, ablation)?;
    Ok(render(camera, &posed.surfels, &model.colors(), opts))
}
