//! Central finite-difference check of the analytic gradients, per
//! parameter class.
//!
//! Runs without kernel cutoff or early termination so the loss is smooth
//! apart from depth-order swaps and L1 kinks. A sample whose difference
//! quotient changes between step `h` and `h/2` straddles such a point; it is
//! discarded and another parameter is drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::Camera;
use crate::error::Result;
use crate::imagebuf::{Image, Plane};
use crate::loss::LossWeights;
use crate::pipeline::{evaluate, evaluate_loss, Model, ModelGrad};
use crate::raster::RenderOptions;
use crate::surfel::{logit, Surfel, SURFEL_PARAMS};
use crate::synth::{generate_synthetic_body, SynthConfig};
use crate::train::AblationConfig;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-5;
pub const STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Center,
    RotQ,
    LogScale,
    Opacity,
    Color,
    LbsMlp,
    PoseMlp,
    Theta,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::Center,
        ParamClass::RotQ,
        ParamClass::LogScale,
        ParamClass::Opacity,
        ParamClass::Color,
        ParamClass::LbsMlp,
        ParamClass::PoseMlp,
        ParamClass::Theta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Center => "center",
            ParamClass::RotQ => "rot_q",
            ParamClass::LogScale => "log_scale",
            ParamClass::Opacity => "opacity",
            ParamClass::Color => "color",
            ParamClass::LbsMlp => "lbs_mlp",
            ParamClass::PoseMlp => "pose_mlp",
            ParamClass::Theta => "theta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn surfel_range(self) -> Option<std::ops::Range<usize>> {
        match self {
            ParamClass::Center => Some(0..3),
            ParamClass::RotQ => Some(3..7),
            ParamClass::LogScale => Some(7..9),
            ParamClass::Opacity => Some(9..10),
            ParamClass::Color => Some(10..13),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: ParamClass,
    pub samples: usize,
    /// Samples discarded because the loss is not smooth there.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub classes: Vec<ClassReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.classes.iter().all(|c| c.pass)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.classes.iter().filter(|c| !c.pass).map(|c| c.class.name()).collect()
    }
}

/// One frame to check against.
pub struct CheckTarget<'a> {
    pub camera: &'a Camera,
    pub theta_t: &'a [f64],
    pub image: &'a Image,
    pub mask: &'a Plane,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub samples_per_class: usize,
    pub loss_weights: LossWeights,
    pub ablation: AblationConfig,
    /// Add +1 to the analytic gradient of this class.
    pub inject_fault: Option<ParamClass>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_class: 8,
            loss_weights: LossWeights::default(),
            ablation: AblationConfig::default(),
            inject_fault: None,
        }
    }
}

fn class_len(model: &Model, class: ParamClass, theta_len: usize) -> usize {
    match class {
        ParamClass::LbsMlp => model.skin.lbs_mlp.params().len(),
        ParamClass::PoseMlp => model.skin.pose_mlp.params().len(),
        ParamClass::Theta => theta_len,
        c => model.len() * c.surfel_range().unwrap().len(),
    }
}

fn read(model: &Model, theta: &[f64], class: ParamClass, idx: usize) -> f64 {
    match class {
        ParamClass::LbsMlp => model.skin.lbs_mlp.params()[idx],
        ParamClass::PoseMlp => model.skin.pose_mlp.params()[idx],
        ParamClass::Theta => theta[idx],
        c => {
            let r = c.surfel_range().unwrap();
            model.surfels[idx / r.len()].to_params()[r.start + idx % r.len()]
        }
    }
}

fn write(model: &mut Model, theta: &mut [f64], class: ParamClass, idx: usize, value: f64) {
    match class {
        ParamClass::LbsMlp => model.skin.lbs_mlp.params_mut()[idx] = value,
        ParamClass::PoseMlp => model.skin.pose_mlp.params_mut()[idx] = value,
        ParamClass::Theta => theta[idx] = value,
        c => {
            let r = c.surfel_range().unwrap();
            let s = &mut model.surfels[idx / r.len()];
            let mut p: [f64; SURFEL_PARAMS] = s.to_params();
            p[r.start + idx % r.len()] = value;
            *s = Surfel::from_params(&p);
        }
    }
}

fn analytic(grad: &ModelGrad, class: ParamClass, idx: usize) -> f64 {
    match class {
        ParamClass::LbsMlp => grad.lbs_mlp[idx],
        ParamClass::PoseMlp => grad.pose_mlp[idx],
        ParamClass::Theta => grad.theta_t[idx],
        c => {
            let r = c.surfel_range().unwrap();
            grad.surfels[idx / r.len()][r.start + idx % r.len()]
        }
    }
}

/// Compare analytic and central-difference gradients on randomly drawn
/// parameters of every class.
pub fn gradient_check(model: &Model, target: &CheckTarget, opts: &GradCheckOptions, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let render = RenderOptions::exact();
    let ev = evaluate(model, target.theta_t, target.camera, target.image, target.mask, &opts.loss_weights, &opts.ablation, &render)?;
    let loss_at = |m: &Model, th: &[f64]| evaluate_loss(m, th, target.camera, target.image, target.mask, &opts.loss_weights, &opts.ablation, &render);

    let mut classes = Vec::new();
    for class in ParamClass::ALL {
        let len = class_len(model, class, target.theta_t.len());
        let mut report = ClassReport { class, samples: 0, skipped: 0, max_rel_error: 0.0, max_abs_error: 0.0, pass: true };
        let mut attempts = 0;
        while report.samples < opts.samples_per_class.min(len) && attempts < 20 * opts.samples_per_class.max(1) {
            attempts += 1;
            let idx = rng.random_range(0..len);
            let x = read(model, target.theta_t, class, idx);
            let h = STEP * x.abs().max(1.0);
            let mut m = model.clone();
            let mut th = target.theta_t.to_vec();
            let mut quotient = |step: f64| -> Result<f64> {
                write(&mut m, &mut th, class, idx, x + step);
                let up = loss_at(&m, &th)?;
                write(&mut m, &mut th, class, idx, x - step);
                let down = loss_at(&m, &th)?;
                Ok((up - down) / (2.0 * step))
            };
            let fd = quotient(h)?;
            let fd_half = quotient(h / 2.0)?;
            if (fd - fd_half).abs() > ABS_TOL.max(REL_TOL * fd.abs().max(fd_half.abs())) {
                report.skipped += 1;
                continue;
            }
            let mut an = analytic(&ev.grad, class, idx);
            if opts.inject_fault == Some(class) {
                an += 1.0;
            }
            let abs = (an - fd).abs();
            let rel = if abs == 0.0 { 0.0 } else { abs / an.abs().max(fd.abs()) };
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < REL_TOL || abs < ABS_TOL) {
                report.pass = false;
            }
            report.samples += 1;
        }
        if report.samples == 0 && len > 0 {
            report.pass = false;
        }
        classes.push(report);
    }
    Ok(GradCheckReport { classes })
}

/// A 3-joint synthetic body at 32x32: the first training frame as target and
/// a model whose surfels and networks are scrambled away from the truth, so
/// every parameter class carries gradient.
pub struct CheckScene {
    pub model: Model,
    pub camera: Camera,
    pub theta_t: Vec<f64>,
    pub image: Image,
    pub mask: Plane,
}

impl CheckScene {
    pub fn target(&self) -> CheckTarget<'_> {
        CheckTarget { camera: &self.camera, theta_t: &self.theta_t, image: &self.image, mask: &self.mask }
    }
}

pub fn check_scene(seed: u64) -> Result<CheckScene> {
    let body = generate_synthetic_body(&SynthConfig {
        seed,
        joints: 3,
        vertices: 100,
        frames: 1,
        resolution: 32,
        eval_cameras: 0,
        focal: 60.0,
        camera_distance: 2.5,
        ..SynthConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = body.gt_model()?;
    for s in &mut model.surfels {
        for c in s.center.iter_mut() {
            *c += rng.random_range(-0.03..0.03);
        }
        for q in &mut s.rot_q {
            *q += rng.random_range(-0.15..0.15);
        }
        s.normalize_rotation();
        // smaller than the truth so neighbours rarely overlap and swap depth order
        for l in &mut s.log_scale {
            *l += rng.random_range(-0.8..-0.6);
        }
        s.opacity_logit = logit(rng.random_range(0.3..0.9));
        s.color = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    }
    model.skin.lbs_mlp.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-0.3..0.3));
    model.skin.pose_mlp.params_mut().iter_mut().for_each(|p| *p = rng.random_range(-0.1..0.1));
    let frame = &body.scene.frames[0];
    let camera = body.scene.cameras[body.scene.camera_index(frame.camera).expect("synthetic frames use known cameras")].clone();
    Ok(CheckScene { model, camera, theta_t: frame.theta.clone(), image: body.images[0].clone(), mask: body.masks[0].clone() })
}
