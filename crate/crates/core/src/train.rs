//! Optimization loop: per-step render/backward/update, Adam, and periodic
//! density control (clone, split, prune).

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::articulation::PoseParams;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imagebuf::{Image, Plane};
use crate::loss::LossWeights;
use crate::pipeline::{evaluate, Model, ModelGrad};
use crate::raster::RenderOptions;
use crate::scene::Rig;
use crate::surfel::{build_frame, sigmoid, Surfel, SURFEL_PARAMS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub enable_lbs_opt: bool,
    pub enable_pose_calib: bool,
    pub enable_mask_loss: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { enable_lbs_opt: true, enable_pose_calib: true, enable_mask_loss: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub center: f64,
    /// Center rate at the end of the run, relative to `center`.
    pub center_final_factor: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub lbs_mlp: f64,
    pub pose_mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            center: 1.6e-4,
            center_final_factor: 0.01,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            lbs_mlp: 1e-3,
            pose_mlp: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        LearningRates {
            center: 0.0,
            center_final_factor: 1.0,
            rotation: 0.0,
            log_scale: 0.0,
            opacity: 0.0,
            color: 0.0,
            lbs_mlp: 0.0,
            pose_mlp: 0.0,
        }
    }

    /// Center rate at `iteration` of a `budget`-iteration run (log-linear decay).
    pub fn center_at(&self, iteration: u64, budget: u64) -> f64 {
        if budget == 0 {
            return self.center;
        }
        let t = (iteration as f64 / budget as f64).min(1.0);
        self.center * self.center_final_factor.powf(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub enabled: bool,
    pub interval: u64,
    /// Mean screen-space (NDC) positional gradient above which a surfel is densified.
    pub grad_threshold: f64,
    /// Size threshold between clone and split, as a fraction of the rig's bounding-box diagonal.
    pub size_fraction: f64,
    /// Surfels whose opacity never exceeded this since the last control step are removed.
    pub min_opacity: f64,
    pub split_factor: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            enabled: true,
            interval: 400,
            grad_threshold: 2e-4,
            size_fraction: 0.01,
            min_opacity: 0.005,
            split_factor: 1.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub loss_weights: LossWeights,
    pub ablation: AblationConfig,
    pub learning_rates: LearningRates,
    pub density: DensityConfig,
    pub adam: AdamConfig,
    /// Fast-path kernel cutoff; `None` renders without cutoff or culling.
    pub kernel_cutoff: Option<f64>,
    pub early_termination: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let fast = RenderOptions::fast();
        TrainConfig {
            iterations: 1200,
            loss_weights: LossWeights::default(),
            ablation: AblationConfig::default(),
            learning_rates: LearningRates::default(),
            density: DensityConfig::default(),
            adam: AdamConfig::default(),
            kernel_cutoff: fast.kernel_cutoff,
            early_termination: fast.early_termination,
        }
    }
}

impl TrainConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions { kernel_cutoff: self.kernel_cutoff, early_termination: self.early_termination, background: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let lr = &self.learning_rates;
        for (name, v) in [
            ("center", lr.center),
            ("center_final_factor", lr.center_final_factor),
            ("rotation", lr.rotation),
            ("log_scale", lr.log_scale),
            ("opacity", lr.opacity),
            ("color", lr.color),
            ("lbs_mlp", lr.lbs_mlp),
            ("pose_mlp", lr.pose_mlp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("learning rate {name} must be finite and non-negative")));
            }
        }
        if self.density.enabled && self.density.interval == 0 {
            return Err(Error::invalid("density control interval must be positive"));
        }
        if let Some(c) = self.kernel_cutoff {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::invalid("kernel cutoff must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

/// One captured view: image, mask, the camera it was taken from and the
/// dataset pose of the body at that moment.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub image: Image,
    pub mask: Plane,
    pub camera: usize,
    pub theta_t: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameData>,
    /// Frame indices used for optimization.
    pub train_frames: Vec<usize>,
    /// Held-out frame indices.
    pub eval_frames: Vec<usize>,
}

/// First and second moments for one flat parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurfelMoments {
    pub m: [f64; SURFEL_PARAMS],
    pub v: [f64; SURFEL_PARAMS],
}

/// Per-surfel statistics gathered between density control steps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DensifyStat {
    pub grad_sum: f64,
    pub grad_count: u32,
    pub max_opacity: f64,
}

/// Per-surfel rows that must stay aligned with `model.surfels`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// One entry per dataset frame.
    pub poses: Vec<PoseParams>,
    pub surfel_moments: Vec<SurfelMoments>,
    pub lbs_moments: Moments,
    pub pose_moments: Moments,
    pub densify: Vec<DensifyStat>,
    pub iteration: u64,
    pub seed: u64,
    pub ablation: AblationConfig,
    /// Rig vertices, used to assign nearest weights to new surfels.
    pub rig: Rig,
    /// Bounding-box diagonal of the rig.
    pub extent: f64,
}

impl TrainState {
    pub fn new(model: Model, poses: Vec<PoseParams>, rig: Rig, seed: u64, ablation: AblationConfig) -> Result<Self> {
        let n = model.len();
        let extent = rig.extent();
        let state = TrainState {
            surfel_moments: vec![SurfelMoments::default(); n],
            lbs_moments: Moments::zeros(model.skin.lbs_mlp.params().len()),
            pose_moments: Moments::zeros(model.skin.pose_mlp.params().len()),
            densify: model.surfels.iter().map(|s| DensifyStat { max_opacity: s.opacity(), ..Default::default() }).collect(),
            model,
            poses,
            iteration: 0,
            seed,
            ablation,
            rig,
            extent,
        };
        state.check_consistency()?;
        Ok(state)
    }

    /// Every per-surfel row and every moment block matches the parameters it tracks.
    pub fn check_consistency(&self) -> Result<()> {
        let n = self.model.len();
        let k = self.model.skeleton.len();
        let problems = [
            (self.surfel_moments.len() != n, "surfel moments"),
            (self.densify.len() != n, "density statistics"),
            (self.model.skin.surfel_count() != n, "nearest weights"),
            (self.lbs_moments.len() != self.model.skin.lbs_mlp.params().len(), "LBS network moments"),
            (self.lbs_moments.v.len() != self.lbs_moments.m.len(), "LBS network moments"),
            (self.pose_moments.len() != self.model.skin.pose_mlp.params().len(), "pose network moments"),
            (self.pose_moments.v.len() != self.pose_moments.m.len(), "pose network moments"),
            (self.poses.iter().any(|p| p.theta_t.len() != 3 * k), "pose bank"),
            (self.rig.joint_count() != k && !self.rig.is_empty(), "rig weights"),
        ];
        for (bad, what) in problems {
            if bad {
                return Err(Error::invalid(format!("train state inconsistent: {what} out of step with parameters")));
            }
        }
        Ok(())
    }
}

/// Record emitted after every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub frame: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_mask: Option<f64>,
    pub l1: f64,
    pub l_ssim: f64,
    pub surfels: usize,
    /// Wall time since training started; `None` in deterministic runs.
    pub elapsed_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub density: Option<DensityReport>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub count: usize,
}

/// RNG stream for one iteration, independent of how the run got there
/// (resumed or not).
pub fn iteration_rng(seed: u64, iteration: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((iteration as u128) << 20);
    rng
}

const FRAME_STREAM: u64 = 1;
const DENSITY_STREAM: u64 = 2;

/// Training frame drawn for `iteration`.
pub fn pick_frame(data: &Dataset, seed: u64, iteration: u64) -> Result<usize> {
    if data.train_frames.is_empty() {
        return Err(Error::InvalidScene("no training frames".into()));
    }
    let mut rng = iteration_rng(seed, iteration, FRAME_STREAM);
    Ok(data.train_frames[rng.random_range(0..data.train_frames.len())])
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64, cfg: &AdamConfig) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    if lr != 0.0 {
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
}

fn first_non_finite(grad: &ModelGrad) -> Option<&'static str> {
    const NAMES: [&str; SURFEL_PARAMS] = [
        "center", "center", "center", "rot_q", "rot_q", "rot_q", "rot_q", "log_scale", "log_scale", "opacity", "color",
        "color", "color",
    ];
    for row in &grad.surfels {
        if let Some(i) = row.iter().position(|g| !g.is_finite()) {
            return Some(NAMES[i]);
        }
    }
    if grad.lbs_mlp.iter().any(|g| !g.is_finite()) {
        return Some("lbs_mlp");
    }
    if grad.pose_mlp.iter().any(|g| !g.is_finite()) {
        return Some("pose_mlp");
    }
    None
}

/// Apply one Adam update with the given gradient.
pub fn apply_gradients(state: &mut TrainState, grad: &ModelGrad, cfg: &TrainConfig) {
    let step = state.iteration + 1;
    let a = &cfg.adam;
    let bc1 = 1.0 - a.beta1.powi(step as i32);
    let bc2 = 1.0 - a.beta2.powi(step as i32);
    let lr = &cfg.learning_rates;
    let lr_center = lr.center_at(state.iteration, cfg.iterations);
    let rates: [f64; SURFEL_PARAMS] = std::array::from_fn(|p| match p {
        0..=2 => lr_center,
        3..=6 => lr.rotation,
        7..=8 => lr.log_scale,
        9 => lr.opacity,
        _ => lr.color,
    });
    for ((s, g), mom) in state.model.surfels.iter_mut().zip(&grad.surfels).zip(&mut state.surfel_moments) {
        let mut p = s.to_params();
        for i in 0..SURFEL_PARAMS {
            adam_update(&mut p[i], g[i], &mut mom.m[i], &mut mom.v[i], rates[i], bc1, bc2, a);
        }
        *s = Surfel::from_params(&p);
        if lr.rotation != 0.0 {
            s.normalize_rotation();
        }
    }
    if cfg.ablation.enable_lbs_opt {
        let mom = &mut state.lbs_moments;
        for (i, p) in state.model.skin.lbs_mlp.params_mut().iter_mut().enumerate() {
            adam_update(p, grad.lbs_mlp[i], &mut mom.m[i], &mut mom.v[i], lr.lbs_mlp, bc1, bc2, a);
        }
    }
    if cfg.ablation.enable_pose_calib {
        let mom = &mut state.pose_moments;
        for (i, p) in state.model.skin.pose_mlp.params_mut().iter_mut().enumerate() {
            adam_update(p, grad.pose_mlp[i], &mut mom.m[i], &mut mom.v[i], lr.pose_mlp, bc1, bc2, a);
        }
    }
}

/// Render one training frame, backpropagate, update, and run density
/// control when the incremented iteration lands on the schedule.
pub fn step(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<StepMetrics> {
    let frame_id = pick_frame(data, state.seed, state.iteration)?;
    let frame = &data.frames[frame_id];
    let camera = &data.cameras[frame.camera];
    let opts = cfg.render_options();
    let ev = evaluate(
        &state.model,
        &frame.theta_t,
        camera,
        &frame.image,
        &frame.mask,
        &cfg.loss_weights,
        &cfg.ablation,
        &opts,
    )?;
    if !ev.loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: state.iteration, frame: frame_id });
    }
    if let Some(class) = first_non_finite(&ev.grad) {
        return Err(Error::NonFiniteGradient { class });
    }

    // screen-space positional gradient, in normalized device coordinates
    for (i, (g, p)) in ev.posed_grads.iter().zip(&ev.posed.surfels).enumerate() {
        let stat = &mut state.densify[i];
        stat.max_opacity = stat.max_opacity.max(p.opacity);
        if g.center == Vector3::zeros() {
            continue;
        }
        let gc = camera.rotation * g.center;
        let z = camera.to_camera(&p.center).z;
        let gx = gc.x * z * camera.width as f64 / (2.0 * camera.fx);
        let gy = gc.y * z * camera.height as f64 / (2.0 * camera.fy);
        stat.grad_sum += (gx * gx + gy * gy).sqrt();
        stat.grad_count += 1;
    }

    apply_gradients(state, &ev.grad, cfg);
    if cfg.ablation.enable_pose_calib {
        let theta = &ev.posed.theta;
        let pose = &mut state.poses[frame_id];
        pose.delta_theta = theta.iter().zip(&pose.theta_t).map(|(a, b)| a - b).collect();
    }

    let iteration = state.iteration;
    state.iteration += 1;
    let mut density = None;
    if cfg.density.enabled && state.iteration % cfg.density.interval == 0 {
        // no new surfels at the very end of the run: they would never be optimized
        let densify = state.iteration < cfg.iterations;
        density = Some(density_control(state, &cfg.density, densify));
    }
    let parts = &ev.loss.parts;
    Ok(StepMetrics {
        iteration,
        frame: frame_id,
        loss: ev.loss.total,
        l_mask: cfg.ablation.enable_mask_loss.then_some(parts.mask),
        l1: parts.l1,
        l_ssim: parts.ssim,
        surfels: state.model.len(),
        elapsed_ms: None,
        density,
    })
}

/// Clone small and split large surfels with a high mean screen-space
/// gradient, then drop surfels whose opacity stayed below the floor.
/// Every per-surfel row (moments, statistics, nearest weights) is rebuilt
/// with the same index map.
pub fn density_control(state: &mut TrainState, cfg: &DensityConfig, densify: bool) -> DensityReport {
    let n = state.model.len();
    let k = state.model.skeleton.len();
    let size_limit = cfg.size_fraction * state.extent;
    let mut rng = iteration_rng(state.seed, state.iteration, DENSITY_STREAM);

    let mut surfels = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n * k);
    let mut report = DensityReport::default();
    let mut new_surfels = Vec::new();
    for i in 0..n {
        let stat = state.densify[i];
        let s = state.model.surfels[i];
        let prune = stat.max_opacity < cfg.min_opacity;
        let hot = densify && stat.grad_count > 0 && stat.grad_sum / stat.grad_count as f64 > cfg.grad_threshold;
        if prune {
            report.pruned += 1;
            continue;
        }
        if hot {
            let [su, sv] = s.scales();
            if su.max(sv) <= size_limit {
                report.cloned += 1;
                new_surfels.push(s);
            } else {
                report.split += 1;
                let frame = build_frame(&s.rot_q).expect("live surfels have valid rotations");
                for _ in 0..2 {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    let mut child = s;
                    child.center = s.center + frame.t_u * (su * a) + frame.t_v * (sv * b);
                    for l in &mut child.log_scale {
                        *l -= cfg.split_factor.ln();
                    }
                    new_surfels.push(child);
                }
                continue;
            }
        }
        surfels.push(s);
        moments.push(state.surfel_moments[i]);
        weights.extend_from_slice(state.model.skin.nearest(i));
    }
    for s in &new_surfels {
        weights.extend_from_slice(state.rig.nearest_weights(&s.center));
    }
    moments.extend(std::iter::repeat_n(SurfelMoments::default(), new_surfels.len()));
    surfels.extend(new_surfels);

    state.densify = surfels.iter().map(|s| DensifyStat { max_opacity: sigmoid(s.opacity_logit), ..Default::default() }).collect();
    state.model.surfels = surfels;
    state.surfel_moments = moments;
    state.model.skin.nearest_weights = weights;
    report.count = state.model.len();
    debug_assert!(state.check_consistency().is_ok());
    report
}

/// Run until `cfg.iterations`, reporting every step to `on_step`.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    while state.iteration < cfg.iterations {
        let m = step(state, data, cfg)?;
        on_step(&m)?;
    }
    Ok(())
}
