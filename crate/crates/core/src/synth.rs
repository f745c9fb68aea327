//! Synthetic articulated body: a capsule stick figure with a rig, ground-truth
//! surfels and rendered frames from a ring of cameras.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::articulation::{forward_kinematics, Joint, PoseParams, Skeleton, SkinField, DEFAULT_ENCODING_LEVELS};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imagebuf::{Image, Plane};
use crate::pipeline::{pose_model, Model};
use crate::raster::{render, RenderOptions};
use crate::scene::{dataset_from, mean_knn_distance, save_mask_png, save_png, save_scene, FrameRecord, Rig, SceneFile};
use crate::surfel::{Surfel, IDENTITY_QUAT};
use crate::train::{AblationConfig, Dataset, TrainState};

pub const MAX_JOINTS: usize = 11;
/// Ground truth is rendered without early termination and with a cutoff far
/// below 8-bit quantization.
const GT_RENDER: RenderOptions = RenderOptions { kernel_cutoff: Some(1e-12), early_termination: false, background: [0.0; 3] };

pub const GT_CHECKPOINT_NAME: &str = "ground_truth.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub joints: usize,
    /// Ground-truth surfel count.
    pub vertices: usize,
    pub frames: usize,
    pub resolution: u32,
    /// Std. dev. (radians) of the Gaussian noise added to the stored poses.
    pub pose_noise: f64,
    /// Keep every frame in the rest pose.
    pub zero_pose: bool,
    /// Rig vertices per ground-truth surfel.
    pub oversample: usize,
    pub eval_cameras: usize,
    /// Eval cameras see every `eval_every`-th time step.
    pub eval_every: usize,
    pub focal: f64,
    pub camera_distance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            joints: 8,
            vertices: 2000,
            frames: 30,
            resolution: 128,
            pose_noise: 0.05,
            zero_pose: false,
            oversample: 1,
            eval_cameras: 4,
            eval_every: 5,
            focal: 150.0,
            camera_distance: 4.0,
        }
    }
}

struct JointSpec {
    name: &'static str,
    parent: Option<usize>,
    offset: [f64; 3],
    /// Capsule bone in the joint frame.
    bone: ([f64; 3], [f64; 3]),
    radius: f64,
    color: [f64; 3],
}

const SKIN: [f64; 3] = [0.88, 0.7, 0.56];
const SHIRT: [f64; 3] = [0.78, 0.26, 0.22];
const PANTS: [f64; 3] = [0.22, 0.3, 0.62];

const TEMPLATE: [JointSpec; MAX_JOINTS] = [
    JointSpec { name: "pelvis", parent: None, offset: [0.0, 0.0, 0.0], bone: ([0.0, -0.04, 0.0], [0.0, 0.16, 0.0]), radius: 0.14, color: PANTS },
    JointSpec { name: "chest", parent: Some(0), offset: [0.0, 0.3, 0.0], bone: ([0.0, 0.0, 0.0], [0.0, 0.26, 0.0]), radius: 0.15, color: SHIRT },
    JointSpec { name: "head", parent: Some(1), offset: [0.0, 0.34, 0.0], bone: ([0.0, 0.1, 0.0], [0.0, 0.2, 0.0]), radius: 0.11, color: SKIN },
    JointSpec { name: "l_upper_arm", parent: Some(1), offset: [0.2, 0.22, 0.0], bone: ([0.04, 0.0, 0.0], [0.3, 0.0, 0.0]), radius: 0.055, color: SHIRT },
    JointSpec { name: "r_upper_arm", parent: Some(1), offset: [-0.2, 0.22, 0.0], bone: ([-0.04, 0.0, 0.0], [-0.3, 0.0, 0.0]), radius: 0.055, color: SHIRT },
    JointSpec { name: "l_thigh", parent: Some(0), offset: [0.09, -0.08, 0.0], bone: ([0.0, -0.06, 0.0], [0.0, -0.42, 0.0]), radius: 0.075, color: PANTS },
    JointSpec { name: "r_thigh", parent: Some(0), offset: [-0.09, -0.08, 0.0], bone: ([0.0, -0.06, 0.0], [0.0, -0.42, 0.0]), radius: 0.075, color: PANTS },
    JointSpec { name: "l_forearm", parent: Some(3), offset: [0.32, 0.0, 0.0], bone: ([0.02, 0.0, 0.0], [0.27, 0.0, 0.0]), radius: 0.045, color: SKIN },
    JointSpec { name: "r_forearm", parent: Some(4), offset: [-0.32, 0.0, 0.0], bone: ([-0.02, 0.0, 0.0], [-0.27, 0.0, 0.0]), radius: 0.045, color: SKIN },
    JointSpec { name: "l_shin", parent: Some(5), offset: [0.0, -0.44, 0.0], bone: ([0.0, -0.02, 0.0], [0.0, -0.42, 0.0]), radius: 0.06, color: PANTS },
    JointSpec { name: "r_shin", parent: Some(6), offset: [0.0, -0.44, 0.0], bone: ([0.0, -0.02, 0.0], [0.0, -0.42, 0.0]), radius: 0.06, color: PANTS },
];

/// Temperature of the rig's distance softmax (sharper than ground truth).
const RIG_TEMPERATURE: f64 = 0.02;
const GT_TEMPERATURE: f64 = 0.05;
/// A second bone influences a vertex only when its surface is this much
/// farther away than the nearest one.
const SECOND_BONE_GAP: f64 = 0.08;
const GT_OPACITY: f64 = 0.95;
const GT_SCALE_FACTOR: f64 = 1.3;

/// World-space capsule of one joint at rest.
#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: Vector3<f64>,
    b: Vector3<f64>,
    radius: f64,
}

impl Capsule {
    fn closest(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let ab = self.b - self.a;
        let t = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        self.a + ab * t
    }

    fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.closest(p)).norm() - self.radius
    }

    fn side_area(&self) -> f64 {
        TAU * self.radius * (self.b - self.a).norm()
    }

    fn cap_area(&self) -> f64 {
        4.0 * PI * self.radius * self.radius
    }

    /// Uniform point on the surface and its outward normal.
    fn sample(&self, rng: &mut impl Rng) -> (Vector3<f64>, Vector3<f64>) {
        let axis = (self.b - self.a).normalize();
        let (e1, e2) = perpendicular_basis(&axis);
        let side = self.side_area();
        if rng.random::<f64>() * (side + self.cap_area()) < side {
            let t: f64 = rng.random();
            let phi = rng.random::<f64>() * TAU;
            let n = e1 * phi.cos() + e2 * phi.sin();
            (self.a + (self.b - self.a) * t + n * self.radius, n)
        } else {
            let z: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random::<f64>() * TAU;
            let r = (1.0 - z * z).sqrt();
            let n = e1 * (r * phi.cos()) + e2 * (r * phi.sin()) + axis * z;
            let center = if z >= 0.0 { self.b } else { self.a };
            (center + n * self.radius, n)
        }
    }
}

fn perpendicular_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = axis.cross(&helper).normalize();
    (e1, axis.cross(&e1))
}

pub fn template_skeleton(joints: usize) -> Result<Skeleton> {
    if !(2..=MAX_JOINTS).contains(&joints) {
        return Err(Error::invalid(format!("joint count must be in 2..={MAX_JOINTS}, got {joints}")));
    }
    Skeleton::new(
        TEMPLATE[..joints]
            .iter()
            .map(|j| Joint {
                name: j.name.into(),
                parent: j.parent,
                rest_rotation: IDENTITY_QUAT,
                rest_translation: Vector3::from(j.offset),
            })
            .collect(),
    )
}

fn capsules(skel: &Skeleton) -> Vec<Capsule> {
    skel.rest_positions()
        .iter()
        .zip(&TEMPLATE)
        .map(|(p, spec)| Capsule { a: p + Vector3::from(spec.bone.0), b: p + Vector3::from(spec.bone.1), radius: spec.radius })
        .collect()
}

/// Skinning weights from a softmax over negative surface distances to the
/// one or two nearest bones.
fn bone_weights(caps: &[Capsule], p: &Vector3<f64>, temperature: f64) -> Vec<f64> {
    let d: Vec<f64> = caps.iter().map(|c| c.surface_distance(p)).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|a, b| d[*a].total_cmp(&d[*b]).then(a.cmp(b)));
    let mut w = vec![0.0; d.len()];
    let (i, j) = (order[0], order[1]);
    if d[j] - d[i] < SECOND_BONE_GAP {
        let ej = (-(d[j] - d[i]) / temperature).exp();
        w[i] = 1.0 / (1.0 + ej);
        w[j] = ej / (1.0 + ej);
    } else {
        w[i] = 1.0;
    }
    w
}

/// Pose of the figure at time step `f` of `frames`: a full turn about the
/// vertical axis with swinging limbs.
pub fn motion_pose(joints: usize, f: usize, frames: usize) -> Vec<f64> {
    let phase = TAU * f as f64 / frames.max(1) as f64;
    let mut theta = vec![0.0; 3 * joints];
    let mut set = |k: usize, v: [f64; 3]| {
        if k < joints {
            theta[3 * k..3 * k + 3].copy_from_slice(&v);
        }
    };
    let swing = (2.0 * phase).sin();
    set(0, [0.0, phase, 0.0]);
    set(1, [0.1 * swing, 0.0, 0.05 * (2.0 * phase).cos()]);
    set(2, [0.15 * (3.0 * phase).sin(), 0.2 * swing, 0.0]);
    set(3, [0.4 * swing, 0.0, -0.9 + 0.25 * (2.0 * phase).cos()]);
    set(4, [-0.4 * swing, 0.0, 0.9 - 0.25 * (2.0 * phase).cos()]);
    set(5, [0.5 * swing, 0.0, 0.05]);
    set(6, [-0.5 * swing, 0.0, -0.05]);
    set(7, [0.0, -0.5 - 0.3 * swing, 0.0]);
    set(8, [0.0, 0.5 - 0.3 * swing, 0.0]);
    set(9, [0.35 * (1.0 - swing), 0.0, 0.0]);
    set(10, [0.35 * (1.0 + swing), 0.0, 0.0]);
    // wrap the root yaw so the stored pose stays in the principal range
    crate::articulation::wrap_pose(&mut theta);
    theta
}

/// Front training camera plus `eval` cameras evenly spaced in azimuth,
/// offset by half a step from the front.
pub fn ring_cameras(eval: usize, resolution: u32, focal: f64, distance: f64, target: Vector3<f64>) -> Vec<Camera> {
    let eye_height = target.y + 0.3;
    let mut cams = Vec::with_capacity(eval + 1);
    let make = |id: u32, az: f64| {
        let eye = Vector3::new(distance * az.sin(), eye_height, distance * az.cos());
        Camera::look_at(id, eye, target, Vector3::y(), focal, resolution, resolution, 0.1)
    };
    cams.push(make(0, 0.0));
    for i in 0..eval {
        cams.push(make(i as u32 + 1, TAU * (i as f64 + 0.5) / eval as f64));
    }
    cams
}

/// Generator output: the scene (paths filled in), its images and masks, and
/// the ground truth used to render them.
#[derive(Clone, Debug)]
pub struct SyntheticBody {
    pub scene: SceneFile,
    pub images: Vec<Image>,
    pub masks: Vec<Plane>,
    pub gt_surfels: Vec<Surfel>,
    pub gt_weights: Vec<f64>,
    /// Noise-free pose per frame record.
    pub gt_thetas: Vec<Vec<f64>>,
}

impl SyntheticBody {
    /// Ground-truth model: true surfels and weights, networks unused.
    pub fn gt_model(&self) -> Result<Model> {
        let k = self.scene.skeleton.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let skin = SkinField::new(k, self.gt_weights.clone(), DEFAULT_ENCODING_LEVELS, &mut rng)?;
        Model::new(self.gt_surfels.clone(), skin, self.scene.skeleton.clone())
    }

    /// The generated frames as a dataset, without going through files.
    pub fn dataset(&self) -> Result<Dataset> {
        dataset_from(&self.scene, self.images.clone(), self.masks.clone())
    }

    /// Training state holding the ground truth, with the true poses in the
    /// pose bank and both networks switched off.
    pub fn gt_state(&self) -> Result<TrainState> {
        let ablation = AblationConfig { enable_lbs_opt: false, enable_pose_calib: false, enable_mask_loss: true };
        let poses = self.gt_thetas.iter().map(|t| PoseParams::new(t.clone(), self.scene.beta.clone())).collect();
        TrainState::new(self.gt_model()?, poses, self.scene.rig.clone(), 0, ablation)
    }
}

pub fn generate_synthetic_body(cfg: &SynthConfig) -> Result<SyntheticBody> {
    if cfg.vertices < 100 {
        return Err(Error::invalid(format!("vertex count must be at least 100, got {}", cfg.vertices)));
    }
    if cfg.frames == 0 || cfg.resolution < 16 || cfg.oversample == 0 || cfg.eval_every == 0 {
        return Err(Error::invalid("frames, oversample and eval_every must be positive and resolution at least 16"));
    }
    let skeleton = template_skeleton(cfg.joints)?;
    let k = skeleton.len();
    let caps = capsules(&skeleton);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // area-weighted surface samples, dropping points buried in another capsule
    let areas: Vec<f64> = caps.iter().map(|c| c.side_area() + c.cap_area()).collect();
    let total_area: f64 = areas.iter().sum();
    let wanted = cfg.vertices * cfg.oversample;
    let mut points = Vec::with_capacity(wanted);
    let mut normals = Vec::with_capacity(wanted);
    let mut owner = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while points.len() < wanted {
        attempts += 1;
        if attempts > 200 * wanted {
            return Err(Error::invalid("could not place the requested number of vertices"));
        }
        let mut pick = rng.random::<f64>() * total_area;
        let mut bone = 0;
        while bone + 1 < caps.len() && pick >= areas[bone] {
            pick -= areas[bone];
            bone += 1;
        }
        let (p, n) = caps[bone].sample(&mut rng);
        if caps.iter().enumerate().any(|(j, c)| j != bone && c.surface_distance(&p) < -1e-3) {
            continue;
        }
        points.push(p);
        normals.push(n);
        owner.push(bone);
    }
    let rig_weights: Vec<f64> = points.iter().flat_map(|p| bone_weights(&caps, p, RIG_TEMPERATURE)).collect();
    let rig = Rig::new(points.clone(), rig_weights, k)?;

    // ground truth: the first `vertices` samples
    let n = cfg.vertices;
    let gt_points = &points[..n];
    let spacing = mean_knn_distance(gt_points, 3);
    let mut gt_surfels = Vec::with_capacity(n);
    let mut gt_weights = Vec::with_capacity(n * k);
    for i in 0..n {
        let p = gt_points[i];
        let w = bone_weights(&caps, &p, GT_TEMPERATURE);
        let nrm = normals[i];
        let c = &caps[owner[i]];
        let along = (c.b - c.a).normalize();
        let mut tu = along - nrm * along.dot(&nrm);
        if tu.norm() < 1e-6 {
            tu = perpendicular_basis(&nrm).0;
        }
        let tu = tu.normalize();
        let tv = nrm.cross(&tu);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[tu, tv, nrm]));
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut color = [0.0; 3];
        for (j, wj) in w.iter().enumerate() {
            for ch in 0..3 {
                color[ch] += wj * TEMPLATE[j].color[ch];
            }
        }
        let shade = 0.06 * ((7.0 * p.y).sin() + (5.0 * (p.x + p.z)).cos());
        for ch in &mut color {
            *ch = (*ch + shade).clamp(0.02, 0.98);
        }
        let s = GT_SCALE_FACTOR * spacing[i];
        gt_surfels.push(Surfel::new(p, [q.w, q.i, q.j, q.k], [s, s], GT_OPACITY, color));
        gt_weights.extend(w);
    }

    // motion, stored (noisy) poses and cameras
    let center = Vector3::new(0.0, 0.1, 0.0);
    let cameras = ring_cameras(cfg.eval_cameras, cfg.resolution, cfg.focal, cfg.camera_distance, center);
    let noise = Normal::new(0.0, cfg.pose_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    // own stream so the noise does not depend on how many vertices were drawn
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut truth = Vec::with_capacity(cfg.frames);
    let mut stored = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let t = if cfg.zero_pose { vec![0.0; 3 * k] } else { motion_pose(k, f, cfg.frames) };
        let noisy: Vec<f64> = t.iter().map(|v| if cfg.pose_noise > 0.0 { v + noise.sample(&mut rng) } else { *v }).collect();
        truth.push(t);
        stored.push(noisy);
    }

    let body = SyntheticBody {
        scene: SceneFile { skeleton: skeleton.clone(), rig, frames: vec![], cameras: cameras.clone(), beta: vec![], train_cameras: vec![0] },
        images: vec![],
        masks: vec![],
        gt_surfels,
        gt_weights,
        gt_thetas: vec![],
    };
    let model = body.gt_model()?;
    let colors = model.colors();
    let gt_switches = AblationConfig { enable_lbs_opt: false, enable_pose_calib: false, enable_mask_loss: true };
    let mut frames = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut gt_thetas = Vec::new();
    for cam in &cameras {
        for f in 0..cfg.frames {
            if cam.id != 0 && f % cfg.eval_every != 0 {
                continue;
            }
            let posed = pose_model(&model, &truth[f], &gt_switches)?;
            let out = render(cam, &posed.surfels, &colors, &GT_RENDER);
            let (img, alpha) = (out.image, out.alpha);
            let idx = frames.len();
            frames.push(FrameRecord {
                image: PathBuf::from(format!("images/{idx:04}.png")),
                mask: PathBuf::from(format!("masks/{idx:04}.png")),
                theta: stored[f].clone(),
                camera: cam.id,
            });
            images.push(img.quantized());
            masks.push(alpha.threshold(0.5));
            gt_thetas.push(truth[f].clone());
        }
    }
    // forward kinematics must accept every pose we emit
    for t in &stored {
        forward_kinematics(&skeleton, t)?;
    }
    Ok(SyntheticBody { scene: SceneFile { frames, ..body.scene }, images, masks, gt_thetas, ..body })
}

/// Write the scene manifest, images, masks and ground-truth checkpoint into
/// `dir`; returns the manifest path.
pub fn write_synthetic(dir: &Path, body: &SyntheticBody) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for ((f, img), mask) in body.scene.frames.iter().zip(&body.images).zip(&body.masks) {
        save_png(&dir.join(&f.image), img)?;
        save_mask_png(&dir.join(&f.mask), mask)?;
    }
    save_scene(dir, &body.scene)?;
    crate::checkpoint::save_checkpoint(&dir.join(GT_CHECKPOINT_NAME), &body.gt_state()?)?;
    Ok(dir.join(crate::scene::MANIFEST_NAME))
}
