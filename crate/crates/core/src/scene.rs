//! Scene manifest (JSON + PNG), rig vertices and surfel initialization.
//!
//! A scene directory holds `scene.json` plus the images and masks it
//! references by relative path. Rig tensors are stored inline as base64
//! little-endian `f64` arrays, or in an external blob for large rigs.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::{Joint, PoseParams, Skeleton, SkinField, DEFAULT_ENCODING_LEVELS};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::imagebuf::{to_u8, Image, Plane};
use crate::pipeline::Model;
use crate::surfel::{Surfel, IDENTITY_QUAT};
use crate::train::{Dataset, FrameData};

pub const SCENE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "scene.json";
/// Rigs with at least this many vertices are written to an external blob.
pub const EXTERNAL_BLOB_VERTICES: usize = 10_000;
pub const RIG_BLOB_NAME: &str = "rig.bin";

pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

/// Rig vertices with per-vertex skinning weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rig {
    pub positions: Vec<Vector3<f64>>,
    /// Row-major `vertices × joints`.
    pub weights: Vec<f64>,
    joints: usize,
}

impl Rig {
    pub fn new(positions: Vec<Vector3<f64>>, weights: Vec<f64>, joints: usize) -> Result<Self> {
        if joints == 0 || weights.len() != positions.len() * joints {
            return Err(Error::invalid(format!(
                "rig has {} vertices and {} weights, not a multiple of {joints} joints",
                positions.len(),
                weights.len()
            )));
        }
        for (i, row) in weights.chunks_exact(joints).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || !((sum - 1.0).abs() <= 1e-6) {
                return Err(Error::WeightSum { vertex: i, sum });
            }
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("non-finite rig vertex"));
        }
        Ok(Rig { positions, weights, joints })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.joints..(i + 1) * self.joints]
    }

    /// Index of the closest vertex; ties go to the lowest index.
    pub fn nearest_index(&self, p: &Vector3<f64>) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, v) in self.positions.iter().enumerate() {
            let d = (v - p).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn nearest_weights(&self, p: &Vector3<f64>) -> &[f64] {
        self.row(self.nearest_index(p))
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn extent(&self) -> f64 {
        if self.positions.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// Relative to the manifest directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub theta: Vec<f64>,
    pub camera: u32,
}

/// In-memory scene description. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub skeleton: Skeleton,
    pub rig: Rig,
    pub frames: Vec<FrameRecord>,
    pub cameras: Vec<Camera>,
    pub beta: Vec<f64>,
    pub train_cameras: Vec<u32>,
}

impl SceneFile {
    pub fn camera_index(&self, id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn poses(&self) -> Vec<PoseParams> {
        self.frames.iter().map(|f| PoseParams::new(f.theta.clone(), self.beta.clone())).collect()
    }
}

// ---- JSON schema ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointJson {
    name: String,
    parent: i64,
    rest_rotation: [f64; 4],
    rest_translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonJson {
    joints: Vec<JointJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigJson {
    vertices: usize,
    joints: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    positions: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    blob: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    id: u32,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// World-to-camera rotation, row-major.
    rotation: [f64; 9],
    translation: [f64; 3],
    near: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameJson {
    image: String,
    mask: String,
    theta: Vec<f64>,
    camera: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneJson {
    version: u32,
    skeleton: SkeletonJson,
    rig: RigJson,
    cameras: Vec<CameraJson>,
    frames: Vec<FrameJson>,
    #[serde(default)]
    beta: Vec<f64>,
    train_cameras: Vec<u32>,
}

pub(crate) fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(text).map_err(|e| e.to_string())?;
    bytes_to_f64s(&bytes)
}

fn bytes_to_f64s(bytes: &[u8]) -> std::result::Result<Vec<f64>, String> {
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn schema(path: &Path, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { path: path.to_path_buf(), field: field.into(), message: message.into() }
}

/// Manifest path for a scene given either the manifest itself or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn scene_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Load and fully validate a scene manifest, including the dimensions of
/// every referenced image and mask.
pub fn load_scene(path: &Path) -> Result<SceneFile> {
    let manifest = manifest_path(path);
    if !manifest.is_file() {
        return Err(Error::MissingFile(manifest));
    }
    let text = fs::read_to_string(&manifest)?;
    let json: SceneJson = serde_json::from_str(&text).map_err(|e| {
        schema(&manifest, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let root = scene_root(&manifest);
    if json.version != SCENE_VERSION {
        return Err(schema(&manifest, "version", format!("unsupported version {}, expected {SCENE_VERSION}", json.version)));
    }

    let joints = json
        .skeleton
        .joints
        .iter()
        .enumerate()
        .map(|(k, j)| {
            let parent = match j.parent {
                -1 => None,
                p if p >= 0 => Some(p as usize),
                p => return Err(schema(&manifest, format!("skeleton.joints[{k}].parent"), format!("invalid parent {p}"))),
            };
            Ok(Joint {
                name: j.name.clone(),
                parent,
                rest_rotation: j.rest_rotation,
                rest_translation: Vector3::from(j.rest_translation),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let skeleton = Skeleton::new(joints).map_err(|e| schema(&manifest, "skeleton", e.to_string()))?;
    let k = skeleton.len();

    let rig_json = &json.rig;
    if rig_json.joints != k {
        return Err(schema(&manifest, "rig.joints", format!("{} weight columns for {k} joints", rig_json.joints)));
    }
    let (positions, weights) = match (&rig_json.positions, &rig_json.weights, &rig_json.blob) {
        (Some(p), Some(w), None) => (
            decode_f64s(p).map_err(|m| schema(&manifest, "rig.positions", m))?,
            decode_f64s(w).map_err(|m| schema(&manifest, "rig.weights", m))?,
        ),
        (None, None, Some(blob)) => {
            let blob_path = root.join(blob);
            if !blob_path.is_file() {
                return Err(Error::MissingFile(blob_path));
            }
            let all = bytes_to_f64s(&fs::read(&blob_path)?).map_err(|m| schema(&manifest, "rig.blob", m))?;
            let split = 3 * rig_json.vertices;
            if all.len() < split {
                return Err(schema(&manifest, "rig.blob", "blob shorter than the vertex positions"));
            }
            let (p, w) = all.split_at(split);
            (p.to_vec(), w.to_vec())
        }
        _ => return Err(schema(&manifest, "rig", "expected either inline positions and weights or a blob")),
    };
    if positions.len() != 3 * rig_json.vertices {
        return Err(schema(&manifest, "rig.positions", format!("{} values for {} vertices", positions.len(), rig_json.vertices)));
    }
    if weights.len() != k * rig_json.vertices {
        return Err(schema(&manifest, "rig.weights", format!("{} values for {} vertices × {k} joints", weights.len(), rig_json.vertices)));
    }
    let positions = positions.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    let rig = Rig::new(positions, weights, k)?;

    let mut cameras = Vec::with_capacity(json.cameras.len());
    for (i, c) in json.cameras.iter().enumerate() {
        let cam = Camera {
            id: c.id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: Matrix3::from_row_slice(&c.rotation),
            translation: Vector3::from(c.translation),
            near: c.near,
        };
        cam.validate().map_err(|e| schema(&manifest, format!("cameras[{i}]"), e.to_string()))?;
        if cameras.iter().any(|o: &Camera| o.id == c.id) {
            return Err(schema(&manifest, format!("cameras[{i}].id"), format!("duplicate camera id {}", c.id)));
        }
        cameras.push(cam);
    }
    for (i, id) in json.train_cameras.iter().enumerate() {
        if !cameras.iter().any(|c| c.id == *id) {
            return Err(schema(&manifest, format!("train_cameras[{i}]"), format!("unknown camera id {id}")));
        }
    }

    let mut frames = Vec::with_capacity(json.frames.len());
    for (i, f) in json.frames.iter().enumerate() {
        let Some(cam) = cameras.iter().find(|c| c.id == f.camera) else {
            return Err(schema(&manifest, format!("frames[{i}].camera"), format!("unknown camera id {}", f.camera)));
        };
        if f.theta.len() != 3 * k {
            return Err(schema(&manifest, format!("frames[{i}].theta"), format!("{} entries, expected {}", f.theta.len(), 3 * k)));
        }
        if !f.theta.iter().all(|t| t.is_finite()) {
            return Err(schema(&manifest, format!("frames[{i}].theta"), "non-finite entry"));
        }
        for (what, rel) in [("image", &f.image), ("mask", &f.mask)] {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
            let (w, h) = image::image_dimensions(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::ResolutionMismatch {
                    frame: i,
                    camera: cam.id,
                    what,
                    got_w: w,
                    got_h: h,
                    want_w: cam.width,
                    want_h: cam.height,
                });
            }
        }
        frames.push(FrameRecord { image: f.image.clone().into(), mask: f.mask.clone().into(), theta: f.theta.clone(), camera: f.camera });
    }

    Ok(SceneFile { skeleton, rig, frames, cameras, beta: json.beta, train_cameras: json.train_cameras })
}

/// Write the manifest (and rig blob when large). Images are not written.
pub fn save_scene(path: &Path, scene: &SceneFile) -> Result<()> {
    let manifest = if path.extension().is_some_and(|e| e == "json") { path.to_path_buf() } else { path.join(MANIFEST_NAME) };
    let root = scene_root(&manifest);
    if !root.as_os_str().is_empty() {
        fs::create_dir_all(&root)?;
    }
    let joints = scene
        .skeleton
        .joints()
        .iter()
        .map(|j| JointJson {
            name: j.name.clone(),
            parent: j.parent.map_or(-1, |p| p as i64),
            rest_rotation: j.rest_rotation,
            rest_translation: j.rest_translation.into(),
        })
        .collect();
    let flat_pos: Vec<f64> = scene.rig.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let rig = if scene.rig.len() >= EXTERNAL_BLOB_VERTICES {
        let bytes: Vec<u8> = flat_pos.iter().chain(&scene.rig.weights).flat_map(|v| v.to_le_bytes()).collect();
        fs::write(root.join(RIG_BLOB_NAME), bytes)?;
        RigJson { vertices: scene.rig.len(), joints: scene.rig.joint_count(), positions: None, weights: None, blob: Some(RIG_BLOB_NAME.into()) }
    } else {
        RigJson {
            vertices: scene.rig.len(),
            joints: scene.rig.joint_count(),
            positions: Some(encode_f64s(&flat_pos)),
            weights: Some(encode_f64s(&scene.rig.weights)),
            blob: None,
        }
    };
    let json = SceneJson {
        version: SCENE_VERSION,
        skeleton: SkeletonJson { joints },
        rig,
        cameras: scene
            .cameras
            .iter()
            .map(|c| CameraJson {
                id: c.id,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                rotation: std::array::from_fn(|i| c.rotation[(i / 3, i % 3)]),
                translation: c.translation.into(),
                near: c.near,
            })
            .collect(),
        frames: scene
            .frames
            .iter()
            .map(|f| FrameJson {
                image: path_string(&f.image),
                mask: path_string(&f.mask),
                theta: f.theta.clone(),
                camera: f.camera,
            })
            .collect(),
        beta: scene.beta.clone(),
        train_cameras: scene.train_cameras.clone(),
    };
    let mut text = serde_json::to_string_pretty(&json)?;
    text.push('\n');
    fs::write(&manifest, text)?;
    Ok(())
}

fn path_string(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

// ---- images ----

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.to_rgb8()).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Mask as 0/255 grayscale.
pub fn save_mask_png(path: &Path, mask: &Plane) -> Result<()> {
    let data = mask.data.iter().map(|v| if *v > 0.5 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width, mask.height, data).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Single-channel float plane as 8-bit grayscale.
pub fn save_plane_png(path: &Path, plane: &Plane) -> Result<()> {
    let data = plane.data.iter().map(|v| to_u8(*v)).collect();
    let buf = image::GrayImage::from_raw(plane.width, plane.height, data).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
    Ok(Image::from_rgb8(img.width(), img.height(), img.as_raw()))
}

/// Binary mask: 1 where the gray level is at least 128.
pub fn load_mask(path: &Path) -> Result<Plane> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_luma8();
    Ok(Plane {
        width: img.width(),
        height: img.height(),
        data: img.as_raw().iter().map(|v| if *v >= 128 { 1.0 } else { 0.0 }).collect(),
    })
}

/// Load every frame's image and mask and split frames into train and eval
/// sets by camera.
pub fn load_dataset(scene: &SceneFile, root: &Path) -> Result<Dataset> {
    let mut images = Vec::with_capacity(scene.frames.len());
    let mut masks = Vec::with_capacity(scene.frames.len());
    for f in &scene.frames {
        images.push(load_png(&root.join(&f.image))?);
        masks.push(load_mask(&root.join(&f.mask))?);
    }
    dataset_from(scene, images, masks)
}

/// Dataset from a scene and its decoded frames, split by the training cameras.
pub fn dataset_from(scene: &SceneFile, images: Vec<Image>, masks: Vec<Plane>) -> Result<Dataset> {
    if images.len() != scene.frames.len() || masks.len() != scene.frames.len() {
        return Err(Error::InvalidScene(format!(
            "{} frames but {} images and {} masks",
            scene.frames.len(),
            images.len(),
            masks.len()
        )));
    }
    let mut frames = Vec::with_capacity(scene.frames.len());
    let mut train_frames = Vec::new();
    let mut eval_frames = Vec::new();
    for (i, ((f, image), mask)) in scene.frames.iter().zip(images).zip(masks).enumerate() {
        let camera = scene.camera_index(f.camera).ok_or_else(|| Error::InvalidScene(format!("frame {i}: unknown camera {}", f.camera)))?;
        frames.push(FrameData { image, mask, camera, theta_t: f.theta.clone() });
        if scene.train_cameras.contains(&f.camera) {
            train_frames.push(i);
        } else {
            eval_frames.push(i);
        }
    }
    Ok(Dataset { cameras: scene.cameras.clone(), frames, train_frames, eval_frames })
}

// ---- initialization ----

/// Mean distance from each point to its `k` nearest other points.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let pos = best.partition_point(|b| *b <= d);
                    best.insert(pos, d);
                    best.pop();
                }
            }
            best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// One surfel per rig vertex: identity rotation, isotropic scale equal to
/// the mean distance to the three nearest vertices, opacity 0.1, mid-gray,
/// and the vertex's own skinning weights.
pub fn init_surfels(scene: &SceneFile) -> Result<(Vec<Surfel>, Vec<f64>)> {
    let rig = &scene.rig;
    if rig.len() < 4 {
        return Err(Error::InvalidScene(format!("{} rig vertices; at least 4 are needed for the neighbor scale", rig.len())));
    }
    let dist = mean_knn_distance(&rig.positions, 3);
    let mut surfels = Vec::with_capacity(rig.len());
    for (i, (p, d)) in rig.positions.iter().zip(&dist).enumerate() {
        if !(*d > 0.0) {
            return Err(Error::InvalidScene(format!("rig vertex {i} coincides with its neighbors")));
        }
        surfels.push(Surfel::new(*p, IDENTITY_QUAT, [*d, *d], INIT_OPACITY, INIT_COLOR));
    }
    Ok((surfels, rig.weights.clone()))
}

/// Initial model for a scene: surfels from the rig and fresh networks.
pub fn init_model(scene: &SceneFile, rng: &mut impl Rng) -> Result<Model> {
    let (surfels, weights) = init_surfels(scene)?;
    let skin = SkinField::new(scene.skeleton.len(), weights, DEFAULT_ENCODING_LEVELS, rng)?;
    Model::new(surfels, skin, scene.skeleton.clone())
}
