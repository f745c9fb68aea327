//! Binary checkpoints of the full training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LBSPLAT\0"
//! version u32      1
//! count   u32      number of records
//! record:
//!   name_len u16, name (UTF-8)
//!   dtype    u8    0 = f64, 1 = u8
//!   ndim     u8,   dims: ndim × u64
//!   data     product(dims) elements
//! ```
//!
//! The `config` record holds UTF-8 JSON with the scalar settings; all
//! floating-point tensors are stored as raw `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::articulation::{Joint, PoseParams, Skeleton, SkinField};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::pipeline::Model;
use crate::scene::Rig;
use crate::surfel::{Surfel, SURFEL_PARAMS};
use crate::train::{AblationConfig, DensifyStat, Moments, SurfelMoments, TrainState};

pub const MAGIC: &[u8; 8] = b"LBSPLAT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
enum Tensor {
    F64 { dims: Vec<u64>, data: Vec<f64> },
    U8(Vec<u8>),
}

#[derive(Serialize, Deserialize)]
struct Config {
    iteration: u64,
    seed: u64,
    ablation: AblationConfig,
    encoding_levels: usize,
    lbs_sizes: Vec<usize>,
    pose_sizes: Vec<usize>,
    joint_names: Vec<String>,
    joint_parents: Vec<i64>,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        Writer { buf, count: 0 }
    }

    fn header(&mut self, name: &str, dtype: u8, dims: &[u64]) {
        self.buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dtype);
        self.buf.push(dims.len() as u8);
        for d in dims {
            self.buf.extend_from_slice(&d.to_le_bytes());
        }
        self.count += 1;
    }

    fn f64s(&mut self, name: &str, dims: &[u64], data: impl IntoIterator<Item = f64>) {
        self.header(name, DTYPE_F64, dims);
        let start = self.buf.len();
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!((self.buf.len() - start) as u64, 8 * dims.iter().product::<u64>());
    }

    fn bytes(&mut self, name: &str, data: &[u8]) {
        self.header(name, DTYPE_U8, &[data.len() as u64]);
        self.buf.extend_from_slice(data);
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf[12..16].copy_from_slice(&self.count.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.data.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn parse(data: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { data, pos: 0 };
    if r.take(8).map_err(|_| Error::CorruptCheckpoint("file too short for header".into()))? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let elems = dims
            .iter()
            .try_fold(1u64, |a, d| a.checked_mul(*d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("record {name}: size overflow")))?;
        let tensor = match dtype {
            DTYPE_F64 => {
                let bytes = r.take(elems.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
                Tensor::F64 { dims, data: bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect() }
            }
            DTYPE_U8 => Tensor::U8(r.take(elems)?.to_vec()),
            d => return Err(Error::CorruptCheckpoint(format!("record {name}: unknown dtype {d}"))),
        };
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate record {name}")));
        }
    }
    if r.pos != data.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", data.len() - r.pos)));
    }
    Ok(out)
}

/// Serialize a training state.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let model = &state.model;
    let skin = &model.skin;
    let n = model.len() as u64;
    let k = model.skeleton.len() as u64;
    let config = Config {
        iteration: state.iteration,
        seed: state.seed,
        ablation: state.ablation,
        encoding_levels: skin.levels,
        lbs_sizes: skin.lbs_mlp.sizes().to_vec(),
        pose_sizes: skin.pose_mlp.sizes().to_vec(),
        joint_names: model.skeleton.joints().iter().map(|j| j.name.clone()).collect(),
        joint_parents: model.skeleton.joints().iter().map(|j| j.parent.map_or(-1, |p| p as i64)).collect(),
    };
    let mut w = Writer::new();
    w.bytes("config", &serde_json::to_vec(&config)?);
    w.f64s(
        "skeleton_rest",
        &[k, 7],
        model.skeleton.joints().iter().flat_map(|j| j.rest_rotation.into_iter().chain(j.rest_translation.iter().copied())),
    );
    let p = SURFEL_PARAMS as u64;
    w.f64s("surfels", &[n, p], model.surfels.iter().flat_map(|s| s.to_params()));
    w.f64s("surfel_m", &[n, p], state.surfel_moments.iter().flat_map(|m| m.m));
    w.f64s("surfel_v", &[n, p], state.surfel_moments.iter().flat_map(|m| m.v));
    w.f64s("nearest_weights", &[n, k], skin.nearest_weights.iter().copied());
    w.f64s("densify", &[n, 3], state.densify.iter().flat_map(|d| [d.grad_sum, d.grad_count as f64, d.max_opacity]));
    for (name, mlp, mom) in [("lbs", &skin.lbs_mlp, &state.lbs_moments), ("pose", &skin.pose_mlp, &state.pose_moments)] {
        let len = mlp.params().len() as u64;
        w.f64s(&format!("{name}_params"), &[len], mlp.params().iter().copied());
        w.f64s(&format!("{name}_m"), &[len], mom.m.iter().copied());
        w.f64s(&format!("{name}_v"), &[len], mom.v.iter().copied());
    }
    let f = state.poses.len() as u64;
    w.f64s("theta_t", &[f, 3 * k], state.poses.iter().flat_map(|p| p.theta_t.iter().copied()));
    let deltas_ok = state.poses.iter().all(|p| p.delta_theta.len() == p.theta_t.len());
    if !deltas_ok {
        return Err(Error::invalid("pose bank calibration offsets do not match pose lengths"));
    }
    w.f64s("delta_theta", &[f, 3 * k], state.poses.iter().flat_map(|p| p.delta_theta.iter().copied()));
    let beta_len = state.poses.first().map_or(0, |p| p.beta.len()) as u64;
    if state.poses.iter().any(|p| p.beta.len() as u64 != beta_len) {
        return Err(Error::invalid("pose bank has shape vectors of different lengths"));
    }
    w.f64s("beta", &[f, beta_len], state.poses.iter().flat_map(|p| p.beta.iter().copied()));
    let r = state.rig.len() as u64;
    w.f64s("rig_positions", &[r, 3], state.rig.positions.iter().flat_map(|v| [v.x, v.y, v.z]));
    w.f64s("rig_weights", &[r, k], state.rig.weights.iter().copied());
    w.f64s("extent", &[1], [state.extent]);
    Ok(w.finish())
}

fn get_f64<'a>(records: &'a BTreeMap<String, Tensor>, name: &str, dims: &[Option<u64>]) -> Result<(&'a [u64], &'a [f64])> {
    match records.get(name) {
        Some(Tensor::F64 { dims: d, data }) => {
            let ok = d.len() == dims.len() && d.iter().zip(dims).all(|(a, b)| b.is_none_or(|b| *a == b));
            if !ok {
                return Err(Error::CorruptCheckpoint(format!("record {name} has shape {d:?}, expected {dims:?}")));
            }
            Ok((d, data))
        }
        Some(_) => Err(Error::CorruptCheckpoint(format!("record {name} has the wrong type"))),
        None => Err(Error::CorruptCheckpoint(format!("missing record {name}"))),
    }
}

/// Deserialize a training state. Any inconsistency is a corruption error.
pub fn decode_checkpoint(data: &[u8]) -> Result<TrainState> {
    let records = parse(data)?;
    let corrupt = |e: Error| match e {
        Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => e,
        other => Error::CorruptCheckpoint(other.to_string()),
    };
    let config: Config = match records.get("config") {
        Some(Tensor::U8(bytes)) => serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?,
        _ => return Err(Error::CorruptCheckpoint("missing config record".into())),
    };
    let k = config.joint_names.len();
    if config.joint_parents.len() != k {
        return Err(Error::CorruptCheckpoint("joint names and parents differ in length".into()));
    }
    let k64 = k as u64;
    let (_, rest) = get_f64(&records, "skeleton_rest", &[Some(k64), Some(7)])?;
    let joints = (0..k)
        .map(|j| {
            let r = &rest[7 * j..7 * j + 7];
            Joint {
                name: config.joint_names[j].clone(),
                parent: usize::try_from(config.joint_parents[j]).ok(),
                rest_rotation: [r[0], r[1], r[2], r[3]],
                rest_translation: Vector3::new(r[4], r[5], r[6]),
            }
        })
        .collect();
    let skeleton = Skeleton::new(joints).map_err(corrupt)?;

    let p = SURFEL_PARAMS as u64;
    let (dims, surf) = get_f64(&records, "surfels", &[None, Some(p)])?;
    let n = dims[0];
    let surfels: Vec<Surfel> = surf.chunks_exact(SURFEL_PARAMS).map(|c| Surfel::from_params(c.try_into().unwrap())).collect();
    let (_, sm) = get_f64(&records, "surfel_m", &[Some(n), Some(p)])?;
    let (_, sv) = get_f64(&records, "surfel_v", &[Some(n), Some(p)])?;
    let surfel_moments = sm
        .chunks_exact(SURFEL_PARAMS)
        .zip(sv.chunks_exact(SURFEL_PARAMS))
        .map(|(m, v)| SurfelMoments { m: m.try_into().unwrap(), v: v.try_into().unwrap() })
        .collect();
    let (_, nearest) = get_f64(&records, "nearest_weights", &[Some(n), Some(k64)])?;
    let (_, dens) = get_f64(&records, "densify", &[Some(n), Some(3)])?;
    let densify = dens
        .chunks_exact(3)
        .map(|c| DensifyStat { grad_sum: c[0], grad_count: c[1] as u32, max_opacity: c[2] })
        .collect();

    let mut mlps = Vec::new();
    for (name, sizes) in [("lbs", &config.lbs_sizes), ("pose", &config.pose_sizes)] {
        let (_, params) = get_f64(&records, &format!("{name}_params"), &[None])?;
        let len = params.len() as u64;
        let (_, m) = get_f64(&records, &format!("{name}_m"), &[Some(len)])?;
        let (_, v) = get_f64(&records, &format!("{name}_v"), &[Some(len)])?;
        let mlp = Mlp::from_parts(sizes.clone(), params.to_vec())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name} network parameters do not match its layer sizes")))?;
        mlps.push((mlp, Moments { m: m.to_vec(), v: v.to_vec() }));
    }
    let (pose_mlp, pose_moments) = mlps.pop().unwrap();
    let (lbs_mlp, lbs_moments) = mlps.pop().unwrap();
    let skin = SkinField::from_parts(k, nearest.to_vec(), config.encoding_levels, lbs_mlp, pose_mlp).map_err(corrupt)?;

    let (dims, theta) = get_f64(&records, "theta_t", &[None, Some(3 * k64)])?;
    let f = dims[0];
    let (_, delta) = get_f64(&records, "delta_theta", &[Some(f), Some(3 * k64)])?;
    let (bdims, beta) = get_f64(&records, "beta", &[Some(f), None])?;
    let bl = bdims[1] as usize;
    let poses = (0..f as usize)
        .map(|i| PoseParams {
            theta_t: theta[i * 3 * k..(i + 1) * 3 * k].to_vec(),
            delta_theta: delta[i * 3 * k..(i + 1) * 3 * k].to_vec(),
            beta: beta[i * bl..(i + 1) * bl].to_vec(),
        })
        .collect();
    let (rdims, rp) = get_f64(&records, "rig_positions", &[None, Some(3)])?;
    let (_, rw) = get_f64(&records, "rig_weights", &[Some(rdims[0]), Some(k64)])?;
    let rig = if rdims[0] == 0 {
        Rig::default()
    } else {
        Rig::new(rp.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(), rw.to_vec(), k).map_err(corrupt)?
    };
    let (_, extent) = get_f64(&records, "extent", &[Some(1)])?;

    let model = Model { surfels, skin, skeleton };
    if model.skin.surfel_count() != model.len() {
        return Err(Error::CorruptCheckpoint("surfel and weight counts differ".into()));
    }
    let state = TrainState {
        model,
        poses,
        surfel_moments,
        lbs_moments,
        pose_moments,
        densify,
        iteration: config.iteration,
        seed: config.seed,
        ablation: config.ablation,
        rig,
        extent: extent[0],
    };
    state.check_consistency().map_err(corrupt)?;
    Ok(state)
}

/// Write atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::tests::chain_skeleton;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(seed: u64) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skeleton = chain_skeleton(3);
        let n = 20;
        let surfels: Vec<Surfel> = (0..n)
            .map(|_| {
                let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                Surfel::new(
                    Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    q,
                    [rng.random_range(0.01..0.1), 0.05],
                    rng.random_range(0.1..0.9),
                    [rng.random(), rng.random(), rng.random()],
                )
            })
            .collect();
        let weights: Vec<f64> = (0..n).flat_map(|i| [1.0, 0.0, 0.0].into_iter().cycle().skip(i % 3).take(3)).collect();
        let rig = Rig::new(surfels.iter().map(|s| s.center).collect(), weights.clone(), 3).unwrap();
        let skin = SkinField::new(3, weights, 4, &mut rng).unwrap();
        let model = Model::new(surfels, skin, skeleton).unwrap();
        let poses = (0..5).map(|_| PoseParams::new((0..9).map(|_| rng.random()).collect(), vec![0.5, -0.25])).collect();
        let mut state = TrainState::new(model, poses, rig, seed, AblationConfig::default()).unwrap();
        state.iteration = 77;
        for m in &mut state.surfel_moments {
            m.m.iter_mut().for_each(|v| *v = rng.random());
        }
        state.lbs_moments.v.iter_mut().for_each(|v| *v = rng.random());
        state.model.skin.pose_mlp.params_mut()[3] = -0.0;
        state
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let state = random_state(3);
        let bytes = encode_checkpoint(&state).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(back.model.skin.pose_mlp.params()[3].is_sign_negative());
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_checkpoint(&random_state(4)).unwrap();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint(&extra), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = encode_checkpoint(&random_state(5)).unwrap();
        for v in [0u32, 2] {
            bytes[8..12].copy_from_slice(&v.to_le_bytes());
            assert!(matches!(decode_checkpoint(&bytes), Err(Error::CheckpointVersion { found, expected: 1 }) if found == v));
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/state.ckpt");
        let state = random_state(6);
        save_checkpoint(&path, &state).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
