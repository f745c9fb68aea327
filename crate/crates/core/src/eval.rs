//! Held-out view metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{psnr, psnr_masked, ssim};
use crate::pipeline::render_pose;
use crate::raster::RenderOptions;
use crate::train::{Dataset, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraScore {
    pub camera: u32,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cameras: Vec<CameraScore>,
    /// Mean over all evaluated frames.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Surfel count.
    pub points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Restrict PSNR to mask pixels.
    pub masked: bool,
    pub render: RenderOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { masked: false, render: RenderOptions::fast() }
    }
}

/// PSNR and SSIM of `frames`, rendered with the state's pose bank.
pub fn evaluate_frames(state: &TrainState, data: &Dataset, frames: &[usize], opts: &EvalOptions) -> Result<EvalReport> {
    if state.poses.len() != data.frames.len() {
        return Err(Error::InvalidScene(format!(
            "checkpoint pose bank has {} frames, scene has {}",
            state.poses.len(),
            data.frames.len()
        )));
    }
    let mut per_camera: Vec<(u32, Vec<(f64, f64)>)> = Vec::new();
    for &f in frames {
        let frame = &data.frames[f];
        let camera = &data.cameras[frame.camera];
        let out = render_pose(&state.model, &state.poses[f].theta_t, camera, &state.ablation, &opts.render)?;
        let p = if opts.masked { psnr_masked(&out.image, &frame.image, &frame.mask)? } else { psnr(&out.image, &frame.image)? };
        let s = ssim(&out.image, &frame.image)?;
        match per_camera.iter_mut().find(|(id, _)| *id == camera.id) {
            Some((_, v)) => v.push((p, s)),
            None => per_camera.push((camera.id, vec![(p, s)])),
        }
    }
    per_camera.sort_by_key(|(id, _)| *id);
    let count = frames.len().max(1) as f64;
    let all: Vec<(f64, f64)> = per_camera.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    Ok(EvalReport {
        cameras: per_camera
            .iter()
            .map(|(id, v)| CameraScore {
                camera: *id,
                frames: v.len(),
                psnr: v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64,
                ssim: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
            })
            .collect(),
        mean_psnr: all.iter().map(|x| x.0).sum::<f64>() / count,
        mean_ssim: all.iter().map(|x| x.1).sum::<f64>() / count,
        points: state.model.len(),
    })
}

/// Metrics on the held-out frames of the dataset.
pub fn evaluate_held_out(state: &TrainState, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_frames(state, data, &data.eval_frames, opts)
}
