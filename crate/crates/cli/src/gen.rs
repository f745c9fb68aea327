use std::path::PathBuf;

use clap::Args;
use lbsplat_core::synth::write_synthetic;
use lbsplat_core::{generate_synthetic_body, SynthConfig};

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Directory to write the scene into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Joints in the template skeleton (2 to 11).
    #[arg(long, default_value_t = 8)]
    pub joints: usize,
    /// Rig vertices per unit of oversampling; also the ground-truth surfel count.
    #[arg(long, default_value_t = 2000)]
    pub vertices: usize,
    #[arg(long, default_value_t = 30)]
    pub frames: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 128)]
    pub resolution: u32,
    /// Standard deviation of the noise added to the stored poses, in radians.
    #[arg(long, default_value_t = 0.05)]
    pub pose_noise: f64,
    /// Hold the body in its rest pose for every frame.
    #[arg(long)]
    pub zero_pose: bool,
    /// Rig vertices are `vertices * oversample`.
    #[arg(long, default_value_t = 1)]
    pub oversample: usize,
    #[arg(long, default_value_t = 4)]
    pub eval_cameras: usize,
    /// Evaluation cameras see every N-th frame.
    #[arg(long, default_value_t = 5)]
    pub eval_every: usize,
}

impl GenArgs {
    pub fn synth_config(&self) -> SynthConfig {
        let resolution_scale = self.resolution as f64 / SynthConfig::default().resolution as f64;
        SynthConfig {
            seed: self.seed,
            joints: self.joints,
            vertices: self.vertices,
            frames: self.frames,
            resolution: self.resolution,
            pose_noise: self.pose_noise,
            zero_pose: self.zero_pose,
            oversample: self.oversample,
            eval_cameras: self.eval_cameras,
            eval_every: self.eval_every,
            focal: SynthConfig::default().focal * resolution_scale,
            ..SynthConfig::default()
        }
    }
}

pub fn run(args: &GenArgs) -> anyhow::Result<()> {
    let body = generate_synthetic_body(&args.synth_config())?;
    let manifest = write_synthetic(&args.out, &body)?;
    println!("{}", manifest.display());
    Ok(())
}
