use std::path::PathBuf;

use clap::Args;
use lbsplat_core::pipeline::render_pose;
use lbsplat_core::scene::{load_scene, manifest_path, save_plane_png, save_png};
use lbsplat_core::{load_checkpoint, RenderOptions, RenderOutput};

use crate::CliError;

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene the checkpoint was trained on (for cameras and frames).
    #[arg(long)]
    pub scene: PathBuf,
    /// Camera id. Defaults to the frame's own camera, else the first camera.
    #[arg(long)]
    pub camera: Option<u32>,
    /// Frame whose calibrated pose is rendered.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Explicit pose, 3 axis-angle values per joint, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "frame")]
    pub theta: Option<Vec<f64>>,
    /// Rest pose with no correction: the canonical model as it is.
    #[arg(long, conflicts_with_all = ["frame", "theta"])]
    pub tpose: bool,
    /// Render without kernel cutoff or early termination.
    #[arg(long)]
    pub exact: bool,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the accumulated alpha as a grayscale PNG.
    #[arg(long)]
    pub alpha: Option<PathBuf>,
}

/// Render the view `args` describes, without writing it.
pub fn render_view(args: &RenderArgs) -> anyhow::Result<RenderOutput> {
    let state = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&manifest_path(&args.scene))?;
    let k = state.model.skeleton.len();
    if scene.skeleton.len() != k || state.poses.len() != scene.frames.len() {
        return Err(lbsplat_core::Error::InvalidScene(format!(
            "checkpoint ({k} joints, {} frames) does not belong to this scene ({} joints, {} frames)",
            state.poses.len(),
            scene.skeleton.len(),
            scene.frames.len()
        ))
        .into());
    }
    if let Some(f) = args.frame {
        if f >= scene.frames.len() {
            return Err(CliError::Usage(format!("frame {f} out of range (scene has {})", scene.frames.len())).into());
        }
    }

    let camera_id = args.camera.or(args.frame.map(|f| scene.frames[f].camera)).unwrap_or(scene.cameras[0].id);
    let camera = scene
        .camera_index(camera_id)
        .map(|i| &scene.cameras[i])
        .ok_or_else(|| CliError::Usage(format!("no camera with id {camera_id}")))?;

    let mut ablation = state.ablation;
    let theta_t = if args.tpose {
        ablation.enable_pose_calib = false;
        vec![0.0; 3 * k]
    } else if let Some(theta) = &args.theta {
        if theta.len() != 3 * k {
            return Err(CliError::Usage(format!("--theta needs {} values ({k} joints), got {}", 3 * k, theta.len())).into());
        }
        theta.clone()
    } else if let Some(f) = args.frame {
        state.poses[f].theta_t.clone()
    } else {
        return Err(CliError::Usage("one of --frame, --theta or --tpose is required".into()).into());
    };

    let opts = if args.exact { RenderOptions::exact() } else { RenderOptions::fast() };
    Ok(render_pose(&state.model, &theta_t, camera, &ablation, &opts)?)
}

pub fn run(args: &RenderArgs) -> anyhow::Result<()> {
    let out = render_view(args)?;
    save_png(&args.out, &out.image)?;
    if let Some(path) = &args.alpha {
        save_plane_png(path, &out.alpha)?;
    }
    println!("{}", args.out.display());
    Ok(())
}
