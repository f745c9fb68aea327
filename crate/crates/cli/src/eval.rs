use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use lbsplat_core::eval::{evaluate_frames, EvalReport};
use lbsplat_core::scene::{load_dataset, load_scene, manifest_path, scene_root};
use lbsplat_core::{load_checkpoint, EvalOptions, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrameSet {
    /// Frames of the evaluation cameras.
    Eval,
    /// Frames of the training cameras.
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value_t = FrameSet::Eval)]
    pub frames: FrameSet,
    /// PSNR over mask pixels only.
    #[arg(long)]
    pub masked: bool,
    /// Render without kernel cutoff or early termination.
    #[arg(long)]
    pub exact: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn evaluate(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let state = load_checkpoint(&args.checkpoint)?;
    let manifest = manifest_path(&args.scene);
    let scene = load_scene(&manifest)?;
    let data = load_dataset(&scene, &scene_root(&manifest))?;
    let frames: Vec<usize> = match args.frames {
        FrameSet::Eval => data.eval_frames.clone(),
        FrameSet::Train => data.train_frames.clone(),
        FrameSet::All => (0..data.frames.len()).collect(),
    };
    if frames.is_empty() {
        return Err(lbsplat_core::Error::InvalidScene(format!("scene has no {:?} frames", args.frames).to_lowercase()).into());
    }
    let render = if args.exact { RenderOptions::exact() } else { RenderOptions::fast() };
    Ok(evaluate_frames(&state, &data, &frames, &EvalOptions { masked: args.masked, render })?)
}

/// The report as a fixed-width table in the usual PSNR / SSIM / LPIPS / Pts layout.
pub fn format_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:>6} {:>9} {:>8} {:>7} {:>8}", "camera", "frames", "PSNR↑", "SSIM↑", "LPIPS↓", "Pts↓");
    for c in &report.cameras {
        let _ = writeln!(s, "{:<10} {:>6} {:>9.4} {:>8.4} {:>7} {:>8}", c.camera, c.frames, c.psnr, c.ssim, "n/a", "");
    }
    let frames: usize = report.cameras.iter().map(|c| c.frames).sum();
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:>9.4} {:>8.4} {:>7} {:>8}",
        "mean", frames, report.mean_psnr, report.mean_ssim, "n/a", report.points
    );
    s.push_str("LPIPS is not computed: it needs a pretrained perceptual network.\n");
    s
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let report = evaluate(args)?;
    print!("{}", format_table(&report));
    if let Some(path) = &args.json {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    Ok(())
}
