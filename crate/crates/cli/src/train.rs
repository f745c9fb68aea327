use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use lbsplat_core::eval::{evaluate_held_out, EvalOptions, EvalReport};
use lbsplat_core::scene::{init_model, load_dataset, load_scene, manifest_path, scene_root};
use lbsplat_core::train::step;
use lbsplat_core::{load_checkpoint, save_checkpoint, AblationConfig, StepMetrics, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{with_threads, CliError};

pub const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
pub const METRICS_NAME: &str = "metrics.jsonl";
pub const SUMMARY_NAME: &str = "summary.json";

/// Iterations averaged for the final loss in the summary.
const FINAL_LOSS_WINDOW: usize = 100;

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    /// Scene manifest, or the directory holding `scene.json`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON run configuration; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave wall-clock values out of all artifacts.
    #[arg(long)]
    pub deterministic: bool,
    /// Keep the nearest-vertex skinning weights fixed.
    #[arg(long)]
    pub ablate_lbs: bool,
    /// Use the dataset poses as they are.
    #[arg(long)]
    pub ablate_pose: bool,
    /// Drop the mask term from the loss.
    #[arg(long)]
    pub ablate_mask_loss: bool,
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub lambda_l1: Option<f64>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    #[arg(long)]
    pub lr_center: Option<f64>,
    #[arg(long)]
    pub lr_rotation: Option<f64>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub lr_opacity: Option<f64>,
    #[arg(long)]
    pub lr_color: Option<f64>,
    /// Learning rate of both networks.
    #[arg(long)]
    pub lr_mlp: Option<f64>,
    /// Disable cloning, splitting and pruning.
    #[arg(long)]
    pub no_densify: bool,
    #[arg(long)]
    pub grad_threshold: Option<f64>,
    #[arg(long)]
    pub min_opacity: Option<f64>,
    /// PSNR over the mask only in the final evaluation.
    #[arg(long)]
    pub eval_masked: bool,
    /// Write an extra numbered checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint instead of initializing from the scene.
    /// The checkpoint's seed is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// No progress lines on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

impl TrainArgs {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self, threads: Option<usize>) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:expr => $field:expr),* $(,)?) => {
                $(if let Some(v) = $flag.clone() { $field = v; })*
            };
        }
        set! {
            self.iters => cfg.iterations,
            self.seed => cfg.seed,
            self.lambda_mask => cfg.loss_weights.lambda1,
            self.lambda_l1 => cfg.loss_weights.lambda2,
            self.lambda_ssim => cfg.loss_weights.lambda3,
            self.lr_center => cfg.learning_rates.center,
            self.lr_rotation => cfg.learning_rates.rotation,
            self.lr_scale => cfg.learning_rates.log_scale,
            self.lr_opacity => cfg.learning_rates.opacity,
            self.lr_color => cfg.learning_rates.color,
            self.lr_mlp => cfg.learning_rates.lbs_mlp,
            self.lr_mlp => cfg.learning_rates.pose_mlp,
            self.grad_threshold => cfg.density.grad_threshold,
            self.min_opacity => cfg.density.min_opacity,
            self.checkpoint_every => cfg.checkpoint_every,
        }
        if self.scene.is_some() {
            cfg.scene = self.scene.clone();
        }
        if self.out.is_some() {
            cfg.output = self.out.clone();
        }
        if threads.is_some() {
            cfg.threads = threads;
        }
        cfg.deterministic |= self.deterministic;
        cfg.eval_masked |= self.eval_masked;
        cfg.ablation.enable_lbs_opt &= !self.ablate_lbs;
        cfg.ablation.enable_pose_calib &= !self.ablate_pose;
        cfg.ablation.enable_mask_loss &= !self.ablate_mask_loss;
        cfg.density.enabled &= !self.no_densify;
        Ok(cfg)
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub seed: u64,
    /// Surfel count at the end of the run.
    pub surfels: usize,
    /// Total loss of iteration 0, when the metrics log reaches back that far.
    pub initial_loss: Option<f64>,
    /// Mean total loss over the last iterations of the log.
    pub final_loss: Option<f64>,
    /// Held-out metrics; absent when the scene has no evaluation frames.
    pub eval: Option<EvalReport>,
    /// Seconds spent in this invocation; absent in deterministic runs.
    pub wall_time_s: Option<f64>,
    pub ablation: AblationConfig,
    pub config: RunConfig,
}

pub fn run(args: &TrainArgs, threads: Option<usize>) -> anyhow::Result<()> {
    let cfg = args.resolve(threads)?;
    cfg.validate()?;
    let summary = with_threads(cfg.threads, || train_run(&cfg, args.resume.as_deref(), !args.quiet))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Train according to `cfg`, writing checkpoint, metrics log and summary
/// into the output directory.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>, progress: bool) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let manifest = manifest_path(cfg.scene.as_deref().expect("validated"));
    let scene = load_scene(&manifest)?;
    let data = load_dataset(&scene, &scene_root(&manifest))?;
    let tc = cfg.train_config();
    tc.validate()?;

    let mut state = match resume {
        Some(path) => {
            let state = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            if state.ablation != cfg.ablation {
                return Err(CliError::Usage(format!(
                    "checkpoint was trained with {:?}, the run asks for {:?}",
                    state.ablation, cfg.ablation
                ))
                .into());
            }
            if state.poses.len() != data.frames.len() {
                return Err(lbsplat_core::Error::InvalidScene(format!(
                    "checkpoint has {} frames, scene has {}",
                    state.poses.len(),
                    data.frames.len()
                ))
                .into());
            }
            state
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = init_model(&scene, &mut rng)?;
            TrainState::new(model, scene.poses(), scene.rig.clone(), cfg.seed, cfg.ablation)?
        }
    };

    let out = cfg.output_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join(METRICS_NAME);
    let mut log = open_metrics(&metrics_path, state.iteration)?;

    let mut last_print = Instant::now();
    while state.iteration < tc.iterations {
        let mut m = step(&mut state, &data, &tc)?;
        if !cfg.deterministic {
            m.elapsed_ms = Some(started.elapsed().as_millis() as u64);
        }
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n")?;
        if progress && (m.iteration % 100 == 0 || m.density.is_some() || last_print.elapsed().as_secs() >= 10) {
            last_print = Instant::now();
            eprintln!("iter {:>5}  loss {:.5}  surfels {}", m.iteration, m.loss, m.surfels);
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 && state.iteration < tc.iterations {
            log.flush()?;
            save_checkpoint(&out.join(numbered_checkpoint(state.iteration)), &state)?;
        }
    }
    log.flush()?;
    drop(log);

    save_checkpoint(&out.join(CHECKPOINT_NAME), &state)?;
    let eval = if data.eval_frames.is_empty() {
        None
    } else {
        let opts = EvalOptions { masked: cfg.eval_masked, render: tc.render_options() };
        Some(evaluate_held_out(&state, &data, &opts)?)
    };
    let (initial_loss, final_loss) = loss_endpoints(&metrics_path)?;
    let summary = TrainSummary {
        iterations: state.iteration,
        seed: state.seed,
        surfels: state.model.len(),
        initial_loss,
        final_loss,
        eval,
        wall_time_s: (!cfg.deterministic).then(|| started.elapsed().as_secs_f64()),
        ablation: state.ablation,
        config: cfg.clone(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join(SUMMARY_NAME), text).with_context(|| format!("writing summary into {}", out.display()))?;
    Ok(summary)
}

/// Open the metrics log for a run starting at `iteration`: records from a
/// previous run before that point are kept, later ones dropped.
fn open_metrics(path: &Path, iteration: u64) -> anyhow::Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if iteration > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let m: StepMetrics = serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
            if m.iteration < iteration {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

/// File name of the intermediate checkpoint taken after `iteration` steps.
pub fn numbered_checkpoint(iteration: u64) -> String {
    format!("checkpoint_{iteration:06}.ckpt")
}

fn loss_endpoints(path: &Path) -> anyhow::Result<(Option<f64>, Option<f64>)> {
    let mut losses = Vec::new();
    let mut initial = None;
    for line in BufReader::new(File::open(path)?).lines() {
        let m: StepMetrics = serde_json::from_str(&line?)?;
        if m.iteration == 0 {
            initial = Some(m.loss);
        }
        losses.push(m.loss);
    }
    let tail = &losses[losses.len().saturating_sub(FINAL_LOSS_WINDOW)..];
    let last = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok((initial, last))
}
