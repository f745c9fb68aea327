use clap::Args;
use lbsplat_core::gradcheck::{check_scene, gradient_check, GradCheckOptions, GradCheckReport, ParamClass};
use lbsplat_core::pipeline::pose_model;
use lbsplat_core::raster::{compare_with_oracle, OracleComparison};
use lbsplat_core::AblationConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

/// Largest fast-path deviation from the oracle that still passes.
pub const FAST_PATH_TOLERANCE: f64 = 1e-3;

/// Poses at which the rasterizer is compared with the oracle.
const ORACLE_POSES: usize = 4;

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Seed of the generated scene and of the sampled parameters.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameters sampled per class.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Corrupt the analytic gradient of one class, to see the check fail.
    #[arg(long, value_parser = parse_class)]
    pub inject_fault: Option<ParamClass>,
}

fn parse_class(s: &str) -> Result<ParamClass, String> {
    ParamClass::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ParamClass::ALL.iter().map(|c| c.name()).collect();
        format!("unknown parameter class {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub gradients: GradCheckReport,
    pub oracle: Vec<OracleComparison>,
}

impl CheckReport {
    pub fn oracle_pass(&self) -> bool {
        self.oracle.iter().all(|c| c.bitwise_equal && c.max_fast_deviation < FAST_PATH_TOLERANCE)
    }

    pub fn pass(&self) -> bool {
        self.gradients.pass() && self.oracle_pass()
    }

    pub fn lines(&self) -> Vec<String> {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = Vec::new();
        for c in &self.gradients.classes {
            out.push(format!(
                "{} gradient {:<9} samples {:>2}  skipped {:>3}  max rel {:.2e}  max abs {:.2e}",
                verdict(c.pass),
                c.class.name(),
                c.samples,
                c.skipped,
                c.max_rel_error,
                c.max_abs_error
            ));
        }
        let exact = self.oracle.iter().all(|c| c.bitwise_equal);
        out.push(format!("{} oracle   exact render bitwise equal at {} poses", verdict(exact), self.oracle.len()));
        let dev = self.oracle.iter().map(|c| c.max_fast_deviation).fold(0.0, f64::max);
        out.push(format!(
            "{} oracle   fast render max deviation {dev:.2e} (limit {FAST_PATH_TOLERANCE:.0e})",
            verdict(dev < FAST_PATH_TOLERANCE)
        ));
        out
    }
}

pub fn check(args: &CheckArgs) -> anyhow::Result<CheckReport> {
    let scene = check_scene(args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let opts = GradCheckOptions { samples_per_class: args.samples, inject_fault: args.inject_fault, ..Default::default() };
    let gradients = gradient_check(&scene.model, &scene.target(), &opts, &mut rng)?;

    let ablation = AblationConfig::default();
    let colors = scene.model.colors();
    let mut oracle = Vec::with_capacity(ORACLE_POSES);
    for i in 0..ORACLE_POSES {
        let theta: Vec<f64> = if i == 0 {
            scene.theta_t.clone()
        } else {
            scene.theta_t.iter().map(|t| t + rng.random_range(-0.4..0.4)).collect()
        };
        let posed = pose_model(&scene.model, &theta, &ablation)?;
        oracle.push(compare_with_oracle(&scene.camera, &posed.surfels, &colors));
    }
    Ok(CheckReport { gradients, oracle })
}

pub fn run(args: &CheckArgs) -> anyhow::Result<()> {
    let report = check(args)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.pass() {
        println!("PASS");
        Ok(())
    } else {
        let mut failing: Vec<String> = report.gradients.failing().iter().map(|s| s.to_string()).collect();
        if !report.oracle_pass() {
            failing.push("oracle".into());
        }
        Err(CliError::CheckFailed(failing.join(", ")).into())
    }
}
