//! Shared fixtures for the benchmarks.

use lbsplat_core::pipeline::pose_model;
use lbsplat_core::scene::init_model;
use lbsplat_core::{generate_synthetic_body, AblationConfig, Camera, PosedSurfel, SynthConfig, SyntheticBody, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default-sized synthetic body with the given rig size and resolution.
pub fn body(vertices: usize, resolution: u32) -> SyntheticBody {
    let base = SynthConfig::default();
    generate_synthetic_body(&SynthConfig {
        vertices,
        resolution,
        frames: 10,
        focal: base.focal * resolution as f64 / base.resolution as f64,
        ..base
    })
    .expect("benchmark scene")
}

/// Ground-truth surfels posed for the first frame, with its camera and colors.
pub fn posed_frame(body: &SyntheticBody) -> (Camera, Vec<PosedSurfel>, Vec<[f64; 3]>) {
    let model = body.gt_model().expect("ground-truth model");
    let posed = pose_model(&model, &body.gt_thetas[0], &AblationConfig::default()).expect("pose");
    (body.scene.cameras[0].clone(), posed.surfels, model.colors())
}

/// Fresh training state initialized from the body's rig.
pub fn fresh_state(body: &SyntheticBody) -> TrainState {
    let model = init_model(&body.scene, &mut ChaCha8Rng::seed_from_u64(0)).expect("init");
    TrainState::new(model, body.scene.poses(), body.scene.rig.clone(), 0, AblationConfig::default()).expect("state")
}
