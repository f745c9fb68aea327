use lbsplat_core::articulation::{correct_weights, SkinField, DEFAULT_ENCODING_LEVELS};
use lbsplat_core::pipeline::pose_model;
use lbsplat_core::raster::{composite_pixel, Fragment};
use lbsplat_core::synth::template_skeleton;
use lbsplat_core::{AblationConfig, Model, Surfel};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fragments() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..=1.0f64, 0.0..0.999f64), 0..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn blending_weights_and_transmittance_sum_to_one(list in fragments(), bg in 0.0..1.0f64) {
        let frags: Vec<Fragment> = list
            .iter()
            .enumerate()
            .map(|(i, &(kernel, opacity))| Fragment { id: i as u32, depth: 1.0 + i as f64, u: 0.0, v: 0.0, kernel, opacity })
            .collect();
        let white = vec![[1.0; 3]; frags.len()];
        let c = composite_pixel(&frags, &white, [bg; 3], false);
        // white surfels over a gray background: alpha + (1 - alpha) * bg
        prop_assert!((c.rgb[0] - (c.alpha + (1.0 - c.alpha) * bg)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&c.alpha));
    }

    #[test]
    fn corrected_weights_form_a_distribution(
        row in prop::collection::vec(0.0..1.0f64, 2..12),
        logit_scale in 0.0..500.0f64,
        seed in any::<u64>(),
    ) {
        let sum: f64 = row.iter().sum();
        prop_assume!(sum > 1e-6);
        let row: Vec<f64> = row.iter().map(|w| w / sum).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = row.iter().map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0) * logit_scale).collect();
        let w = correct_weights(&row, &logits);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn one_hot_skinning_is_rigid_per_joint(
        theta in prop::collection::vec(-3.0..3.0f64, 24),
        seed in any::<u64>(),
    ) {
        let skeleton = template_skeleton(8).unwrap();
        let k = skeleton.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * k;
        let surfels: Vec<Surfel> = (0..n)
            .map(|i| {
                let c = Vector3::new(i as f64 * 0.05 - 0.5, (i % 5) as f64 * 0.2 - 0.4, (i % 3) as f64 * 0.1);
                Surfel::new(c, [1.0, 0.0, 0.0, 0.0], [0.05, 0.05], 0.5, [0.5; 3])
            })
            .collect();
        let weights: Vec<f64> = (0..n).flat_map(|i| (0..k).map(move |j| if j == i % k { 1.0 } else { 0.0 })).collect();
        let skin = SkinField::new(k, weights, DEFAULT_ENCODING_LEVELS, &mut rng).unwrap();
        let model = Model::new(surfels, skin, skeleton).unwrap();
        let ablation = AblationConfig { enable_lbs_opt: false, enable_pose_calib: false, enable_mask_loss: true };
        let posed = pose_model(&model, &theta, &ablation).unwrap();
        for a in 0..n {
            let b = a + k;
            if b >= n {
                continue;
            }
            let rest = (model.surfels[a].center - model.surfels[b].center).norm();
            let now = (posed.surfels[a].center - posed.surfels[b].center).norm();
            prop_assert!((rest - now).abs() < 1e-9);
            // tangent axes keep their lengths
            prop_assert!((posed.surfels[a].axis_u.norm() - 0.05).abs() < 1e-12);
        }
    }
}
