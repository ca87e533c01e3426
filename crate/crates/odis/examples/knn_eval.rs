//! Frozen-feature k-NN evaluation with and without inference-time object
//! masks, after a brief pretraining run.
//!
//! cargo run --release -p odis --example knn_eval

use odis::augment::AugmentConfig;
use odis::data::{generate_scene, SceneSpec};
use odis::distill::{batch_for_step, train_step, TrainConfig, TrainState};
use odis::eval::{extract_features, knn_sweep, linear_probe};
use odis::rng::stream;
use odis::vit::ViTConfig;
use odis::workers::Workers;

fn main() -> odis::Result<()> {
    let vit_cfg = ViTConfig::default();
    let acfg = AugmentConfig { n_local: 2, ..AugmentConfig::default() };
    let tcfg = TrainConfig { steps: 400, batch_size: 4, seed: 2, ..TrainConfig::default() };

    let spec = SceneSpec::default();
    let all: Vec<_> = (0..256)
        .map(|i| {
            let mut rng = stream(9, &[i]);
            generate_scene(&spec, &mut rng)
        })
        .collect::<odis::Result<_>>()?;
    let (train_set, val_set) = all.split_at(224);

    let workers = Workers::from_env();
    let mut state: TrainState<f32> = TrainState::init(&vit_cfg, &tcfg)?;
    println!("pretraining {} steps...", tcfg.steps);
    for step in 0..tcfg.steps {
        let bundles = batch_for_step(train_set, &acfg, tcfg.seed, step, tcfg.batch_size, &workers)?;
        train_step(&mut state, &bundles, &vit_cfg, &tcfg, &workers)?;
    }

    let layout = state.layout.clone();
    for use_masks in [false, true] {
        let (train_feats, _) =
            extract_features(&state.teacher, &layout, &vit_cfg, train_set, use_masks, &workers)?;
        let (val_feats, fallbacks) =
            extract_features(&state.teacher, &layout, &vit_cfg, val_set, use_masks, &workers)?;
        let ((best_k, best_acc), sweep) =
            knn_sweep(&train_feats, &val_feats, &[1, 5, 10, 20], 0.07)?;
        println!(
            "use_masks={use_masks}: best k = {best_k}, accuracy {best_acc:.4} (sweep {sweep:?}, {fallbacks} mask fallbacks)"
        );
        let (best_lr, probe_acc) =
            linear_probe(&train_feats, &val_feats, &[0.001, 0.01, 0.1], 20, 0)?;
        println!("  linear probe: lr {best_lr}, accuracy {probe_acc:.4}");
    }
    println!("(chance accuracy for 8 classes is 0.125)");
    Ok(())
}
