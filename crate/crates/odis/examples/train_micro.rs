//! Short end-to-end training run on a tiny in-memory dataset: watch the
//! object, patch, and total losses come down.
//!
//! cargo run --release -p odis --example train_micro

use odis::augment::AugmentConfig;
use odis::data::{generate_scene, SceneSpec};
use odis::distill::{batch_for_step, train_step, TrainConfig, TrainState};
use odis::rng::stream;
use odis::vit::ViTConfig;
use odis::workers::Workers;

fn main() -> odis::Result<()> {
    let vit_cfg = ViTConfig {
        depth: 2,
        embed_dim: 32,
        head_output_dim: 64,
        head_hidden_dim: 64,
        ..ViTConfig::default()
    };
    let acfg = AugmentConfig { n_local: 2, ..AugmentConfig::default() };
    let tcfg = TrainConfig {
        steps: 300,
        batch_size: 4,
        lr: 2e-3,
        seed: 1,
        ..TrainConfig::default()
    };

    let spec = SceneSpec::default();
    let samples: Vec<_> = (0..64)
        .map(|i| {
            let mut rng = stream(4, &[i]);
            generate_scene(&spec, &mut rng)
        })
        .collect::<odis::Result<_>>()?;

    let workers = Workers::from_env();
    let mut state: TrainState<f32> = TrainState::init(&vit_cfg, &tcfg)?;
    println!("training {} steps on {} scenes ({} workers)", tcfg.steps, samples.len(), workers.count());

    for step in 0..tcfg.steps {
        let bundles = batch_for_step(&samples, &acfg, tcfg.seed, step, tcfg.batch_size, &workers)?;
        let (loss, metrics) = train_step(&mut state, &bundles, &vit_cfg, &tcfg, &workers)?;
        if step % 50 == 0 || step + 1 == tcfg.steps {
            println!(
                "step {step:4}  obj {:.4}  patch {:.4}  total {:.4}  lr {:.2e}  teacher entropy {:.3}",
                loss.l_obj, loss.l_patch, loss.total, metrics.lr, metrics.teacher_entropy
            );
        }
    }
    Ok(())
}
