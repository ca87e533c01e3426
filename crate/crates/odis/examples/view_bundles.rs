//! Build object-aware view bundles: paired global crops that must contain
//! the sampled target object, independent block masks, and local crops.
//!
//! cargo run --release -p odis --example view_bundles

use odis::augment::{build_view_bundle, AugmentConfig, SamplingStrategy};
use odis::data::{generate_scene, SceneSpec};
use odis::rng::stream;

fn show_mask(mask: &[u8], grid: usize, label: &str) {
    println!("  {label}:");
    for y in 0..grid {
        let row: String = (0..grid)
            .map(|x| if mask[y * grid + x] != 0 { '#' } else { '.' })
            .collect();
        println!("    {row}");
    }
}

fn main() -> odis::Result<()> {
    let spec = SceneSpec::default();
    let mut rng = stream(3, &[]);
    let sample = generate_scene(&spec, &mut rng)?;
    println!(
        "scene with {} instances, areas {:?}",
        sample.labels.len(),
        sample.instance_areas().values().collect::<Vec<_>>()
    );

    let cfg = AugmentConfig {
        n_local: 4,
        sampling: SamplingStrategy::Area,
        ..AugmentConfig::default()
    };
    let grid = cfg.global_grid();

    for seed in 0..3u64 {
        let mut rng = stream(11, &[seed]);
        let bundle = build_view_bundle(&sample, &cfg, &mut rng)?;
        println!("\nbundle {seed}: target instance {}", bundle.target_instance);
        for (i, g) in bundle.globals.iter().enumerate() {
            println!(
                "  global {i}: crop {}x{} at ({}, {}), flip {}",
                g.crop.w, g.crop.h, g.crop.x0, g.crop.y0, g.crop.flip
            );
            show_mask(&g.obj_mask, grid, "object patch mask");
            match &g.block_mask {
                Some(m) => show_mask(m, grid, "block mask"),
                None => println!("  (no block mask on this view)"),
            }
        }
        println!(
            "  {} local crops, none carry attention masks in the default config",
            bundle.locals.len()
        );
    }
    Ok(())
}
