//! Generate a small synthetic multi-object dataset, write it to disk as
//! PPM/PGM + manifest, and read it back.
//!
//! cargo run --release -p odis --example generate_dataset

use odis::data::io::{read_dataset, split, write_dataset};
use odis::data::{generate_scene, SceneSpec};
use odis::rng::stream;

fn main() -> odis::Result<()> {
    let spec = SceneSpec::default(); // 32x32, 2..=4 objects, 8 classes
    let samples: Vec<_> = (0..32)
        .map(|i| {
            let mut rng = stream(7, &[i]);
            generate_scene(&spec, &mut rng)
        })
        .collect::<odis::Result<_>>()?;

    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = write_dataset(&samples, dir.path())?;
    println!("wrote {} samples to {}", manifest.records.len(), dir.path().display());

    let (manifest, loaded) = read_dataset(dir.path())?;
    let sample = &loaded[0];
    println!(
        "first sample: {} instances, classes {:?}",
        sample.labels.len(),
        sample.labels.values().collect::<Vec<_>>()
    );

    // a quick ASCII view of the instance map
    for y in (0..sample.side).step_by(2) {
        let row: String = (0..sample.side)
            .step_by(2)
            .map(|x| match sample.instance_map[y * sample.side + x] {
                0 => '.',
                id => char::from_digit(id as u32 % 10, 10).unwrap(),
            })
            .collect();
        println!("  {row}");
    }

    let (train, val) = split(&manifest, 0.75, 0)?;
    println!("split: {} train / {} val", train.records.len(), val.records.len());
    Ok(())
}
