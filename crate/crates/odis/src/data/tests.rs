use std::collections::BTreeSet;

use proptest::prelude::*;
use tempfile::tempdir;

use super::io::*;
use super::*;
use crate::rng::stream;

fn spec() -> SceneSpec {
    SceneSpec::default()
}

#[test]
fn single_object_no_occlusion_mask_equals_raster() {
    let spec = SceneSpec {
        object_count: (1, 1),
        occlusion: false,
        ..spec()
    };
    let mut rng = stream(1, &[]);
    let sample = generate_scene(&spec, &mut rng).unwrap();
    let ids: BTreeSet<u16> = sample.instance_map.iter().copied().filter(|&i| i != 0).collect();
    assert_eq!(ids.len(), 1);
    let area = sample.instance_map.iter().filter(|&&i| i == 1).count();
    assert!(area >= MIN_VISIBLE_PIXELS);
    // single object, nothing on top: map area is the full rasterization,
    // and the painted pixels carry the class color
    let class = sample.labels[&1];
    let color = match class {
        1 => [220u8, 60, 50],
        _ => CLASS_TABLE[(class - 1) as usize].1,
    };
    let s = sample.side;
    for (i, &id) in sample.instance_map.iter().enumerate() {
        if id == 1 {
            for c in 0..3 {
                let v = (sample.image.data()[c * s * s + i] * 255.0).round() as u8;
                assert_eq!(v, color[c]);
            }
        }
    }
}

#[test]
fn no_occlusion_means_disjoint_instances() {
    let spec = SceneSpec {
        object_count: (3, 5),
        occlusion: false,
        size_range: (0.15, 0.3),
        ..spec()
    };
    for seed in 0..20u64 {
        let mut rng = stream(2, &[seed]);
        let sample = generate_scene(&spec, &mut rng).unwrap();
        // every retained instance keeps its visible-area floor, and since
        // placement forbade overlap, visible pixels == full rasterization
        for &id in sample.labels.keys() {
            let area = sample.instance_map.iter().filter(|&&i| i == id).count();
            assert!(area >= MIN_VISIBLE_PIXELS, "instance {id} has {area} px");
        }
    }
}

#[test]
fn occlusion_keeps_visible_floor() {
    let spec = SceneSpec {
        object_count: (4, 8),
        occlusion: true,
        size_range: (0.25, 0.5),
        ..spec()
    };
    for seed in 0..20u64 {
        let mut rng = stream(3, &[seed]);
        let sample = generate_scene(&spec, &mut rng).unwrap();
        for &id in sample.labels.keys() {
            let visible = sample.instance_map.iter().filter(|&&i| i == id).count();
            assert!(visible >= MIN_VISIBLE_PIXELS, "instance {id} only {visible} px visible");
        }
        // ids contiguous from 1
        let max_id = *sample.labels.keys().max().unwrap() as usize;
        assert_eq!(max_id, sample.labels.len());
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = spec();
    let mut a = stream(4, &[7]);
    let mut b = stream(4, &[7]);
    let sa = generate_scene(&spec, &mut a).unwrap();
    let sb = generate_scene(&spec, &mut b).unwrap();
    assert_eq!(sa.instance_map, sb.instance_map);
    assert_eq!(sa.labels, sb.labels);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&sa.image), bits(&sb.image));
}

#[test]
fn bad_specs_rejected() {
    assert!(SceneSpec { object_count: (0, 2), ..spec() }.validate().is_err());
    assert!(SceneSpec { object_count: (3, 2), ..spec() }.validate().is_err());
    assert!(SceneSpec { size_range: (0.0, 0.5), ..spec() }.validate().is_err());
    assert!(SceneSpec { num_classes: 9, ..spec() }.validate().is_err());
    assert!(Background::parse("plaid").is_err());
    assert_eq!(Background::parse("noise").unwrap(), Background::Noise);
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let spec = spec();
    let samples: Vec<SceneSample> = (0..6)
        .map(|i| {
            let mut rng = stream(5, &[i]);
            generate_scene(&spec, &mut rng).unwrap()
        })
        .collect();
    let dir = tempdir().unwrap();
    let manifest = write_dataset(&samples, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 6);

    let (manifest2, loaded) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest2.records.len(), 6);
    for (orig, back) in samples.iter().zip(&loaded) {
        assert_eq!(orig.instance_map, back.instance_map);
        assert_eq!(orig.labels, back.labels);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&orig.image), bits(&back.image), "image round trip not bit-exact");
    }
}

#[test]
fn pgm_zero_is_background() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("zero.pgm");
    write_pgm(&path, &[0u16; 16], 4).unwrap();
    let (map, side) = read_pgm(&path).unwrap();
    assert_eq!(side, 4);
    assert!(map.iter().all(|&v| v == 0));
}

#[test]
fn malformed_headers_report_offsets() {
    let dir = tempdir().unwrap();
    let bad_magic = dir.path().join("bad.ppm");
    std::fs::write(&bad_magic, b"P3\n2 2\n255\n").unwrap();
    let err = read_ppm(&bad_magic).unwrap_err().to_string();
    assert!(err.contains("byte 0") && err.contains("magic"), "{err}");

    let truncated = dir.path().join("short.pgm");
    std::fs::write(&truncated, b"P5\n4 4\n255\nab").unwrap();
    let err = read_pgm(&truncated).unwrap_err().to_string();
    assert!(err.contains("truncated"), "{err}");

    let junk = dir.path().join("junk.pgm");
    std::fs::write(&junk, b"P5\nxx 4\n255\n").unwrap();
    let err = read_pgm(&junk).unwrap_err().to_string();
    assert!(err.contains("integer"), "{err}");

    // comments in the header are legal netpbm
    let commented = dir.path().join("comment.pgm");
    let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[1, 2, 3, 4]);
    std::fs::write(&commented, bytes).unwrap();
    let (map, side) = read_pgm(&commented).unwrap();
    assert_eq!((map, side), (vec![1, 2, 3, 4], 2));
}

#[test]
fn split_is_deterministic_balanced_and_exhaustive() {
    // 1000 synthetic manifest records over 8 primary classes
    let records: Vec<ManifestRecord> = (0..1000)
        .map(|i| ManifestRecord {
            id: format!("s{i:05}"),
            image_path: format!("s{i:05}.ppm").into(),
            mask_path: format!("s{i:05}.pgm").into(),
            labels: vec![(1, (i % 8 + 1) as u8), (2, ((i + 3) % 8 + 1) as u8)],
        })
        .collect();
    let manifest = DatasetManifest { root: "unused".into(), records };

    let (train, val) = split(&manifest, 0.8, 9).unwrap();
    assert_eq!(train.records.len(), 800);
    assert_eq!(val.records.len(), 200);

    // same seed, same split
    let (train2, _) = split(&manifest, 0.8, 9).unwrap();
    assert_eq!(train.records, train2.records);

    // disjoint union is the input
    let mut ids: Vec<&str> = train
        .records
        .iter()
        .chain(&val.records)
        .map(|r| r.id.as_str())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 1000);

    // class balance within one sample of proportional
    for class in 1..=8u8 {
        let total = manifest
            .records
            .iter()
            .filter(|r| r.primary_class().unwrap() == class)
            .count();
        let in_train = train
            .records
            .iter()
            .filter(|r| r.primary_class().unwrap() == class)
            .count();
        let exact = 0.8 * total as f64;
        assert!(
            (in_train as f64 - exact).abs() <= 1.0,
            "class {class}: {in_train} of {total} in train"
        );
    }

    assert!(split(&manifest, 0.0, 9).is_err());
    assert!(split(&manifest, 1.0, 9).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scene_labels_match_map(seed in 0u64..500) {
        let mut rng = stream(6, &[seed]);
        let sample = generate_scene(&SceneSpec::default(), &mut rng).unwrap();
        // every nonzero pixel id has a label, every label appears in the map
        let ids: BTreeSet<u16> =
            sample.instance_map.iter().copied().filter(|&i| i != 0).collect();
        let labeled: BTreeSet<u16> = sample.labels.keys().copied().collect();
        prop_assert_eq!(ids, labeled);
    }
}
