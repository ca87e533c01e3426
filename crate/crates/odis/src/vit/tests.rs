//! Backbone and masked-attention behavior, including the bit-exactness
//! contracts the mask must satisfy.

use super::*;
use crate::rng::stream;
use crate::tensor::tape::Tape;

fn micro_cfg() -> ViTConfig {
    ViTConfig {
        image_side: 16,
        patch_size: 4,
        channels: 3,
        depth: 2,
        embed_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        head_hidden_dim: 16,
        head_output_dim: 8,
        student_temp: 0.1,
        teacher_temp: 0.04,
    }
}

fn rand_image<E: Scalar>(cfg: &ViTConfig, seed: u64) -> Tensor<E> {
    let mut rng = stream(seed, &[0x1111]);
    randn(
        vec![cfg.channels, cfg.image_side, cfg.image_side],
        0.5,
        &mut rng,
    )
}

fn forward_f32(
    cfg: &ViTConfig,
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    mask: Option<&[u8]>,
) -> (Tensor<f32>, Tensor<f32>, Vec<Tensor<f32>>) {
    let layout = ParamLayout::resolve(params, cfg).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let patches = patchify(image, cfg.patch_size).unwrap();
    let tokens = embed(&mut tape, &pv, &layout, cfg, patches, None, cfg.image_side).unwrap();
    let seq = TokenSequence::new(tokens, mask.map(|m| m.to_vec()), cfg.tokens()).unwrap();
    let (z_obj, z_patches, trace) =
        backbone_forward(&mut tape, &pv, &layout, cfg, seq, false).unwrap();
    let attns = trace
        .per_layer_head
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    (
        tape.value(z_obj).clone(),
        tape.value(z_patches).clone(),
        attns,
    )
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn config_validation() {
    let mut cfg = ViTConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.image_side = 33;
    assert!(cfg.validate().is_err());
    cfg.image_side = 32;
    cfg.heads = 5;
    assert!(cfg.validate().is_err());
    cfg.heads = 4;
    cfg.teacher_temp = 0.2; // not below student temp
    assert!(cfg.validate().is_err());
}

#[test]
fn patchify_shapes_and_layout() {
    let img: Tensor<f64> = Tensor::full(vec![3, 32, 32], 0.25);
    let p = patchify(&img, 4).unwrap();
    assert_eq!(p.shape(), &[64, 48]);
    // constant image: every patch row identical
    let first = p.row(0).to_vec();
    for i in 1..64 {
        assert_eq!(p.row(i), &first[..]);
    }
    // patch size = image side: one patch equal to the flattened image
    let small: Tensor<f64> = Tensor::new(
        vec![1, 2, 2],
        vec![1.0, 2.0, 3.0, 4.0],
    )
    .unwrap();
    let p = patchify(&small, 2).unwrap();
    assert_eq!(p.shape(), &[1, 4]);
    assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);

    assert!(patchify(&img, 5).is_err());
}

#[test]
fn embed_zero_weights_isolates_obj_token() {
    let cfg = micro_cfg();
    let mut rng = stream(1, &[]);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    // zero the embedding path, keep a recognizable object token
    for name in ["embed/w", "embed/b", "pos"] {
        let t = params.get_mut(name).unwrap();
        let z = Tensor::zeros(t.shape().to_vec());
        *t = z;
    }
    *params.get_mut("obj_token").unwrap() = Tensor::full(vec![1, cfg.embed_dim], 0.5);
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let img: Tensor<f64> = rand_image(&cfg, 2);
    let patches = patchify(&img, cfg.patch_size).unwrap();
    let tokens = embed(&mut tape, &pv, &layout, &cfg, patches, None, cfg.image_side).unwrap();
    let t = tape.value(tokens);
    assert_eq!(t.shape(), &[1 + cfg.tokens(), cfg.embed_dim]);
    assert!(t.row(0).iter().all(|&v| v == 0.5), "token 0 is the object embedding");
    for i in 1..=cfg.tokens() {
        assert!(t.row(i).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn embed_is_equivariant_to_patch_permutation_without_pos() {
    let cfg = micro_cfg();
    let mut rng = stream(3, &[]);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    *params.get_mut("pos").unwrap() = Tensor::zeros(vec![cfg.tokens(), cfg.embed_dim]);
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();

    let img: Tensor<f64> = rand_image(&cfg, 4);
    let patches = patchify(&img, cfg.patch_size).unwrap();

    // rotate patch rows by one
    let hw = cfg.tokens();
    let pd = cfg.patch_dim();
    let mut rotated = Vec::with_capacity(hw * pd);
    for i in 0..hw {
        rotated.extend_from_slice(patches.row((i + 1) % hw));
    }
    let rotated = Tensor::new(vec![hw, pd], rotated).unwrap();

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let a = embed(&mut tape, &pv, &layout, &cfg, patches, None, cfg.image_side).unwrap();
    let b = embed(&mut tape, &pv, &layout, &cfg, rotated, None, cfg.image_side).unwrap();
    let (ta, tb) = (tape.value(a).clone(), tape.value(b).clone());
    for i in 0..hw {
        assert_eq!(ta.row(1 + (i + 1) % hw), tb.row(1 + i));
    }
}

#[test]
fn embed_pos_difference_is_additive() {
    let cfg = micro_cfg();
    let mut rng = stream(5, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let mut shifted = params.clone();
    let delta = 0.125;
    {
        let pos = shifted.get_mut("pos").unwrap();
        let moved = pos.map(|v| v + delta);
        *pos = moved;
    }

    let img: Tensor<f64> = rand_image(&cfg, 6);
    let patches = patchify(&img, cfg.patch_size).unwrap();

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let a = embed(&mut tape, &pv, &layout, &cfg, patches.clone(), None, cfg.image_side).unwrap();
    let pv2 = shifted.register(&mut tape);
    let b = embed(&mut tape, &pv2, &layout, &cfg, patches, None, cfg.image_side).unwrap();
    let (ta, tb) = (tape.value(a), tape.value(b));
    // token 0 untouched, patch tokens differ exactly by delta
    assert_eq!(ta.row(0), tb.row(0));
    for i in 1..=cfg.tokens() {
        for (x, y) in ta.row(i).iter().zip(tb.row(i)) {
            assert!((y - x - delta).abs() < 1e-12);
        }
    }
}

#[test]
fn mask_patch_tokens_replacement_counts() {
    let cfg = micro_cfg();
    let mut rng = stream(7, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let img: Tensor<f64> = rand_image(&cfg, 8);
    let patches = patchify(&img, cfg.patch_size).unwrap();
    let hw = cfg.tokens();

    let run = |m: &[u8]| {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let v = embed(&mut tape, &pv, &layout, &cfg, patches.clone(), Some(m), cfg.image_side)
            .unwrap();
        tape.value(v).clone()
    };
    let plain = run(&vec![0u8; hw]);
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let unmasked = embed(&mut tape, &pv, &layout, &cfg, patches.clone(), None, cfg.image_side).unwrap();
    assert_eq!(tape.value(unmasked).data(), plain.data(), "all-zero mask is a no-op");

    // all ones: every patch row is patch_token + pos
    let all = run(&vec![1u8; hw]);
    let ptok = params.get("patch_token").unwrap();
    let pos = params.get("pos").unwrap();
    for i in 0..hw {
        for j in 0..cfg.embed_dim {
            let want = ptok.data()[j] + pos.row(i)[j];
            assert!((all.row(1 + i)[j] - want).abs() < 1e-12);
        }
    }

    // exactly sum(m) rows differ
    let mut m = vec![0u8; hw];
    m[2] = 1;
    m[9] = 1;
    m[13] = 1;
    let some = run(&m);
    let differing = (0..hw)
        .filter(|&i| some.row(1 + i) != plain.row(1 + i))
        .count();
    assert_eq!(differing, 3);
}

#[test]
fn all_ones_mask_is_bit_identical_to_unmasked() {
    let cfg = micro_cfg();
    let mut rng = stream(9, &[]);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng).unwrap();
    let img: Tensor<f32> = rand_image(&cfg, 10);
    let ones = vec![1u8; cfg.tokens()];

    let (zo_a, zp_a, _) = forward_f32(&cfg, &params, &img, Some(&ones));
    let (zo_b, zp_b, _) = forward_f32(&cfg, &params, &img, None);
    assert_eq!(bits(&zo_a), bits(&zo_b));
    assert_eq!(bits(&zp_a), bits(&zp_b));
}

#[test]
fn patch_rows_unaffected_by_mask() {
    let cfg = micro_cfg();
    let mut rng = stream(11, &[]);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng).unwrap();
    let img: Tensor<f32> = rand_image(&cfg, 12);
    let mut mask = vec![0u8; cfg.tokens()];
    mask[3] = 1;
    mask[7] = 1;

    let (_, zp_masked, _) = forward_f32(&cfg, &params, &img, Some(&mask));
    let (_, zp_plain, _) = forward_f32(&cfg, &params, &img, None);
    assert_eq!(bits(&zp_masked), bits(&zp_plain));
}

#[test]
fn masked_attention_weights_are_exactly_zero() {
    let cfg = micro_cfg();
    let mut rng = stream(13, &[]);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng).unwrap();
    let img: Tensor<f32> = rand_image(&cfg, 14);
    let hw = cfg.tokens();
    let mut mask = vec![0u8; hw];
    for i in [0usize, 5, 6, 11] {
        mask[i] = 1;
    }

    let (_, _, attns) = forward_f32(&cfg, &params, &img, Some(&mask));
    assert_eq!(attns.len(), cfg.depth * cfg.heads);
    for a in &attns {
        assert_eq!(a.shape(), &[1 + hw, 1 + hw], "token count conserved");
        let row0 = a.row(0);
        let mut sum = 0.0f32;
        for (j, &m) in mask.iter().enumerate() {
            if m == 0 {
                assert_eq!(row0[j + 1], 0.0, "disallowed key has exactly zero weight");
            }
        }
        for &w in row0 {
            sum += w;
        }
        assert!((sum - 1.0).abs() < 1e-6, "token-0 attention row sums to 1");
        // the pooling token is read-only: no patch row attends to it
        for i in 1..=hw {
            assert_eq!(a.row(i)[0], 0.0);
        }
    }
}

#[test]
fn single_allowed_key_collapses_to_its_value_row() {
    // one head, identity value/out projections, token-0 self logit removed:
    // the object token's attention output must equal the allowed patch row.
    let mut cfg = micro_cfg();
    cfg.heads = 1;
    let mut rng = stream(15, &[]);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let d = cfg.embed_dim;
    let mut eye = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    *params.get_mut("layer0/attn/wv").unwrap() = eye.clone();
    *params.get_mut("layer0/attn/wo").unwrap() = eye;
    *params.get_mut("layer0/attn/bv").unwrap() = Tensor::zeros(vec![d]);
    *params.get_mut("layer0/attn/bo").unwrap() = Tensor::zeros(vec![d]);
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();

    let hw = cfg.tokens();
    let target = 5;
    let mut mask = vec![0u8; hw];
    mask[target] = 1;

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let mut rng2 = stream(16, &[]);
    let x: Tensor<f64> = randn(vec![1 + hw, d], 1.0, &mut rng2);
    let xv = tape.input(x.clone());
    let seq = TokenSequence::new(xv, Some(mask), hw).unwrap();
    let (out, _) = masked_mha(&mut tape, &pv, 0, &layout, &cfg, &seq, true).unwrap();
    let got = tape.value(out);
    for j in 0..d {
        assert!(
            (got.row(0)[j] - x.row(1 + target)[j]).abs() < 1e-9,
            "token-0 output equals the value row of the only allowed patch"
        );
    }
}

#[test]
fn all_zero_mask_is_rejected() {
    let cfg = micro_cfg();
    let hw = cfg.tokens();
    let mut tape: Tape<f32> = Tape::new();
    let tokens = tape.input(Tensor::zeros(vec![1 + hw, cfg.embed_dim]));
    assert!(TokenSequence::new(tokens, Some(vec![0u8; hw]), hw).is_err());
    // wrong length too
    let t2 = tape.input(Tensor::zeros(vec![1 + hw, cfg.embed_dim]));
    assert!(TokenSequence::new(t2, Some(vec![1u8; hw + 1]), hw).is_err());
}

#[test]
fn depth_zero_returns_normalized_embedding() {
    let mut cfg = micro_cfg();
    cfg.depth = 0;
    let mut rng = stream(17, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let img: Tensor<f64> = rand_image(&cfg, 18);

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let patches = patchify(&img, cfg.patch_size).unwrap();
    let embedded = embed(&mut tape, &pv, &layout, &cfg, patches, None, cfg.image_side).unwrap();
    let seq = TokenSequence::new(embedded, None, cfg.tokens()).unwrap();
    let (z_obj, z_patches, _) =
        backbone_forward(&mut tape, &pv, &layout, &cfg, seq, false).unwrap();

    // final norm with unit gamma, zero beta: rows have mean ~0, var ~1
    let zp = tape.value(z_patches);
    for i in 0..cfg.tokens() {
        let row = zp.row(i);
        let mean: f64 = row.iter().sum::<f64>() / row.len() as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert_eq!(tape.value(z_obj).shape(), &[1, cfg.embed_dim]);
}

#[test]
fn masked_out_background_still_reaches_obj_token_at_depth_two() {
    let cfg = micro_cfg(); // depth 2
    let mut rng = stream(19, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let mut img: Tensor<f64> = rand_image(&cfg, 20);
    let hw = cfg.tokens();
    let mut mask = vec![0u8; hw];
    mask[0] = 1; // only the first patch is the "object"

    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let fwd = |image: &Tensor<f64>| {
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let patches = patchify(image, cfg.patch_size).unwrap();
        let tokens = embed(&mut tape, &pv, &layout, &cfg, patches, None, cfg.image_side).unwrap();
        let seq = TokenSequence::new(tokens, Some(mask.clone()), hw).unwrap();
        let (z_obj, _, _) = backbone_forward(&mut tape, &pv, &layout, &cfg, seq, false).unwrap();
        tape.value(z_obj).clone()
    };
    let before = fwd(&img);
    // perturb a pixel inside the last patch, which the mask excludes
    let s = cfg.image_side;
    let last = img.numel() - 1;
    img.data_mut()[last] += 1.0;
    let after = fwd(&img);
    assert!(
        before.data().iter().zip(after.data()).any(|(a, b)| a != b),
        "background information flows to the object token through patch rows (side {s})"
    );
}

#[test]
fn gradient_to_disallowed_patch_inputs_is_zero_at_depth_one() {
    let mut cfg = micro_cfg();
    cfg.depth = 1;
    let mut rng = stream(21, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let hw = cfg.tokens();
    let mut mask = vec![0u8; hw];
    mask[2] = 1;
    mask[4] = 1;

    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let mut rng2 = stream(22, &[]);
    let x: Tensor<f64> = randn(vec![1 + hw, cfg.embed_dim], 1.0, &mut rng2);
    let xv = tape.input(x);
    let seq = TokenSequence::new(xv, Some(mask.clone()), hw).unwrap();
    let (z_obj, _, _) = backbone_forward(&mut tape, &pv, &layout, &cfg, seq, false).unwrap();
    let sq = tape.mul(z_obj, z_obj).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.wrt(xv).unwrap();
    for (j, &m) in mask.iter().enumerate() {
        let row = gx.row(1 + j);
        if m == 0 {
            assert!(
                row.iter().all(|&v| v == 0.0),
                "no gradient reaches key/value inputs of disallowed patch {j}"
            );
        } else {
            assert!(row.iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn head_uniform_cases_and_normalization() {
    let cfg = micro_cfg();
    let k = cfg.head_output_dim;
    let mut rng = stream(23, &[]);
    let mut params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();

    // zero weights, zero center: uniform 1/K
    for name in ["head/w1", "head/b1", "head/w2", "head/b2", "head/w3", "head/b3"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let z = tape.input(Tensor::full(vec![1, cfg.embed_dim], 0.3));
    let center = Tensor::zeros(vec![k]);
    let (probs, _) = head_forward(&mut tape, &pv, &layout, z, 0.04, Some(&center)).unwrap();
    for &p in tape.value(probs).data() {
        assert!((p - 1.0 / k as f64).abs() < 1e-12);
    }

    // random weights: output sums to one
    let mut rng = stream(24, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let mut rng2 = stream(25, &[]);
    let z: Tensor<f64> = randn(vec![1, cfg.embed_dim], 1.0, &mut rng2);
    let zv = tape.input(z);
    let (probs, logits) = head_forward(&mut tape, &pv, &layout, zv, 0.1, None).unwrap();
    let sum: f64 = tape.value(probs).data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);

    // teacher whose center equals the logits emits the uniform vector
    let logits_t = tape.value(logits).clone();
    let center = Tensor::new(vec![k], logits_t.data().to_vec()).unwrap();
    let (probs, _) = head_forward(&mut tape, &pv, &layout, zv, 0.04, Some(&center)).unwrap();
    for &p in tape.value(probs).data() {
        assert!((p - 1.0 / k as f64).abs() < 1e-9);
    }

    // non-positive temperature rejected by the softmax
    let bad = head_forward(&mut tape, &pv, &layout, zv, 0.0, None);
    assert!(bad.is_err());
}

#[test]
fn local_view_uses_interpolated_positions() {
    let cfg = micro_cfg(); // global grid 4x4
    let mut rng = stream(27, &[]);
    let params: ModelParams<f64> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();

    // 8x8 local view -> 2x2 grid
    let mut rng2 = stream(28, &[]);
    let local: Tensor<f64> = randn(vec![3, 8, 8], 0.5, &mut rng2);
    let patches = patchify(&local, cfg.patch_size).unwrap();
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let tokens = embed(&mut tape, &pv, &layout, &cfg, patches, None, 8).unwrap();
    assert_eq!(tape.value(tokens).shape(), &[1 + 4, cfg.embed_dim]);

    // interpolation rows are convex combinations
    let m: Tensor<f64> = pos_interp_matrix(4, 2);
    for i in 0..4 {
        let s: f64 = m.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(m.row(i).iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}

#[test]
fn encode_image_matches_tape_forward() {
    let cfg = micro_cfg();
    let mut rng = stream(29, &[]);
    let params: ModelParams<f32> = ModelParams::init(&cfg, &mut rng).unwrap();
    let layout = ParamLayout::resolve(&params, &cfg).unwrap();
    let img: Tensor<f32> = rand_image(&cfg, 30);
    let mut mask = vec![0u8; cfg.tokens()];
    mask[1] = 1;

    let (zo, zp) = encode_image(&params, &layout, &cfg, &img, Some(&mask)).unwrap();
    let (zo2, zp2, _) = forward_f32(&cfg, &params, &img, Some(&mask));
    assert_eq!(bits(&zo), bits(&zo2));
    assert_eq!(bits(&zp), bits(&zp2));
}
