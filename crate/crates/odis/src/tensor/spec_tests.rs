//! Oracle tests for the numeric kernel: hand-computed and closed-form
//! expectations, finite-difference agreement, and the softmax/CE
//! invariants as property tests.

use proptest::prelude::*;

use super::gradcheck::{fd_check, FD_STEP, GRAD_TOL};
use super::tape::{Axis, Tape, Var};
use super::{randn, Tensor};
use crate::error::Result;
use crate::rng::stream;

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
}

/// Brute-force triple loop, kept deliberately separate from the kernel.
fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_hand_and_annihilator() {
    let mut tape = Tape::new();
    let eye = tape.input(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.input(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let b = tape.input(t2(2, 1, &[5.0, 6.0]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[17.0, 39.0]); // hand multiplication

    let z = tape.input(Tensor::zeros(vec![2, 3]));
    let o = tape.input(Tensor::full(vec![3, 4], 1.0));
    let y = tape.matmul(z, o).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // random case against the brute-force oracle
    let mut rng = stream(3, &[1]);
    let ra: Tensor<f64> = randn(vec![5, 7], 1.0, &mut rng);
    let rb: Tensor<f64> = randn(vec![7, 4], 1.0, &mut rng);
    let va = tape.input(ra.clone());
    let vb = tape.input(rb.clone());
    let y = tape.matmul(va, vb).unwrap();
    let expect = matmul_oracle(&ra, &rb);
    for (got, want) in tape.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn matmul_rejects_mismatched_inner_extents() {
    let mut tape: Tape<f64> = Tape::new();
    let a = tape.input(Tensor::zeros(vec![2, 3]));
    let b = tape.input(Tensor::zeros(vec![4, 2]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn softmax_closed_form_values() {
    let mut tape = Tape::new();
    let c = tape.input(t2(1, 3, &[4.2, 4.2, 4.2]));
    let y = tape.softmax(c, Axis::Rows, 1.0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    // closed form: softmax([1,2]) = [1/(1+e), e/(1+e)]
    let expect1 = 1.0 / (1.0 + 1.0f64.exp());
    let x = tape.input(t2(1, 2, &[1.0, 2.0]));
    let y = tape.softmax(x, Axis::Rows, 1.0).unwrap();
    assert!((tape.value(y).data()[0] - expect1).abs() < 1e-4);
    assert!((tape.value(y).data()[1] - (1.0 - expect1)).abs() < 1e-4);

    let y = tape.softmax(x, Axis::Rows, 0.1).unwrap();
    assert!(tape.value(y).data()[1] > 0.9999);

    assert!(tape.softmax(x, Axis::Rows, 0.0).is_err());
    assert!(tape.softmax(x, Axis::Rows, -1.0).is_err());
}

#[test]
fn layer_norm_hand_cases() {
    let mut tape = Tape::new();
    let gamma = tape.input(t2(1, 2, &[1.0, 1.0]));
    let beta = tape.input(t2(1, 2, &[0.0, 0.0]));

    // constant row: zero-variance numerator -> zeros (eps keeps it finite)
    let c = tape.input(t2(1, 2, &[3.0, 3.0]));
    let y = tape.layer_norm(c, gamma, beta, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // mean 2, population std 1 by hand
    let x = tape.input(t2(1, 2, &[1.0, 3.0]));
    let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
    assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-12);
    assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);

    // gamma = 0 collapses to beta
    let g0 = tape.input(t2(1, 2, &[0.0, 0.0]));
    let b = tape.input(t2(1, 2, &[0.7, 0.7]));
    let y = tape.layer_norm(x, g0, b, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
}

#[test]
fn gelu_values() {
    let mut tape = Tape::new();
    let x = tape.input(t2(1, 3, &[0.0, 1.0, 10.0]));
    let y = tape.gelu(x);
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.0);
    // closed-form tanh approximation at x = 1:
    // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
    let expect = 0.5 * (1.0 + (0.7978845608028654f64 * 1.044715).tanh());
    assert!((d[1] - expect).abs() < 1e-12);
    assert!((d[1] - 0.8412).abs() < 1e-3);
    assert!((d[2] - 10.0).abs() < 1e-6); // saturation
}

#[test]
fn cross_entropy_closed_forms() {
    let mut tape = Tape::new();
    let onehot = t2(1, 3, &[1.0, 0.0, 0.0]);
    let s = tape.input(onehot.clone());
    let l = tape.cross_entropy(&onehot, s).unwrap();
    // -1*ln(1) - 0*ln(clamp(0)): exactly zero
    assert_eq!(tape.value(l).item(), 0.0);

    let half = t2(1, 2, &[0.5, 0.5]);
    let s = tape.input(half.clone());
    let l = tape.cross_entropy(&half, s).unwrap();
    assert!((tape.value(l).item() - 2.0f64.ln()).abs() < 1e-4);

    let p_t = t2(1, 2, &[1.0, 0.0]);
    let s = tape.input(half.clone());
    let l = tape.cross_entropy(&p_t, s).unwrap();
    assert!((tape.value(l).item() - 2.0f64.ln()).abs() < 1e-4);

    // length mismatch rejected
    let s3 = tape.input(t2(1, 3, &[0.2, 0.3, 0.5]));
    assert!(tape.cross_entropy(&half, s3).is_err());

    // non-probability input rejected
    let bad = tape.input(t2(1, 2, &[0.9, 0.9]));
    assert!(tape.cross_entropy(&half, bad).is_err());
}

#[test]
fn cross_entropy_gradient_skips_teacher() {
    // teacher lives outside the tape entirely; the only gradient is the
    // student's, and it matches -t/s / rows.
    let mut tape = Tape::new();
    let teacher = t2(1, 2, &[0.3, 0.7]);
    let s = tape.input(t2(1, 2, &[0.6, 0.4]));
    let l = tape.cross_entropy(&teacher, s).unwrap();
    let grads = tape.backward(l).unwrap();
    let gs = grads.wrt(s).unwrap();
    assert!((gs.data()[0] - (-0.3 / 0.6)).abs() < 1e-12);
    assert!((gs.data()[1] - (-0.7 / 0.4)).abs() < 1e-12);
}

#[test]
fn backward_trivial_identities() {
    // loss = sum(W) -> dW all ones
    let mut tape = Tape::new();
    let w = tape.input(t2(2, 3, &[0.3, -1.0, 2.0, 0.0, 5.0, -2.2]));
    let l = tape.sum(w);
    let grads = tape.backward(l).unwrap();
    assert!(grads.wrt(w).unwrap().data().iter().all(|&g| g == 1.0));

    // loss = sum(W . W) -> dW = 2W
    let mut tape = Tape::new();
    let wt = t2(2, 2, &[0.5, -1.5, 2.0, 0.25]);
    let w = tape.input(wt.clone());
    let sq = tape.mul(w, w).unwrap();
    let l = tape.sum(sq);
    let grads = tape.backward(l).unwrap();
    for (g, x) in grads.wrt(w).unwrap().data().iter().zip(wt.data()) {
        assert_eq!(*g, 2.0 * x);
    }
}

#[test]
fn backward_rejects_bad_loss() {
    let mut tape: Tape<f64> = Tape::new();
    let w = tape.input(t2(2, 2, &[1.0; 4]));
    assert!(tape.backward(w).is_err(), "non-scalar loss rejected");

    // a var minted by a longer tape is not on this one
    let mut long: Tape<f64> = Tape::new();
    let a = long.input(Tensor::scalar(1.0));
    let b = long.input(Tensor::scalar(2.0));
    let c = long.add(a, b).unwrap();
    let foreign = long.sum(c);
    let short: Tape<f64> = Tape::new();
    assert!(short.backward(foreign).is_err());
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = stream(17, &[7]);
    let inputs: Vec<Tensor<f64>> = vec![
        randn(vec![2, 6], 0.8, &mut rng),  // x
        randn(vec![6, 5], 0.8, &mut rng),  // w1
        randn(vec![5], 0.2, &mut rng),     // b1
        randn(vec![5, 4], 0.8, &mut rng),  // w2
        randn(vec![4], 0.2, &mut rng),     // b2
        randn(vec![4], 0.5, &mut rng),     // gamma
        randn(vec![4], 0.5, &mut rng),     // beta
        randn(vec![4, 3], 0.8, &mut rng),  // w3
    ];
    let program = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let h1 = t.matmul(v[0], v[1])?;
        let h1 = t.add_row_bias(h1, v[2])?;
        let h1 = t.gelu(h1);
        let h2 = t.matmul(h1, v[3])?;
        let h2 = t.add_row_bias(h2, v[4])?;
        let h2 = t.layer_norm(h2, v[5], v[6], 1e-6)?;
        let h3 = t.matmul(h2, v[7])?;
        let p = t.softmax(h3, Axis::Rows, 0.5)?;
        let sq = t.mul(p, p)?;
        Ok(t.sum(sq))
    };
    let worst = fd_check(&program, &inputs, None, 1.0).unwrap();
    assert!(
        worst < GRAD_TOL,
        "3-layer composition rel err {worst:.3e} at h = {FD_STEP}"
    );
}

#[test]
fn determinism_bit_identical() {
    let mut rng = stream(23, &[0]);
    let x: Tensor<f64> = randn(vec![4, 8], 1.0, &mut rng);
    let run = |xv: &Tensor<f64>| -> Vec<u64> {
        let mut tape = Tape::new();
        let v = tape.input(xv.clone());
        let s = tape.softmax(v, Axis::Rows, 0.3).unwrap();
        let g = tape.gelu(s);
        let l = tape.sum(g);
        let grads = tape.backward(l).unwrap();
        grads
            .wrt(v)
            .unwrap()
            .data()
            .iter()
            .map(|f| f.to_bits())
            .collect()
    };
    assert_eq!(run(&x), run(&x));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        xs in proptest::collection::vec(-30.0f64..30.0, 2..12),
        shift in -50.0f64..50.0,
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, n], xs.clone()).unwrap());
        let y = tape.softmax(x, Axis::Rows, 1.0).unwrap();
        let sum: f64 = tape.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);

        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let xs_v = tape.input(Tensor::new(vec![1, n], shifted).unwrap());
        let ys = tape.softmax(xs_v, Axis::Rows, 1.0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_temperature_equals_prescaled_logits(
        xs in proptest::collection::vec(-10.0f64..10.0, 2..10),
        temp in 0.05f64..5.0,
    ) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, n], xs.clone()).unwrap());
        let a = tape.softmax(x, Axis::Rows, temp).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|v| v / temp).collect();
        let xs_v = tape.input(Tensor::new(vec![1, n], scaled).unwrap());
        let b = tape.softmax(xs_v, Axis::Rows, 1.0).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn self_cross_entropy_nonnegative_zero_iff_onehot(
        raw in proptest::collection::vec(0.01f64..1.0, 2..8),
        hot in 0usize..8,
    ) {
        let n = raw.len();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let pt = Tensor::new(vec![1, n], p.clone()).unwrap();
        let mut tape = Tape::new();
        let ps = tape.input(pt.clone());
        let l = tape.cross_entropy(&pt, ps).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);

        // one-hot self-entropy is exactly zero
        let mut oh = vec![0.0; n];
        oh[hot % n] = 1.0;
        let oht = Tensor::new(vec![1, n], oh).unwrap();
        let ohs = tape.input(oht.clone());
        let l = tape.cross_entropy(&oht, ohs).unwrap();
        prop_assert_eq!(tape.value(l).item(), 0.0);

        // non-degenerate distributions have strictly positive entropy
        if p.iter().all(|&v| v < 0.999) {
            let mut t = Tape::new();
            let s = t.input(pt.clone());
            let l = t.cross_entropy(&pt, s).unwrap();
            let entropy = t.value(l).item();
            prop_assert!(entropy > 0.0);
        }
    }
}
