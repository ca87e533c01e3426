//! Central finite-difference verification of tape adjoints.
//!
//! Runs in f64 with h = 1e-3; relative error is measured as
//! |analytic - numeric| / max(1, |analytic|, |numeric|).

use rand::Rng;

use super::tape::{Axis, Tape, Var};
use super::{randn, Tensor};
use crate::error::Result;
use crate::rng::stream;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

/// A differentiable scalar program: given leaf vars for `inputs`, build the
/// graph and return the loss var.
pub type Program = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

pub struct CheckReport {
    pub name: &'static str,
    pub worst_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < GRAD_TOL
    }
}

fn eval(program: &Program, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = program(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compare analytic gradients of `program` against central differences.
///
/// `max_coords_per_input` caps how many coordinates are probed per input
/// (evenly strided, deterministic); `None` probes all of them. `tamper`
/// multiplies the analytic gradient before comparison and exists solely as
/// a negative-control hook for the test suite.
pub fn fd_check(
    program: &Program,
    inputs: &[Tensor<f64>],
    max_coords_per_input: Option<usize>,
    tamper: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = program(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[ti]);
        let n = input.numel();
        let stride = match max_coords_per_input {
            Some(cap) if n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut coord = 0;
        while coord < n {
            let orig = work[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + FD_STEP;
            let plus = eval(program, &work)?;
            work[ti].data_mut()[coord] = orig - FD_STEP;
            let minus = eval(program, &work)?;
            work[ti].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.data()[coord] * tamper;
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
            coord += stride;
        }
    }
    Ok(worst)
}

/// Random probability row(s) for cross-entropy fixtures.
fn prob_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let mut sum = 0.0;
        for j in 0..cols {
            let v: f64 = rng.gen_range(0.05..1.0);
            t.data_mut()[i * cols + j] = v;
            sum += v;
        }
        for j in 0..cols {
            t.data_mut()[i * cols + j] /= sum;
        }
    }
    t
}

/// Finite-difference check of every tape primitive, one fixture each.
///
/// `corrupt` names a primitive whose analytic gradient is deliberately
/// scaled by 1.01 before comparison (negative control); pass `None` for the
/// real suite.
pub fn primitive_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckReport>> {
    let mut rng = stream(seed, &[0x6f72_6163]);
    let mut reports = Vec::new();

    let mut run = |name: &'static str,
                   inputs: Vec<Tensor<f64>>,
                   program: Box<Program>|
     -> Result<()> {
        let tamper = if corrupt == Some(name) { 1.01 } else { 1.0 };
        let worst = fd_check(program.as_ref(), &inputs, None, tamper)?;
        reports.push(CheckReport { name, worst_rel_err: worst });
        Ok(())
    };

    let r = &mut rng;

    run(
        "matmul",
        vec![randn(vec![3, 4], 1.0, r), randn(vec![4, 2], 1.0, r)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
    )?;

    run(
        "matmul_nt",
        vec![randn(vec![3, 4], 1.0, r), randn(vec![2, 4], 1.0, r)],
        Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            Ok(t.sum(y))
        }),
    )?;

    run(
        "add",
        vec![randn(vec![2, 3], 1.0, r), randn(vec![2, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            let y2 = t.mul(y, y)?; // quadratic so the adjoint is nontrivial
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "mul",
        vec![randn(vec![2, 3], 1.0, r), randn(vec![2, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
    )?;

    run(
        "scale",
        vec![randn(vec![2, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.scale(v[0], 0.37);
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "add_row_bias",
        vec![randn(vec![3, 4], 1.0, r), randn(vec![4], 1.0, r)],
        Box::new(|t, v| {
            let y = t.add_row_bias(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "gelu",
        vec![randn(vec![2, 5], 1.5, r)],
        Box::new(|t, v| {
            let y = t.gelu(v[0]);
            Ok(t.sum(y))
        }),
    )?;

    run(
        "softmax",
        vec![randn(vec![3, 5], 1.0, r), randn(vec![3, 5], 1.0, r)],
        Box::new(|t, v| {
            let rows = t.softmax(v[0], Axis::Rows, 0.7)?;
            let cols = t.softmax(v[1], Axis::Cols, 1.3)?;
            let wr = t.mul(rows, rows)?;
            let wc = t.mul(cols, cols)?;
            let sr = t.sum(wr);
            let sc = t.sum(wc);
            t.add(sr, sc)
        }),
    )?;

    run(
        "layer_norm",
        vec![
            randn(vec![3, 6], 1.0, r),
            randn(vec![6], 0.5, r),
            randn(vec![6], 0.5, r),
        ],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    let teacher = prob_rows(2, 6, r);
    run(
        "cross_entropy",
        vec![randn(vec![2, 6], 1.0, r)],
        Box::new(move |t, v| {
            let probs = t.softmax(v[0], Axis::Rows, 0.8)?;
            t.ce_rows_mean(teacher.clone(), probs)
        }),
    )?;

    run(
        "sum",
        vec![randn(vec![2, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        }),
    )?;

    run(
        "gather_rows",
        vec![randn(vec![4, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?; // repeated index: grads accumulate
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "concat_rows",
        vec![randn(vec![2, 3], 1.0, r), randn(vec![3, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.concat_rows(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "slice_rows",
        vec![randn(vec![4, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.slice_rows(v[0], 1, 2)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "slice_cols",
        vec![randn(vec![3, 5], 1.0, r)],
        Box::new(|t, v| {
            let y = t.slice_cols(v[0], 1, 3)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "concat_cols",
        vec![randn(vec![3, 2], 1.0, r), randn(vec![3, 4], 1.0, r)],
        Box::new(|t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "replace_rows",
        vec![randn(vec![4, 3], 1.0, r), randn(vec![1, 3], 1.0, r)],
        Box::new(|t, v| {
            let y = t.replace_rows(v[0], v[1], &[0, 1, 0, 1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    run(
        "attn_mask",
        vec![randn(vec![4, 4], 1.0, r)],
        Box::new(|t, v| {
            let m = t.attn_mask(v[0], Some(&[1, 0, 1]), false)?;
            let y = t.softmax(m, Axis::Rows, 1.0)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
    )?;

    Ok(reports)
}
