//! Wengert tape: operations record themselves during the forward pass and
//! replay adjoints in exact reverse order on [`Tape::backward`].
//!
//! A tape is owned by exactly one training step. Teacher activations are
//! computed on a throwaway tape (or fed in as constants), so no gradient
//! ever reaches teacher parameters.

use super::{mm_nn, mm_nt, mm_tn, Scalar, Tensor};
use crate::error::{OdisError, Result};

/// Additive logit value standing in for negative infinity. Large enough
/// that `exp` underflows to exactly 0.0 in both precisions.
pub const MASK_NEG: f64 = -1e9;

/// Floor applied to probabilities before `ln`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Softmax normalization axis for rank-2 operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Op<E: Scalar> {
    Leaf,
    /// a[m x k] * b[k x n]
    Matmul { a: Var, b: Var },
    /// a[m x k] * b[n x k]^T
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: E },
    /// bias (length = cols) added to every row of a
    AddRowBias { a: Var, bias: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: Axis, temp: E },
    LayerNorm { a: Var, gamma: Var, beta: Var, eps: E },
    /// Mean over rows of -sum_j t[i,j] * ln(max(s[i,j], LOG_FLOOR)).
    /// The teacher side is a constant: no gradient flows to it.
    CeRowsMean { teacher: Tensor<E>, s: Var },
    Sum { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    SliceRows { a: Var, start: usize, len: usize },
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// Rows where mask = 1 replaced by the (single-row) `row` operand.
    ReplaceRows { a: Var, row: Var, mask: Vec<u8> },
    /// Attention-logit masking over a square score matrix for the token
    /// sequence [token0, patch_1..patch_HW]. Token 0 is a read-only
    /// pooling token: its key column is always removed for patch query
    /// rows. When `allow` is present, token 0's own query row is further
    /// restricted to the allowed patches (and optionally loses its self
    /// logit). Untouched entries are copied bit-for-bit.
    AttnMask { a: Var, allow: Option<Vec<u8>>, mask_self: bool },
}

impl<E: Scalar> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CeRowsMean { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::AttnMask { .. } => "attn_mask",
        }
    }
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf (input, parameter, or constant).
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    // -- primitive operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(OdisError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], mm_nn(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// a * b^T with both operands stored row-major.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(OdisError::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::new(vec![m, n], mm_nt(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(OdisError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(OdisError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        if tb.numel() != cols {
            return Err(OdisError::ShapeMismatch {
                op: "add_row_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        let mut data = ta.data().to_vec();
        for i in 0..rows {
            for (d, &b) in data[i * cols..(i + 1) * cols].iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias { a, bias }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_tanh);
        self.push(out, Op::Gelu { a })
    }

    /// Temperature softmax along `axis`, stabilized by max subtraction:
    /// exp((x - max) / temp) renormalized per slice.
    pub fn softmax(&mut self, a: Var, axis: Axis, temp: E) -> Result<Var> {
        // negated form so a NaN temperature is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(temp > E::ZERO) {
            return Err(OdisError::invalid(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        let ta = self.value(a);
        let mut out = ta.clone();
        for_each_slice_mut(&mut out, axis, |slice| softmax_slice(slice, temp));
        Ok(self.push(out, Op::Softmax { a, axis, temp }))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let (ta, tg, tb) = (self.value(a), self.value(gamma), self.value(beta));
        let cols = ta.cols();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(OdisError::ShapeMismatch {
                op: "layer_norm",
                lhs: ta.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        let mut data = vec![E::ZERO; ta.numel()];
        for i in 0..rows {
            let x = &ta.data()[i * cols..(i + 1) * cols];
            let y = &mut data[i * cols..(i + 1) * cols];
            let (mean, inv_std) = row_moments(x, eps);
            for j in 0..cols {
                y[j] = (x[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Cross-entropy -sum t*ln(s) between probability vectors, teacher
    /// constant. Gradient flows only through the student operand.
    pub fn cross_entropy(&mut self, teacher: &Tensor<E>, student: Var) -> Result<Var> {
        let ts = self.value(student);
        if teacher.shape() != ts.shape() {
            return Err(OdisError::ShapeMismatch {
                op: "cross_entropy",
                lhs: teacher.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        validate_prob_rows(teacher, "teacher")?;
        validate_prob_rows(ts, "student")?;
        self.ce_rows_mean_unchecked(teacher.clone(), student)
    }

    /// Row-mean cross-entropy used by the losses; shape-checked only
    /// (the heads already emit normalized rows).
    pub fn ce_rows_mean(&mut self, teacher: Tensor<E>, student: Var) -> Result<Var> {
        let ts = self.value(student);
        if teacher.rows() != ts.rows() || teacher.cols() != ts.cols() {
            return Err(OdisError::ShapeMismatch {
                op: "cross_entropy",
                lhs: teacher.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        self.ce_rows_mean_unchecked(teacher, student)
    }

    fn ce_rows_mean_unchecked(&mut self, teacher: Tensor<E>, student: Var) -> Result<Var> {
        let ts = self.value(student);
        let rows = teacher.rows();
        let floor = E::from_f64(LOG_FLOOR);
        let mut total = E::ZERO;
        for (&t, &s) in teacher.data().iter().zip(ts.data()) {
            total += -(t * s.maxv(floor).ln());
        }
        let mean = total / E::from_f64(rows as f64);
        let out = Tensor::scalar(mean);
        Ok(self.push(out, Op::CeRowsMean { teacher, s: student }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = E::ZERO;
        for &x in self.value(a).data() {
            total += x;
        }
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if idx.iter().any(|&i| i >= rows) {
            return Err(OdisError::invalid(format!(
                "gather_rows index out of range (rows = {rows})"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(OdisError::ShapeMismatch {
                op: "concat_rows",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let out = Tensor::new(vec![ta.rows() + tb.rows(), ta.cols()], data)?;
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if start + len > rows || len == 0 {
            return Err(OdisError::invalid(format!(
                "slice_rows {start}..{} out of range (rows = {rows})",
                start + len
            )));
        }
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(out, Op::SliceRows { a, start, len }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if start + len > cols || len == 0 {
            return Err(OdisError::invalid(format!(
                "slice_cols {start}..{} out of range (cols = {cols})",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { a, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(OdisError::invalid("concat_cols needs at least one part"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(OdisError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Replace rows flagged by `mask` with the single-row `row` operand.
    pub fn replace_rows(&mut self, a: Var, row: Var, mask: &[u8]) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (rows, cols) = (ta.rows(), ta.cols());
        if mask.len() != rows || tr.numel() != cols {
            return Err(OdisError::ShapeMismatch {
                op: "replace_rows",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m != 0 {
                data[i * cols..(i + 1) * cols].copy_from_slice(tr.data());
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ReplaceRows { a, row, mask: mask.to_vec() }))
    }

    /// Attention masking for a square logit matrix over the sequence
    /// [token0, patch_1..patch_HW]. Always removes token 0's key column
    /// from every patch query row (the pooling token is read-only). When
    /// `allow` is supplied, row 0's logit at key column j+1 is set to
    /// MASK_NEG wherever allow[j] = 0; column 0 (self-attention) stays
    /// allowed unless `mask_self` is set.
    pub fn attn_mask(&mut self, a: Var, allow: Option<&[u8]>, mask_self: bool) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if rows != cols || cols < 2 {
            return Err(OdisError::ShapeMismatch {
                op: "attn_mask",
                lhs: ta.shape().to_vec(),
                rhs: vec![rows, rows],
            });
        }
        let neg = E::from_f64(MASK_NEG);
        let mut data = ta.data().to_vec();
        for i in 1..rows {
            data[i * cols] = neg;
        }
        if let Some(allow) = allow {
            if allow.len() != cols - 1 {
                return Err(OdisError::ShapeMismatch {
                    op: "attn_mask",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![allow.len()],
                });
            }
            if allow.iter().all(|&m| m == 0) {
                return Err(OdisError::invalid(
                    "object attention mask has no allowed patches",
                ));
            }
            if mask_self {
                data[0] = neg;
            }
            for (j, &m) in allow.iter().enumerate() {
                if m == 0 {
                    data[j + 1] = neg;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::AttnMask { a, allow: allow.map(|m| m.to_vec()), mask_self },
        ))
    }

    // -- reverse pass ---------------------------------------------------------

    /// Replay adjoints from `loss` back to every contributing leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if loss.0 >= self.nodes.len() {
            return Err(OdisError::invalid("loss is not on this tape"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(OdisError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::ONE));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                let da = mm_nt(g.data(), tb.data(), m, n, k);
                let db = mm_tn(ta.data(), g.data(), k, m, n);
                acc(grads, *a, ta.shape(), da);
                acc(grads, *b, tb.shape(), db);
            }
            Op::MatmulNT { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                let da = mm_nn(g.data(), tb.data(), m, n, k);
                let db = mm_tn(g.data(), ta.data(), n, m, k);
                acc(grads, *a, ta.shape(), da);
                acc(grads, *b, tb.shape(), db);
            }
            Op::Add { a, b } => {
                acc(grads, *a, val(*a).shape(), g.data().to_vec());
                acc(grads, *b, val(*b).shape(), g.data().to_vec());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let da: Vec<E> = g.data().iter().zip(tb.data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<E> = g.data().iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                acc(grads, *a, ta.shape(), da);
                acc(grads, *b, tb.shape(), db);
            }
            Op::Scale { a, c } => {
                let da: Vec<E> = g.data().iter().map(|&g| g * *c).collect();
                acc(grads, *a, val(*a).shape(), da);
            }
            Op::AddRowBias { a, bias } => {
                let cols = val(*bias).numel();
                let rows = val(*a).rows();
                acc(grads, *a, val(*a).shape(), g.data().to_vec());
                let mut db = vec![E::ZERO; cols];
                for i in 0..rows {
                    for (d, &gv) in db.iter_mut().zip(&g.data()[i * cols..(i + 1) * cols]) {
                        *d += gv;
                    }
                }
                acc(grads, *bias, val(*bias).shape(), db);
            }
            Op::Gelu { a } => {
                let ta = val(*a);
                let da: Vec<E> = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * gelu_tanh_deriv(x))
                    .collect();
                acc(grads, *a, ta.shape(), da);
            }
            Op::Softmax { a, axis, temp } => {
                let y = &self.nodes[node].value;
                let mut da = vec![E::ZERO; y.numel()];
                softmax_adjoint(y, g, *axis, *temp, &mut da);
                acc(grads, *a, val(*a).shape(), da);
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let (ta, tg) = (val(*a), val(*gamma));
                let (rows, cols) = (ta.rows(), ta.cols());
                let mut da = vec![E::ZERO; ta.numel()];
                let mut dgamma = vec![E::ZERO; cols];
                let mut dbeta = vec![E::ZERO; cols];
                let ncols = E::from_f64(cols as f64);
                for i in 0..rows {
                    let x = &ta.data()[i * cols..(i + 1) * cols];
                    let go = &g.data()[i * cols..(i + 1) * cols];
                    let (mean, inv_std) = row_moments(x, *eps);
                    // xhat and the two row means the adjoint needs
                    let mut mean_dxhat = E::ZERO;
                    let mut mean_dxhat_xhat = E::ZERO;
                    for j in 0..cols {
                        let xhat = (x[j] - mean) * inv_std;
                        let dxhat = go[j] * tg.data()[j];
                        dgamma[j] += go[j] * xhat;
                        dbeta[j] += go[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat = mean_dxhat / ncols;
                    mean_dxhat_xhat = mean_dxhat_xhat / ncols;
                    let dst = &mut da[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        let xhat = (x[j] - mean) * inv_std;
                        let dxhat = go[j] * tg.data()[j];
                        dst[j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                    }
                }
                acc(grads, *a, ta.shape(), da);
                acc(grads, *gamma, val(*gamma).shape(), dgamma);
                acc(grads, *beta, val(*beta).shape(), dbeta);
            }
            Op::CeRowsMean { teacher, s } => {
                let ts = val(*s);
                let rows = teacher.rows();
                let gs = g.item() / E::from_f64(rows as f64);
                let floor = E::from_f64(LOG_FLOOR);
                let ds: Vec<E> = teacher
                    .data()
                    .iter()
                    .zip(ts.data())
                    .map(|(&t, &sv)| {
                        if sv > floor {
                            -(t / sv) * gs
                        } else {
                            E::ZERO // clamped region: d ln(max(s, floor))/ds = 0
                        }
                    })
                    .collect();
                acc(grads, *s, ts.shape(), ds);
            }
            Op::Sum { a } => {
                let ta = val(*a);
                let da = vec![g.item(); ta.numel()];
                acc(grads, *a, ta.shape(), da);
            }
            Op::GatherRows { a, idx } => {
                let ta = val(*a);
                let cols = ta.cols();
                let mut da = vec![E::ZERO; ta.numel()];
                for (out_i, &src_i) in idx.iter().enumerate() {
                    for (d, &gv) in da[src_i * cols..(src_i + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[out_i * cols..(out_i + 1) * cols])
                    {
                        *d += gv;
                    }
                }
                acc(grads, *a, ta.shape(), da);
            }
            Op::ConcatRows { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let split = ta.numel();
                acc(grads, *a, ta.shape(), g.data()[..split].to_vec());
                acc(grads, *b, tb.shape(), g.data()[split..].to_vec());
            }
            Op::SliceRows { a, start, len } => {
                let ta = val(*a);
                let cols = ta.cols();
                let mut da = vec![E::ZERO; ta.numel()];
                da[start * cols..(start + len) * cols].copy_from_slice(g.data());
                acc(grads, *a, ta.shape(), da);
            }
            Op::SliceCols { a, start, len } => {
                let ta = val(*a);
                let (rows, cols) = (ta.rows(), ta.cols());
                let mut da = vec![E::ZERO; ta.numel()];
                for i in 0..rows {
                    da[i * cols + start..i * cols + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                acc(grads, *a, ta.shape(), da);
            }
            Op::ConcatCols { parts } => {
                let rows = val(parts[0]).rows();
                let total_cols: usize = parts.iter().map(|&p| val(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let pc = tp.cols();
                    let mut dp = vec![E::ZERO; tp.numel()];
                    for i in 0..rows {
                        dp[i * pc..(i + 1) * pc].copy_from_slice(
                            &g.data()[i * total_cols + offset..i * total_cols + offset + pc],
                        );
                    }
                    acc(grads, p, tp.shape(), dp);
                    offset += pc;
                }
            }
            Op::ReplaceRows { a, row, mask } => {
                let (ta, tr) = (val(*a), val(*row));
                let cols = ta.cols();
                let mut da = vec![E::ZERO; ta.numel()];
                let mut drow = vec![E::ZERO; cols];
                for (i, &m) in mask.iter().enumerate() {
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    if m == 0 {
                        da[i * cols..(i + 1) * cols].copy_from_slice(gr);
                    } else {
                        for (d, &gv) in drow.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                acc(grads, *a, ta.shape(), da);
                acc(grads, *row, tr.shape(), drow);
            }
            Op::AttnMask { a, allow, mask_self } => {
                let ta = val(*a);
                let cols = ta.cols();
                let mut da = g.data().to_vec();
                for i in 1..ta.rows() {
                    da[i * cols] = E::ZERO;
                }
                if let Some(allow) = allow {
                    if *mask_self {
                        da[0] = E::ZERO;
                    }
                    for (j, &m) in allow.iter().enumerate() {
                        if m == 0 {
                            da[j + 1] = E::ZERO;
                        }
                    }
                }
                acc(grads, *a, ta.shape(), da);
            }
        }
    }

    /// Operation name of a node (grad-check reporting).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn acc<E: Scalar>(grads: &mut [Option<Tensor<E>>], v: Var, shape: &[usize], delta: Vec<E>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (d, x) in t.data_mut().iter_mut().zip(delta) {
                *d += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("adjoint shape"));
        }
    }
}

/// Gradient set produced by [`Tape::backward`].
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a var, zeros if it did not participate in the loss.
    pub fn get_or_zeros(&self, tape: &Tape<E>, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

// ---------------------------------------------------------------------------

pub(crate) fn gelu_tanh<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::ONE + u.tanh())
}

pub(crate) fn gelu_tanh_deriv<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.7978845608028654);
    let k = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * k * x * x)
}

fn softmax_slice<E: Scalar>(x: &mut [E], temp: E) {
    let mut max = x[0];
    for &v in x.iter() {
        max = max.maxv(v);
    }
    let mut sum = E::ZERO;
    for v in x.iter_mut() {
        *v = ((*v - max) / temp).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

fn for_each_slice_mut<E: Scalar>(t: &mut Tensor<E>, axis: Axis, f: impl Fn(&mut [E])) {
    let (rows, cols) = (t.rows(), t.cols());
    match axis {
        Axis::Rows => {
            for i in 0..rows {
                f(&mut t.data_mut()[i * cols..(i + 1) * cols]);
            }
        }
        Axis::Cols => {
            let mut col = vec![E::ZERO; rows];
            for j in 0..cols {
                for i in 0..rows {
                    col[i] = t.data()[i * cols + j];
                }
                f(&mut col);
                for i in 0..rows {
                    t.data_mut()[i * cols + j] = col[i];
                }
            }
        }
    }
}

fn softmax_adjoint<E: Scalar>(y: &Tensor<E>, g: &Tensor<E>, axis: Axis, temp: E, da: &mut [E]) {
    let (rows, cols) = (y.rows(), y.cols());
    let slice_adj = |yv: &[E], gv: &[E], out: &mut [E]| {
        let mut dot = E::ZERO;
        for (&yj, &gj) in yv.iter().zip(gv) {
            dot += yj * gj;
        }
        for ((o, &yj), &gj) in out.iter_mut().zip(yv).zip(gv) {
            *o = (gj - dot) * yj / temp;
        }
    };
    match axis {
        Axis::Rows => {
            for i in 0..rows {
                slice_adj(
                    &y.data()[i * cols..(i + 1) * cols],
                    &g.data()[i * cols..(i + 1) * cols],
                    &mut da[i * cols..(i + 1) * cols],
                );
            }
        }
        Axis::Cols => {
            let mut yc = vec![E::ZERO; rows];
            let mut gc = vec![E::ZERO; rows];
            let mut oc = vec![E::ZERO; rows];
            for j in 0..cols {
                for i in 0..rows {
                    yc[i] = y.data()[i * cols + j];
                    gc[i] = g.data()[i * cols + j];
                }
                slice_adj(&yc, &gc, &mut oc);
                for i in 0..rows {
                    da[i * cols + j] = oc[i];
                }
            }
        }
    }
}

fn row_moments<E: Scalar>(x: &[E], eps: E) -> (E, E) {
    let n = E::from_f64(x.len() as f64);
    let mut mean = E::ZERO;
    for &v in x {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::ZERO;
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, E::ONE / (var + eps).sqrt())
}

fn validate_prob_rows<E: Scalar>(t: &Tensor<E>, side: &str) -> Result<()> {
    let (rows, cols) = (t.rows(), t.cols());
    let tol = E::from_f64(1e-5);
    let neg_tol = E::from_f64(-1e-9);
    for i in 0..rows {
        let mut sum = E::ZERO;
        for &v in &t.data()[i * cols..(i + 1) * cols] {
            if v < neg_tol {
                return Err(OdisError::invalid(format!(
                    "{side} probability vector has negative entry {v}"
                )));
            }
            sum += v;
        }
        if (sum - E::ONE).abs() > tol {
            return Err(OdisError::invalid(format!(
                "{side} probability vector sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}
