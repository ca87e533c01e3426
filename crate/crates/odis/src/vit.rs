//! Micro vision transformer with an object-level pooling token.
//!
//! Token 0 of every sequence is the object token, a read-only pooling
//! token: patch queries never attend to its key, so the patch pathway is
//! completely independent of how the pooling token is masked. When an
//! object attention mask is supplied, token 0's query row is restricted
//! at every layer to the patches covered by the mask (plus itself); the
//! patch tokens keep full self-attention over all patches.

pub mod checkpoint;

use rand::Rng;
use std::collections::BTreeMap;

use crate::error::{OdisError, Result};
use crate::tensor::tape::{Axis, Tape, Var};
use crate::tensor::{randn, Scalar, Tensor};

/// Architecture and head hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub head_output_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_side: 32,
            patch_size: 4,
            channels: 3,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            head_hidden_dim: 128,
            head_output_dim: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 {
            return Err(OdisError::config("image side and patch size must be positive"));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return Err(OdisError::config(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(OdisError::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.student_temp > self.teacher_temp && self.teacher_temp > 0.0) {
            return Err(OdisError::config(format!(
                "temperatures must satisfy student {} > teacher {} > 0",
                self.student_temp, self.teacher_temp
            )));
        }
        Ok(())
    }

    /// Patches per side at the training resolution.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        let g = self.grid();
        g * g
    }

    pub fn grid_for_side(&self, side: usize) -> Result<usize> {
        if !side.is_multiple_of(self.patch_size) {
            return Err(OdisError::invalid(format!(
                "view side {side} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(side / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// Whether the optimizer applies weight decay (projection matrices
    /// only; biases, norms, tokens, and positions are exempt).
    pub decay: bool,
}

/// All parameters of one network, in a stable order shared by student and
/// teacher.
#[derive(Clone, Debug)]
pub struct ModelParams<E: Scalar> {
    params: Vec<Param<E>>,
    by_name: BTreeMap<String, usize>,
}

impl<E: Scalar> ModelParams<E> {
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let hw = cfg.tokens();
        let std = 0.02;

        let mut p = ModelParams { params: Vec::new(), by_name: BTreeMap::new() };

        p.push("embed/w".into(), randn(vec![cfg.patch_dim(), d], std, rng), true);
        p.push("embed/b".into(), Tensor::zeros(vec![d]), false);
        p.push("pos".into(), randn(vec![hw, d], std, rng), false);
        p.push("obj_token".into(), randn(vec![1, d], std, rng), false);
        p.push("patch_token".into(), randn(vec![1, d], std, rng), false);
        for i in 0..cfg.depth {
            for proj in ["wq", "wk", "wv", "wo"] {
                p.push(format!("layer{i}/attn/{proj}"), randn(vec![d, d], std, rng), true);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                p.push(format!("layer{i}/attn/{bias}"), Tensor::zeros(vec![d]), false);
            }
            p.push(format!("layer{i}/norm1/g"), Tensor::full(vec![d], E::ONE), false);
            p.push(format!("layer{i}/norm1/b"), Tensor::zeros(vec![d]), false);
            let hidden = d * cfg.mlp_ratio;
            p.push(format!("layer{i}/mlp/w1"), randn(vec![d, hidden], std, rng), true);
            p.push(format!("layer{i}/mlp/b1"), Tensor::zeros(vec![hidden]), false);
            p.push(format!("layer{i}/mlp/w2"), randn(vec![hidden, d], std, rng), true);
            p.push(format!("layer{i}/mlp/b2"), Tensor::zeros(vec![d]), false);
            p.push(format!("layer{i}/norm2/g"), Tensor::full(vec![d], E::ONE), false);
            p.push(format!("layer{i}/norm2/b"), Tensor::zeros(vec![d]), false);
        }
        p.push("final_norm/g".into(), Tensor::full(vec![d], E::ONE), false);
        p.push("final_norm/b".into(), Tensor::zeros(vec![d]), false);

        let hh = cfg.head_hidden_dim;
        let k = cfg.head_output_dim;
        p.push("head/w1".into(), randn(vec![d, hh], std, rng), true);
        p.push("head/b1".into(), Tensor::zeros(vec![hh]), false);
        p.push("head/w2".into(), randn(vec![hh, hh], std, rng), true);
        p.push("head/b2".into(), Tensor::zeros(vec![hh]), false);
        p.push("head/w3".into(), randn(vec![hh, k], std, rng), true);
        p.push("head/b3".into(), Tensor::zeros(vec![k]), false);

        Ok(p)
    }

    fn push(&mut self, name: String, value: Tensor<E>, decay: bool) {
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
    }

    /// Rebuild from (name, tensor, decay) records, e.g. a checkpoint.
    pub fn from_records(records: Vec<(String, Tensor<E>, bool)>) -> Self {
        let mut p = ModelParams { params: Vec::new(), by_name: BTreeMap::new() };
        for (name, value, decay) in records {
            p.push(name, value, decay);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.by_name.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.by_name.get(name).copied().map(move |i| &mut self.params[i].value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn at(&self, i: usize) -> &Param<E> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<E> {
        &mut self.params[i]
    }

    /// Verify the name/shape pairing against another parameter set.
    pub fn same_structure(&self, other: &ModelParams<E>) -> Result<()> {
        if self.len() != other.len() {
            return Err(OdisError::invalid(format!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(OdisError::invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<F: Scalar>(&self) -> ModelParams<F> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Register every parameter as a tape leaf, preserving order.
    pub fn register(&self, tape: &mut Tape<E>) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|p| tape.input(p.value.clone())).collect(),
        }
    }
}

/// Tape handles for a registered parameter set, index-aligned with
/// [`ModelParams`].
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wrap existing tape vars (one per parameter, in parameter order).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Resolved parameter indices so the forward pass never does name lookups.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    embed_w: usize,
    embed_b: usize,
    pos: usize,
    obj_token: usize,
    patch_token: usize,
    layers: Vec<LayerLayout>,
    final_norm_g: usize,
    final_norm_b: usize,
    head_w: [usize; 3],
    head_b: [usize; 3],
}

#[derive(Clone, Debug)]
struct LayerLayout {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bq: usize,
    bk: usize,
    bv: usize,
    bo: usize,
    norm1_g: usize,
    norm1_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
    norm2_g: usize,
    norm2_b: usize,
}

impl ParamLayout {
    pub fn resolve<E: Scalar>(params: &ModelParams<E>, cfg: &ViTConfig) -> Result<Self> {
        let find = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| OdisError::invalid(format!("missing parameter {name}")))
        };
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            layers.push(LayerLayout {
                wq: find(&format!("layer{i}/attn/wq"))?,
                wk: find(&format!("layer{i}/attn/wk"))?,
                wv: find(&format!("layer{i}/attn/wv"))?,
                wo: find(&format!("layer{i}/attn/wo"))?,
                bq: find(&format!("layer{i}/attn/bq"))?,
                bk: find(&format!("layer{i}/attn/bk"))?,
                bv: find(&format!("layer{i}/attn/bv"))?,
                bo: find(&format!("layer{i}/attn/bo"))?,
                norm1_g: find(&format!("layer{i}/norm1/g"))?,
                norm1_b: find(&format!("layer{i}/norm1/b"))?,
                mlp_w1: find(&format!("layer{i}/mlp/w1"))?,
                mlp_b1: find(&format!("layer{i}/mlp/b1"))?,
                mlp_w2: find(&format!("layer{i}/mlp/w2"))?,
                mlp_b2: find(&format!("layer{i}/mlp/b2"))?,
                norm2_g: find(&format!("layer{i}/norm2/g"))?,
                norm2_b: find(&format!("layer{i}/norm2/b"))?,
            });
        }
        Ok(ParamLayout {
            embed_w: find("embed/w")?,
            embed_b: find("embed/b")?,
            pos: find("pos")?,
            obj_token: find("obj_token")?,
            patch_token: find("patch_token")?,
            layers,
            final_norm_g: find("final_norm/g")?,
            final_norm_b: find("final_norm/b")?,
            head_w: [find("head/w1")?, find("head/w2")?, find("head/w3")?],
            head_b: [find("head/b1")?, find("head/b2")?, find("head/b3")?],
        })
    }
}

/// Token sequence on the tape plus its optional object attention mask.
pub struct TokenSequence {
    pub tokens: Var,
    pub obj_attn_mask: Option<Vec<u8>>,
}

impl TokenSequence {
    pub fn new(tokens: Var, obj_attn_mask: Option<Vec<u8>>, hw: usize) -> Result<Self> {
        if let Some(m) = &obj_attn_mask {
            if m.len() != hw {
                return Err(OdisError::invalid(format!(
                    "object mask has {} entries for {hw} patches",
                    m.len()
                )));
            }
            if m.iter().all(|&v| v == 0) {
                return Err(OdisError::invalid(
                    "object attention mask has no allowed patches",
                ));
            }
        }
        Ok(TokenSequence { tokens, obj_attn_mask })
    }
}

/// Flatten a [C, S, S] image into row-major patch rows [HW, C*p*p].
pub fn patchify<E: Scalar>(image: &Tensor<E>, patch: usize) -> Result<Tensor<E>> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(OdisError::invalid(format!(
            "patchify expects [C, S, S], got {shape:?}"
        )));
    }
    let (c, s) = (shape[0], shape[1]);
    if shape[2] != s {
        return Err(OdisError::invalid("patchify expects a square image"));
    }
    if s % patch != 0 {
        return Err(OdisError::invalid(format!(
            "image side {s} not divisible by patch size {patch}"
        )));
    }
    let g = s / patch;
    let row_dim = c * patch * patch;
    let mut data = Vec::with_capacity(g * g * row_dim);
    for py in 0..g {
        for px in 0..g {
            for ch in 0..c {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let base = ch * s * s + y * s + px * patch;
                    data.extend_from_slice(&image.data()[base..base + patch]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, row_dim], data)
}

/// Bilinear resampling matrix from the global positional grid to a smaller
/// view grid (rows are convex weights, so the map is exactly linear and
/// differentiates through to the learned positions).
pub fn pos_interp_matrix<E: Scalar>(from_grid: usize, to_grid: usize) -> Tensor<E> {
    let n_from = from_grid * from_grid;
    let mut m = Tensor::zeros(vec![to_grid * to_grid, n_from]);
    let scale = from_grid as f64 / to_grid as f64;
    for ty in 0..to_grid {
        for tx in 0..to_grid {
            let sy = ((ty as f64 + 0.5) * scale - 0.5).clamp(0.0, (from_grid - 1) as f64);
            let sx = ((tx as f64 + 0.5) * scale - 0.5).clamp(0.0, (from_grid - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(from_grid - 1);
            let x1 = (x0 + 1).min(from_grid - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let row = ty * to_grid + tx;
            for (gy, gx, w) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if w != 0.0 {
                    let cell = &mut m.data_mut()[row * n_from + gy * from_grid + gx];
                    *cell += E::from_f64(w);
                }
            }
        }
    }
    m
}

/// Replace embedded patch rows selected by `m` with the learned patch
/// token (masked image modeling input corruption).
pub fn mask_patch_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    embedded: Var,
    m: &[u8],
    patch_token: Var,
) -> Result<Var> {
    tape.replace_rows(embedded, patch_token, m)
}

/// Linear patch embedding + optional block masking + positional encoding,
/// with the object token prepended (token 0 carries no positional term).
pub fn embed<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    patches: Tensor<E>,
    block_mask: Option<&[u8]>,
    view_side: usize,
) -> Result<Var> {
    let grid = cfg.grid_for_side(view_side)?;
    let hw = grid * grid;
    if patches.rows() != hw || patches.cols() != cfg.patch_dim() {
        return Err(OdisError::ShapeMismatch {
            op: "embed",
            lhs: patches.shape().to_vec(),
            rhs: vec![hw, cfg.patch_dim()],
        });
    }
    let v = pv.all();
    let x = tape.input(patches);
    let proj = tape.matmul(x, v[layout.embed_w])?;
    let mut tokens = tape.add_row_bias(proj, v[layout.embed_b])?;
    if let Some(m) = block_mask {
        if m.len() != hw {
            return Err(OdisError::invalid(format!(
                "block mask has {} entries for {hw} patches",
                m.len()
            )));
        }
        tokens = mask_patch_tokens(tape, tokens, m, v[layout.patch_token])?;
    }
    let pos = if grid == cfg.grid() {
        v[layout.pos]
    } else {
        let interp = tape.input(pos_interp_matrix::<E>(cfg.grid(), grid));
        tape.matmul(interp, v[layout.pos])?
    };
    let with_pos = tape.add(tokens, pos)?;
    tape.concat_rows(v[layout.obj_token], with_pos)
}

/// Attention matrices recorded during a forward pass, one var per
/// (layer, head), each a row-softmax over the full token sequence.
pub struct AttnTrace {
    pub per_layer_head: Vec<Var>,
}

/// Multi-head self-attention with the token-0 query row restricted to the
/// allowed patches. `mask_self` additionally removes token 0's
/// self-attention logit; it exists for tests that need the single-key
/// collapse case and is never set during training.
pub fn masked_mha<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layer: usize,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    seq: &TokenSequence,
    mask_self: bool,
) -> Result<(Var, Vec<Var>)> {
    let v = pv.all();
    let l = &layout.layers[layer];
    let dh = cfg.embed_dim / cfg.heads;
    let x = seq.tokens;

    let q = tape.matmul(x, v[l.wq])?;
    let q = tape.add_row_bias(q, v[l.bq])?;
    let k = tape.matmul(x, v[l.wk])?;
    let k = tape.add_row_bias(k, v[l.bk])?;
    let val = tape.matmul(x, v[l.wv])?;
    let val = tape.add_row_bias(val, v[l.bv])?;

    let temp = E::from_f64((dh as f64).sqrt());
    let mut ctx_parts = Vec::with_capacity(cfg.heads);
    let mut attns = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(val, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.attn_mask(scores, seq.obj_attn_mask.as_deref(), mask_self)?;
        let attn = tape.softmax(scores, Axis::Rows, temp)?;
        attns.push(attn);
        ctx_parts.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_parts)?;
    let out = tape.matmul(ctx, v[l.wo])?;
    let out = tape.add_row_bias(out, v[l.bo])?;
    Ok((out, attns))
}

/// Forward through the full stack: depth x (masked attention, residual,
/// norm, MLP, residual, norm), then a final norm. The same object mask
/// is applied at every layer. Returns the object token, the patch
/// tokens, and the recorded attention matrices.
pub fn backbone_forward<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    seq: TokenSequence,
    mask_self: bool,
) -> Result<(Var, Var, AttnTrace)> {
    let v = pv.all();
    let eps = E::from_f64(1e-6);
    let total = tape.value(seq.tokens).rows();
    let hw = total - 1;
    let mut x = seq.tokens;
    let mut trace = AttnTrace { per_layer_head: Vec::new() };

    for i in 0..cfg.depth {
        let layer_seq = TokenSequence {
            tokens: x,
            obj_attn_mask: seq.obj_attn_mask.clone(),
        };
        let (a, attns) = masked_mha(tape, pv, i, layout, cfg, &layer_seq, mask_self)?;
        trace.per_layer_head.extend(attns);
        let l = &layout.layers[i];
        let res = tape.add(x, a)?;
        let normed = tape.layer_norm(res, v[l.norm1_g], v[l.norm1_b], eps)?;

        let h = tape.matmul(normed, v[l.mlp_w1])?;
        let h = tape.add_row_bias(h, v[l.mlp_b1])?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, v[l.mlp_w2])?;
        let h = tape.add_row_bias(h, v[l.mlp_b2])?;
        let res2 = tape.add(normed, h)?;
        x = tape.layer_norm(res2, v[l.norm2_g], v[l.norm2_b], eps)?;
    }
    let x = tape.layer_norm(x, v[layout.final_norm_g], v[layout.final_norm_b], eps)?;
    let z_obj = tape.slice_rows(x, 0, 1)?;
    let z_patches = tape.slice_rows(x, 1, hw)?;
    Ok((z_obj, z_patches, trace))
}

/// Shared projection head: three-layer MLP to K logits, temperature
/// softmax. The teacher path subtracts its running center from the logits
/// first; the student path passes `None`.
pub fn head_forward<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layout: &ParamLayout,
    z: Var,
    temperature: E,
    center: Option<&Tensor<E>>,
) -> Result<(Var, Var)> {
    let v = pv.all();
    let h = tape.matmul(z, v[layout.head_w[0]])?;
    let h = tape.add_row_bias(h, v[layout.head_b[0]])?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, v[layout.head_w[1]])?;
    let h = tape.add_row_bias(h, v[layout.head_b[1]])?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, v[layout.head_w[2]])?;
    let logits = tape.add_row_bias(h, v[layout.head_b[2]])?;
    let pre = match center {
        Some(c) => {
            let neg = tape.input(c.map(|x| -x));
            tape.add_row_bias(logits, neg)?
        }
        None => logits,
    };
    let probs = tape.softmax(pre, Axis::Rows, temperature)?;
    Ok((probs, logits))
}

/// Plain inference encode of one image view: throwaway tape, no gradients.
pub fn encode_image<E: Scalar>(
    params: &ModelParams<E>,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    image: &Tensor<E>,
    obj_mask: Option<&[u8]>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let side = image.shape()[1];
    let patches = patchify(image, cfg.patch_size)?;
    let grid = cfg.grid_for_side(side)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let tokens = embed(&mut tape, &pv, layout, cfg, patches, None, side)?;
    let seq = TokenSequence::new(tokens, obj_mask.map(|m| m.to_vec()), grid * grid)?;
    let (z_obj, z_patches, _) = backbone_forward(&mut tape, &pv, layout, cfg, seq, false)?;
    Ok((tape.value(z_obj).clone(), tape.value(z_patches).clone()))
}

#[cfg(test)]
mod tests;
