//! Teacher-student training engine: loss assembly with ablation toggles,
//! stop-gradient teacher, EMA update, AdamW, schedules, and the training
//! loop.
//!
//! The teacher is evaluated on throwaway tapes and its outputs enter the
//! student's tape as constants, so gradients cannot reach teacher
//! parameters by construction.

pub mod optimizer;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::augment::{build_view_bundle, AugmentConfig, SceneSample, ViewBundle};
use crate::error::{OdisError, Result};
use crate::rng::stream;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::vit::checkpoint::{read_records, write_records};
use crate::vit::{
    backbone_forward, embed, head_forward, patchify, ModelParams, ParamLayout, ParamVars,
    TokenSequence, ViTConfig,
};
use crate::workers::Workers;
use optimizer::{clip_global_norm, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Object-level distillation plus the patch-level task.
    Odis,
    /// Image-level baseline: same machinery with all-ones object masks,
    /// token-0 loss reported as the image loss.
    Ibot,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "odis" => Ok(Objective::Odis),
            "ibot" => Ok(Objective::Ibot),
            other => Err(OdisError::config(format!(
                "unknown objective '{other}' (expected odis|ibot)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Odis => "odis",
            Objective::Ibot => "ibot",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Auxiliary image-level term for the ODIS objective (ablation).
    pub loss_image: bool,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// 0 disables gradient clipping.
    pub grad_clip: f64,
    pub ema_start: f64,
    /// EMA cadence in steps; 1 is the per-step default, larger values
    /// emulate coarser (per-epoch) teacher updates.
    pub ema_every: u64,
    pub center_momentum: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Odis,
            loss_image: false,
            steps: 3000,
            batch_size: 4,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.04,
            grad_clip: 3.0,
            ema_start: 0.996,
            ema_every: 1,
            center_momentum: 0.9,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

/// Per-step loss components; disabled terms are zero.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_patch: f64,
    pub l_img: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn additivity_gap(&self) -> f64 {
        (self.total - (self.l_obj + self.l_patch + self.l_img)).abs()
    }

    pub fn is_finite(&self) -> bool {
        self.l_obj.is_finite()
            && self.l_patch.is_finite()
            && self.l_img.is_finite()
            && self.total.is_finite()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub lr: f64,
    pub lambda: f64,
    pub teacher_entropy: f64,
    pub grad_norm: f64,
}

/// Learning-rate, EMA momentum, and teacher temperature at `step` of
/// `total`: linear warmup over the first warmup fraction then cosine to
/// zero; momentum follows a cosine from `ema_start` to exactly 1; the
/// teacher temperature is constant at desk scale.
pub fn schedule(step: u64, total: u64, cfg: &TrainConfig, teacher_temp: f64) -> (f64, f64, f64) {
    assert!(step <= total, "schedule queried past the end of training");
    let total_f = total.max(1) as f64;
    let warmup = (total_f * cfg.warmup_frac).floor();
    let lr = if (step as f64) < warmup {
        cfg.lr * step as f64 / warmup
    } else if total as f64 <= warmup {
        cfg.lr
    } else {
        let t = (step as f64 - warmup) / (total_f - warmup);
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    };
    let lam = 1.0 - (1.0 - cfg.ema_start) * ((std::f64::consts::PI * step as f64 / total_f).cos() + 1.0) / 2.0;
    (lr, lam, teacher_temp)
}

/// theta_t <- lambda * theta_t + (1 - lambda) * theta_s, elementwise over
/// every named parameter.
pub fn ema_update<E: Scalar>(
    teacher: &mut ModelParams<E>,
    student: &ModelParams<E>,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(OdisError::invalid(format!("EMA lambda {lambda} outside [0, 1]")));
    }
    teacher.same_structure(student)?;
    let lam = E::from_f64(lambda);
    let one_minus = E::ONE - lam;
    for i in 0..teacher.len() {
        let s = student.at(i).value.data();
        let t = teacher.at_mut(i).value.data_mut();
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = lam * *tv + one_minus * sv;
        }
    }
    Ok(())
}

/// Symmetric token-0 loss: mean cross-entropy over all (teacher global,
/// student view) pairs, skipping the same-view global pair. Teacher
/// probabilities are constants.
pub fn object_loss<E: Scalar>(
    tape: &mut Tape<E>,
    teacher_globals: &[Tensor<E>],
    student_globals: &[Var],
    student_locals: &[Var],
) -> Result<Var> {
    if teacher_globals.len() != 2 || student_globals.len() != 2 {
        return Err(OdisError::invalid("object loss expects exactly two global views"));
    }
    if student_globals.is_empty() && student_locals.is_empty() {
        return Err(OdisError::invalid("object loss needs at least one student view"));
    }
    let mut terms: Vec<Var> = Vec::new();
    for (a, t_probs) in teacher_globals.iter().enumerate() {
        for (b, &s) in student_globals.iter().enumerate() {
            if a == b {
                continue;
            }
            terms.push(tape.ce_rows_mean(t_probs.clone(), s)?);
        }
        for &s in student_locals {
            terms.push(tape.ce_rows_mean(t_probs.clone(), s)?);
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, E::from_f64(1.0 / terms.len() as f64)))
}

/// Patch-level loss on one view: mean cross-entropy over the masked
/// positions, zero when the mask is empty. Teacher rows are constants.
pub fn patch_loss<E: Scalar>(
    tape: &mut Tape<E>,
    teacher_patches: &Tensor<E>,
    student_patches: Var,
    mask: &[u8],
) -> Result<Var> {
    let sp = tape.value(student_patches);
    if teacher_patches.shape() != sp.shape() {
        return Err(OdisError::ShapeMismatch {
            op: "patch_loss",
            lhs: teacher_patches.shape().to_vec(),
            rhs: sp.shape().to_vec(),
        });
    }
    if mask.len() != teacher_patches.rows() {
        return Err(OdisError::ShapeMismatch {
            op: "patch_loss",
            lhs: vec![mask.len()],
            rhs: vec![teacher_patches.rows()],
        });
    }
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (m != 0).then_some(i))
        .collect();
    if idx.is_empty() {
        return Ok(tape.input(Tensor::scalar(E::ZERO)));
    }
    let k = teacher_patches.cols();
    let mut t_rows = Vec::with_capacity(idx.len() * k);
    for &i in &idx {
        t_rows.extend_from_slice(teacher_patches.row(i));
    }
    let t_sub = Tensor::new(vec![idx.len(), k], t_rows)?;
    let s_sub = tape.gather_rows(student_patches, &idx)?;
    tape.ce_rows_mean(t_sub, s_sub)
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

pub struct TrainState<E: Scalar> {
    pub student: ModelParams<E>,
    pub teacher: ModelParams<E>,
    pub layout: ParamLayout,
    pub center_obj: Tensor<E>,
    pub center_patch: Tensor<E>,
    pub opt: AdamW<E>,
    pub step: u64,
}

/// Weight decay applies exactly to projection matrices, recognizable by
/// their name's final segment.
pub fn decay_for_name(name: &str) -> bool {
    name.rsplit('/').next().map(|s| s.starts_with('w')).unwrap_or(false)
}

impl<E: Scalar> TrainState<E> {
    pub fn init(vit_cfg: &ViTConfig, tcfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream(tcfg.seed, &[0x1217]);
        let student = ModelParams::init(vit_cfg, &mut rng)?;
        let teacher = student.clone();
        let layout = ParamLayout::resolve(&student, vit_cfg)?;
        let k = vit_cfg.head_output_dim;
        let opt = AdamW::new(&student, tcfg.weight_decay);
        Ok(TrainState {
            student,
            teacher,
            layout,
            center_obj: Tensor::zeros(vec![k]),
            center_patch: Tensor::zeros(vec![k]),
            opt,
            step: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records: Vec<(String, Tensor<f32>)> = Vec::new();
        records.push(("meta/step".into(), Tensor::scalar(self.step as f32)));
        records.push(("center/obj".into(), self.center_obj.cast()));
        records.push(("center/patch".into(), self.center_patch.cast()));
        for p in self.student.iter() {
            records.push((format!("student/{}", p.name), p.value.cast()));
        }
        for p in self.teacher.iter() {
            records.push((format!("teacher/{}", p.name), p.value.cast()));
        }
        let (m, v) = self.opt.moments();
        for (p, t) in self.student.iter().zip(m) {
            records.push((format!("opt/m/{}", p.name), t.cast()));
        }
        for (p, t) in self.student.iter().zip(v) {
            records.push((format!("opt/v/{}", p.name), t.cast()));
        }
        write_records(path, &records)
    }

    pub fn load(path: &Path, vit_cfg: &ViTConfig, tcfg: &TrainConfig) -> Result<Self> {
        let records = read_records(path)?;
        let mut step = None;
        let mut center_obj = None;
        let mut center_patch = None;
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        for (name, tensor) in records {
            if name == "meta/step" {
                step = Some(tensor.item() as u64);
            } else if name == "center/obj" {
                center_obj = Some(tensor.cast());
            } else if name == "center/patch" {
                center_patch = Some(tensor.cast());
            } else if let Some(rest) = name.strip_prefix("student/") {
                student.push((rest.to_string(), tensor.cast(), decay_for_name(rest)));
            } else if let Some(rest) = name.strip_prefix("teacher/") {
                teacher.push((rest.to_string(), tensor.cast(), decay_for_name(rest)));
            } else if let Some(rest) = name.strip_prefix("opt/m/") {
                opt_m.push((rest.to_string(), tensor.cast::<E>()));
            } else if let Some(rest) = name.strip_prefix("opt/v/") {
                opt_v.push((rest.to_string(), tensor.cast::<E>()));
            }
        }
        let missing = |what: &str| OdisError::invalid(format!("checkpoint missing {what}"));
        let step = step.ok_or_else(|| missing("meta/step"))?;
        let student = ModelParams::from_records(student);
        let teacher = ModelParams::from_records(teacher);
        if student.is_empty() {
            return Err(missing("student parameters"));
        }
        student.same_structure(&teacher)?;
        let layout = ParamLayout::resolve(&student, vit_cfg)?;
        let mut opt = AdamW::new(&student, tcfg.weight_decay);
        if !opt_m.is_empty() {
            let order: Vec<Tensor<E>> = student
                .iter()
                .map(|p| {
                    opt_m
                        .iter()
                        .find(|(n, _)| n == &p.name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| missing(&format!("opt/m/{}", p.name)))
                })
                .collect::<Result<_>>()?;
            let order_v: Vec<Tensor<E>> = student
                .iter()
                .map(|p| {
                    opt_v
                        .iter()
                        .find(|(n, _)| n == &p.name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| missing(&format!("opt/v/{}", p.name)))
                })
                .collect::<Result<_>>()?;
            opt.restore(order, order_v, step)?;
        }
        Ok(TrainState {
            student,
            teacher,
            layout,
            center_obj: center_obj.ok_or_else(|| missing("center/obj"))?,
            center_patch: center_patch.ok_or_else(|| missing("center/patch"))?,
            opt,
            step,
        })
    }
}

// ---------------------------------------------------------------------------
// Forward plumbing
// ---------------------------------------------------------------------------

fn view_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    image: &Tensor<f32>,
    block_mask: Option<&[u8]>,
) -> Result<Var> {
    let side = image.shape()[1];
    let patches = patchify(&image.cast::<E>(), cfg.patch_size)?;
    embed(tape, pv, layout, cfg, patches, block_mask, side)
}

struct ViewOut {
    obj_probs: Var,
    obj_logits: Var,
    /// Patch probabilities at the block-masked positions.
    patch_probs: Option<Var>,
    patch_logits: Option<Var>,
}

/// Forward one view through backbone and heads. `block_mask` corrupts the
/// input tokens (student side only); `patch_rows` selects the masked
/// positions whose patch-head probabilities are wanted (both sides — the
/// teacher emits targets at those rows from uncorrupted tokens).
#[allow(clippy::too_many_arguments)]
fn forward_view<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    image: &Tensor<f32>,
    obj_mask: Option<&[u8]>,
    block_mask: Option<&[u8]>,
    patch_rows: Option<&[u8]>,
    temp: f64,
    center_obj: Option<&Tensor<E>>,
    center_patch: Option<&Tensor<E>>,
) -> Result<ViewOut> {
    let side = image.shape()[1];
    let grid = cfg.grid_for_side(side)?;
    let tokens = view_tokens(tape, pv, layout, cfg, image, block_mask)?;
    let seq = TokenSequence::new(tokens, obj_mask.map(|m| m.to_vec()), grid * grid)?;
    let (z_obj, z_patches, _) = backbone_forward(tape, pv, layout, cfg, seq, false)?;
    let t = E::from_f64(temp);
    let (obj_probs, obj_logits) = head_forward(tape, pv, layout, z_obj, t, center_obj)?;
    let mut patch_probs = None;
    let mut patch_logits = None;
    if let Some(m) = patch_rows {
        let idx: Vec<usize> = m
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect();
        if !idx.is_empty() {
            let rows = tape.gather_rows(z_patches, &idx)?;
            let (pp, pl) = head_forward(tape, pv, layout, rows, t, center_patch)?;
            patch_probs = Some(pp);
            patch_logits = Some(pl);
        }
    }
    Ok(ViewOut { obj_probs, obj_logits, patch_probs, patch_logits })
}

struct TeacherView<E: Scalar> {
    obj_probs: Tensor<E>,
    obj_logits: Tensor<E>,
    /// Masked-row targets for the block-masked student view.
    patch_probs: Option<Tensor<E>>,
    patch_logits: Option<Tensor<E>>,
    /// Unmasked-attention probabilities for the auxiliary image loss.
    unmasked_obj_probs: Option<Tensor<E>>,
    unmasked_obj_logits: Option<Tensor<E>>,
}

struct ElementResult<E: Scalar> {
    grads: Vec<Tensor<E>>,
    token0: f64,
    img: f64,
    patch_sum: f64,
    teacher_obj_logits: Vec<Tensor<E>>,
    teacher_patch_logits: Vec<Tensor<E>>,
    entropy_sum: f64,
    entropy_count: usize,
}

fn entropy<E: Scalar>(probs: &Tensor<E>) -> f64 {
    let mut h = 0.0;
    for &p in probs.data() {
        let p = p.to_f64();
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Teacher pass for one element on throwaway tapes. The teacher always
/// receives uncorrupted tokens; patch targets are gathered at the
/// positions the student's block mask will corrupt.
#[allow(clippy::type_complexity)]
fn teacher_pass<E: Scalar>(
    state: &TrainState<E>,
    bundle: &ViewBundle,
    cfg: &ViTConfig,
    need_unmasked: bool,
) -> Result<(Vec<TeacherView<E>>, Vec<Option<Tensor<E>>>)> {
    let mut globals = Vec::with_capacity(2);
    for g in &bundle.globals {
        let mut tape = Tape::new();
        let pv = state.teacher.register(&mut tape);
        let out = forward_view(
            &mut tape,
            &pv,
            &state.layout,
            cfg,
            &g.image,
            Some(&g.obj_mask),
            None,
            g.block_mask.as_deref(),
            cfg.teacher_temp,
            Some(&state.center_obj),
            Some(&state.center_patch),
        )?;
        let (unmasked_obj_probs, unmasked_obj_logits) = if need_unmasked {
            let mut tape3 = Tape::new();
            let pv3 = state.teacher.register(&mut tape3);
            let out3 = forward_view(
                &mut tape3,
                &pv3,
                &state.layout,
                cfg,
                &g.image,
                None,
                None,
                None,
                cfg.teacher_temp,
                Some(&state.center_obj),
                None,
            )?;
            (
                Some(tape3.value(out3.obj_probs).clone()),
                Some(tape3.value(out3.obj_logits).clone()),
            )
        } else {
            (None, None)
        };
        globals.push(TeacherView {
            obj_probs: tape.value(out.obj_probs).clone(),
            obj_logits: tape.value(out.obj_logits).clone(),
            patch_probs: out.patch_probs.map(|v| tape.value(v).clone()),
            patch_logits: out.patch_logits.map(|v| tape.value(v).clone()),
            unmasked_obj_probs,
            unmasked_obj_logits,
        });
    }

    // block-masked locals (patch-masking-for-locals ablation) need teacher
    // patch targets too
    let mut local_targets = Vec::with_capacity(bundle.locals.len());
    for l in &bundle.locals {
        match &l.block_mask {
            Some(m) if m.iter().any(|&v| v != 0) => {
                let mut tape = Tape::new();
                let pv = state.teacher.register(&mut tape);
                let out = forward_view(
                    &mut tape,
                    &pv,
                    &state.layout,
                    cfg,
                    &l.image,
                    None,
                    None,
                    Some(m),
                    cfg.teacher_temp,
                    Some(&state.center_obj),
                    Some(&state.center_patch),
                )?;
                local_targets.push(out.patch_probs.map(|v| tape.value(v).clone()));
            }
            _ => local_targets.push(None),
        }
    }
    Ok((globals, local_targets))
}

struct ElementLoss<E: Scalar> {
    total: Var,
    token0: Var,
    img: Option<Var>,
    patch_sum: f64,
    teachers: Vec<TeacherView<E>>,
}

/// Student forward and loss assembly for one element on the caller's
/// tape, with student weights given as tape vars. Loss scales are
/// pre-weighted so summing element losses yields the batch loss.
#[allow(clippy::too_many_arguments)]
fn element_loss<E: Scalar>(
    tape: &mut Tape<E>,
    pv: &ParamVars,
    state: &TrainState<E>,
    bundle: &ViewBundle,
    cfg: &ViTConfig,
    tcfg: &TrainConfig,
    batch_size: usize,
    total_masked_views: usize,
) -> Result<ElementLoss<E>> {
    let need_img = match tcfg.objective {
        Objective::Odis => tcfg.loss_image,
        Objective::Ibot => false, // the all-ones masked path already is the image loss
    };
    let (teachers, teacher_local_targets) = teacher_pass(state, bundle, cfg, need_img)?;

    // student globals: block-masked tokens + object mask
    let mut student_globals = Vec::with_capacity(2);
    let mut patch_terms: Vec<Var> = Vec::new();
    for (g, teacher) in bundle.globals.iter().zip(&teachers) {
        let out = forward_view(
            tape,
            pv,
            &state.layout,
            cfg,
            &g.image,
            Some(&g.obj_mask),
            g.block_mask.as_deref(),
            g.block_mask.as_deref(),
            cfg.student_temp,
            None,
            None,
        )?;
        student_globals.push(out.obj_probs);
        if let (Some(sp), Some(tp)) = (out.patch_probs, &teacher.patch_probs) {
            patch_terms.push(tape.ce_rows_mean(tp.clone(), sp)?);
        }
    }

    // student locals
    let mut student_locals = Vec::with_capacity(bundle.locals.len());
    let mut locals_unmasked = true;
    for (l, target) in bundle.locals.iter().zip(&teacher_local_targets) {
        let out = forward_view(
            tape,
            pv,
            &state.layout,
            cfg,
            &l.image,
            l.obj_mask.as_deref(),
            l.block_mask.as_deref(),
            if target.is_some() { l.block_mask.as_deref() } else { None },
            cfg.student_temp,
            None,
            None,
        )?;
        if l.obj_mask.is_some() {
            locals_unmasked = false;
        }
        student_locals.push(out.obj_probs);
        if let (Some(sp), Some(tp)) = (out.patch_probs, target) {
            patch_terms.push(tape.ce_rows_mean(tp.clone(), sp)?);
        }
    }

    // token-0 loss over the masked path
    let teacher_obj: Vec<Tensor<E>> = teachers.iter().map(|t| t.obj_probs.clone()).collect();
    let token0 = object_loss(tape, &teacher_obj, &student_globals, &student_locals)?;

    // auxiliary image-level loss from unmasked forwards (locals are reused
    // when they are unmasked, which is the default configuration)
    let img = if need_img {
        let teacher_unmasked: Vec<Tensor<E>> = teachers
            .iter()
            .map(|t| t.unmasked_obj_probs.clone().expect("requested above"))
            .collect();
        let mut unmasked_globals = Vec::with_capacity(2);
        for g in &bundle.globals {
            let out = forward_view(
                tape,
                pv,
                &state.layout,
                cfg,
                &g.image,
                None,
                g.block_mask.as_deref(),
                None,
                cfg.student_temp,
                None,
                None,
            )?;
            unmasked_globals.push(out.obj_probs);
        }
        let locals_for_img: &[Var] = if locals_unmasked { &student_locals } else { &[] };
        Some(object_loss(tape, &teacher_unmasked, &unmasked_globals, locals_for_img)?)
    } else {
        None
    };

    // total element loss with batch weights baked in
    let inv_b = E::from_f64(1.0 / batch_size as f64);
    let mut total = tape.scale(token0, inv_b);
    if let Some(img_var) = img {
        let scaled = tape.scale(img_var, inv_b);
        total = tape.add(total, scaled)?;
    }
    let mut patch_value = 0.0;
    if total_masked_views > 0 && !patch_terms.is_empty() {
        let inv_m = E::from_f64(1.0 / total_masked_views as f64);
        for &term in &patch_terms {
            patch_value += tape.value(term).item().to_f64();
            let scaled = tape.scale(term, inv_m);
            total = tape.add(total, scaled)?;
        }
    }

    Ok(ElementLoss { total, token0, img, patch_sum: patch_value, teachers })
}

/// Full element step: build the loss on a fresh tape with the current
/// student weights, run backward, and collect everything the batch
/// reduction needs.
fn element_pass<E: Scalar>(
    state: &TrainState<E>,
    bundle: &ViewBundle,
    cfg: &ViTConfig,
    tcfg: &TrainConfig,
    batch_size: usize,
    total_masked_views: usize,
) -> Result<ElementResult<E>> {
    let mut tape = Tape::new();
    let pv = state.student.register(&mut tape);
    let loss = element_loss(
        &mut tape,
        &pv,
        state,
        bundle,
        cfg,
        tcfg,
        batch_size,
        total_masked_views,
    )?;
    let grads_set = tape.backward(loss.total)?;
    let grads: Vec<Tensor<E>> = pv
        .all()
        .iter()
        .map(|&v| grads_set.get_or_zeros(&tape, v))
        .collect();

    let mut entropy_sum = 0.0;
    let mut teacher_obj_logits = Vec::new();
    let mut teacher_patch_logits = Vec::new();
    for t in &loss.teachers {
        entropy_sum += entropy(&t.obj_probs);
        teacher_obj_logits.push(t.obj_logits.clone());
        if let Some(l) = &t.unmasked_obj_logits {
            teacher_obj_logits.push(l.clone());
        }
        if let Some(l) = &t.patch_logits {
            teacher_patch_logits.push(l.clone());
        }
    }

    Ok(ElementResult {
        grads,
        token0: tape.value(loss.token0).item().to_f64(),
        img: loss.img.map(|v| tape.value(v).item().to_f64()).unwrap_or(0.0),
        patch_sum: loss.patch_sum,
        teacher_obj_logits,
        teacher_patch_logits,
        entropy_sum,
        entropy_count: loss.teachers.len(),
    })
}

/// Finite-difference check of the assembled training loss on a micro
/// model (depth 2, width 16, 4x4 patch grid) in f64: the gradient of the
/// full objective with respect to every student parameter is compared
/// against central differences. `max_coords_per_param` subsamples the
/// probed coordinates (evenly strided) to bound runtime.
pub fn full_loss_grad_check(
    max_coords_per_param: Option<usize>,
) -> Result<crate::tensor::gradcheck::CheckReport> {
    use crate::tensor::gradcheck::{fd_check, CheckReport};

    let cfg = ViTConfig {
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
    };
    let tcfg = TrainConfig {
        objective: Objective::Odis,
        loss_image: true, // exercise every loss path
        ..TrainConfig::default()
    };
    let mut state: TrainState<f64> = TrainState::init(&cfg, &tcfg)?;
    // decorrelate teacher from student so cross-entropies are nontrivial
    {
        let mut rng = stream(7, &[0xfd]);
        let other = ModelParams::init(&cfg, &mut rng)?;
        ema_update(&mut state.teacher, &other, 0.5)?;
        let mut crng = stream(8, &[0xfd]);
        state.center_obj = crate::tensor::randn(vec![cfg.head_output_dim], 0.05, &mut crng);
        state.center_patch = crate::tensor::randn(vec![cfg.head_output_dim], 0.05, &mut crng);
    }

    // one scene, one bundle, with block masks pinned on both globals so the
    // patch loss participates
    let spec = crate::data::SceneSpec {
        canvas_side: 16,
        object_count: (2, 2),
        size_range: (0.25, 0.45),
        ..crate::data::SceneSpec::default()
    };
    let mut srng = stream(9, &[0xfd]);
    let sample = crate::data::generate_scene(&spec, &mut srng)?;
    let acfg = AugmentConfig {
        global_side: 16,
        local_side: 8,
        n_local: 2,
        patch_size: 4,
        ..AugmentConfig::default()
    };
    let mut brng = stream(10, &[0xfd]);
    let mut bundle = build_view_bundle(&sample, &acfg, &mut brng)?;
    let mut mrng = stream(11, &[0xfd]);
    bundle.globals[0].block_mask =
        Some(crate::augment::block_mask(4, 4, 0.3, &mut mrng)?);
    bundle.globals[1].block_mask = None;
    let masked = count_masked_views(std::slice::from_ref(&bundle));

    let inputs: Vec<Tensor<f64>> = state.student.iter().map(|p| p.value.clone()).collect();
    let program = move |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let pv = ParamVars::from_vars(vars.to_vec());
        let loss = element_loss(tape, &pv, &state, &bundle, &cfg, &tcfg, 1, masked)?;
        Ok(loss.total)
    };
    let worst = fd_check(&program, &inputs, max_coords_per_param, 1.0)?;
    Ok(CheckReport { name: "full_loss", worst_rel_err: worst })
}

fn count_masked_views(bundles: &[ViewBundle]) -> usize {
    let has = |m: &Option<Vec<u8>>| m.as_ref().is_some_and(|m| m.iter().any(|&v| v != 0));
    bundles
        .iter()
        .map(|b| {
            b.globals.iter().filter(|g| has(&g.block_mask)).count()
                + b.locals.iter().filter(|l| has(&l.block_mask)).count()
        })
        .sum()
}

/// One optimization step over a batch of view bundles.
///
/// Per-element forwards/backwards run on the worker pool; reduction is in
/// element order, so results are identical for any worker count.
pub fn train_step<E: Scalar>(
    state: &mut TrainState<E>,
    bundles: &[ViewBundle],
    cfg: &ViTConfig,
    tcfg: &TrainConfig,
    workers: &Workers,
) -> Result<(LossBreakdown, StepMetrics)> {
    if bundles.is_empty() {
        return Err(OdisError::invalid("train_step needs a nonempty batch"));
    }
    let total_masked = count_masked_views(bundles);
    let b = bundles.len();

    let results: Vec<Result<ElementResult<E>>> = workers.map_ordered(bundles, |_, bundle| {
        element_pass(&*state, bundle, cfg, tcfg, b, total_masked)
    });

    let mut grads: Option<Vec<Tensor<E>>> = None;
    let mut l_token0 = 0.0;
    let mut l_img = 0.0;
    let mut l_patch = 0.0;
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    let mut obj_logits: Vec<Tensor<E>> = Vec::new();
    let mut patch_logits: Vec<Tensor<E>> = Vec::new();
    for r in results {
        let r = r?;
        match &mut grads {
            None => grads = Some(r.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&r.grads) {
                    for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv;
                    }
                }
            }
        }
        l_token0 += r.token0 / b as f64;
        l_img += r.img / b as f64;
        l_patch += if total_masked > 0 {
            r.patch_sum / total_masked as f64
        } else {
            0.0
        };
        entropy_sum += r.entropy_sum;
        entropy_count += r.entropy_count;
        obj_logits.extend(r.teacher_obj_logits);
        patch_logits.extend(r.teacher_patch_logits);
    }
    let mut grads = grads.expect("nonempty batch");

    let (l_obj, l_img) = match tcfg.objective {
        Objective::Odis => (l_token0, l_img),
        Objective::Ibot => (0.0, l_token0),
    };
    let breakdown = LossBreakdown {
        l_obj,
        l_patch,
        l_img,
        total: l_obj + l_patch + l_img,
    };
    if !breakdown.is_finite() {
        return Err(OdisError::NonFinite { step: state.step, snapshot: PathBuf::new() });
    }

    let (lr, lambda, _) = schedule(state.step, tcfg.steps, tcfg, cfg.teacher_temp);
    let grad_norm = clip_global_norm(&mut grads, tcfg.grad_clip);
    state.opt.step(&mut state.student, &grads, lr)?;

    // running centers from this step's teacher logits
    update_center(&mut state.center_obj, &obj_logits, tcfg.center_momentum);
    update_center(&mut state.center_patch, &patch_logits, tcfg.center_momentum);

    // EMA after the student update; cadence is configurable
    if tcfg.ema_every <= 1 || (state.step + 1).is_multiple_of(tcfg.ema_every) {
        ema_update(&mut state.teacher, &state.student, lambda)?;
    }
    state.step += 1;

    let metrics = StepMetrics {
        lr,
        lambda,
        teacher_entropy: if entropy_count > 0 {
            entropy_sum / entropy_count as f64
        } else {
            0.0
        },
        grad_norm,
    };
    Ok((breakdown, metrics))
}

fn update_center<E: Scalar>(center: &mut Tensor<E>, logit_rows: &[Tensor<E>], momentum: f64) {
    let mut rows = 0usize;
    let k = center.numel();
    let mut mean = vec![E::ZERO; k];
    for t in logit_rows {
        for r in 0..t.rows() {
            for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return;
    }
    let inv = E::from_f64(1.0 / rows as f64);
    let mu = E::from_f64(momentum);
    let one_minus = E::ONE - mu;
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = mu * *c + one_minus * (m * inv);
    }
}

// ---------------------------------------------------------------------------
// Batch assembly and the training loop
// ---------------------------------------------------------------------------

const BATCH_TAG: u64 = 0xba7c;
const BUNDLE_TAG: u64 = 0xb0bd;

/// Deterministic batch for a step: indices and per-slot augmentation
/// streams derive from (seed, step, slot), never from shared state.
pub fn batch_for_step(
    samples: &[SceneSample],
    acfg: &AugmentConfig,
    seed: u64,
    step: u64,
    batch_size: usize,
    workers: &Workers,
) -> Result<Vec<ViewBundle>> {
    use rand::Rng;
    let mut idx_rng = stream(seed, &[BATCH_TAG, step]);
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| idx_rng.gen_range(0..samples.len()))
        .collect();
    let outs: Vec<Result<ViewBundle>> = workers.map_ordered(&indices, |slot, &i| {
        let mut rng = stream(seed, &[BUNDLE_TAG, step, slot as u64]);
        build_view_bundle(&samples[i], acfg, &mut rng)
    });
    outs.into_iter().collect()
}

/// One line of the metrics stream.
#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    l_obj: f64,
    l_patch: f64,
    l_img: f64,
    total: f64,
    lr: f64,
    lambda: f64,
    teacher_entropy: f64,
    wallclock_ms: f64,
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_loss: Option<LossBreakdown>,
}

/// Full training run: metrics JSONL plus periodic and final checkpoints.
/// `resume_from` continues a previous run bit-exactly (all randomness is
/// derived from (seed, step), so no RNG state needs to be carried).
pub fn run_training(
    samples: &[SceneSample],
    vit_cfg: &ViTConfig,
    acfg: &AugmentConfig,
    tcfg: &TrainConfig,
    out_dir: &Path,
    workers: &Workers,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(OdisError::invalid("training requires a nonempty dataset"));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut state: TrainState<f32> = match resume_from {
        Some(p) => TrainState::load(p, vit_cfg, tcfg)?,
        None => TrainState::init(vit_cfg, tcfg)?,
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let final_path = out_dir.join("final.odis");
    if state.step >= tcfg.steps {
        state.save(&final_path)?;
        return Ok(TrainOutcome { final_checkpoint: final_path, metrics_path, last_loss: None });
    }

    let mut last = None;
    while state.step < tcfg.steps {
        let step_started = Instant::now();
        let bundles =
            batch_for_step(samples, acfg, tcfg.seed, state.step, tcfg.batch_size, workers)?;
        let (loss, m) = match train_step(&mut state, &bundles, vit_cfg, tcfg, workers) {
            Ok(ok) => ok,
            Err(OdisError::NonFinite { step, .. }) => {
                let snapshot = out_dir.join("diagnostic.odis");
                state.save(&snapshot)?;
                return Err(OdisError::NonFinite { step, snapshot });
            }
            Err(e) => return Err(e),
        };
        let line = MetricsLine {
            step: state.step,
            l_obj: loss.l_obj,
            l_patch: loss.l_patch,
            l_img: loss.l_img,
            total: loss.total,
            lr: m.lr,
            lambda: m.lambda,
            teacher_entropy: m.teacher_entropy,
            wallclock_ms: step_started.elapsed().as_secs_f64() * 1e3,
        };
        serde_json::to_writer(&mut metrics, &line)
            .map_err(|e| OdisError::invalid(format!("metrics serialization: {e}")))?;
        metrics.write_all(b"\n")?;
        last = Some(loss);

        if tcfg.checkpoint_every > 0 && state.step.is_multiple_of(tcfg.checkpoint_every) {
            state.save(&out_dir.join(format!("step_{:06}.odis", state.step)))?;
        }
    }
    metrics.flush()?;
    state.save(&final_path)?;
    Ok(TrainOutcome { final_checkpoint: final_path, metrics_path, last_loss: last })
}
