//! Object-aware view construction: paired random-resized crops of image
//! and instance map, target sampling, patch-level mask binarization,
//! local crops, and block masking for the patch-level task.
//!
//! Everything here is a pure function of (sample, rng); per-sample RNG
//! streams are derived in the training loop so any number of prefetch
//! workers produces identical bundles.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OdisError, Result};
use crate::tensor::Tensor;

/// Image raster plus exact instance segmentation and per-instance labels.
#[derive(Clone, Debug)]
pub struct SceneSample {
    /// [C, S, S] in [0, 1].
    pub image: Tensor<f32>,
    /// Row-major S*S instance ids; 0 is background.
    pub instance_map: Vec<u16>,
    pub side: usize,
    /// instance id -> class id (classes start at 1; 0 is background).
    pub labels: BTreeMap<u16, u8>,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.shape() != [3, self.side, self.side] {
            return Err(OdisError::invalid(format!(
                "image shape {:?} does not match side {}",
                self.image.shape(),
                self.side
            )));
        }
        if self.instance_map.len() != self.side * self.side {
            return Err(OdisError::invalid("instance map size mismatch"));
        }
        for &id in &self.instance_map {
            if id != 0 && !self.labels.contains_key(&id) {
                return Err(OdisError::invalid(format!("instance {id} has no label")));
            }
        }
        Ok(())
    }

    pub fn instance_areas(&self) -> BTreeMap<u16, usize> {
        let mut areas = BTreeMap::new();
        for &id in &self.instance_map {
            if id != 0 {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Class map aligned with the instance map (background stays 0).
    pub fn class_map(&self) -> Vec<u8> {
        self.instance_map
            .iter()
            .map(|&id| if id == 0 { 0 } else { self.labels[&id] })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    Uniform,
    Area,
}

/// Recorded geometry of one crop: source rectangle plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub flip: bool,
}

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub global_side: usize,
    pub local_side: usize,
    pub n_local: usize,
    pub patch_size: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub flip_prob: f64,
    pub block_mask_prob: f64,
    pub block_ratio: (f64, f64),
    pub max_retries: usize,
    pub sampling: SamplingStrategy,
    /// Object-aware global cropping; off reproduces the plain multi-crop
    /// baseline (object masks degrade to all-ones).
    pub object_aware: bool,
    /// Patch masking for local crops (ablation).
    pub pmlc: bool,
    /// Object-aware local cropping (ablation).
    pub oalc: bool,
    /// Masked attention for local crops (ablation).
    pub malc: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_side: 32,
            local_side: 16,
            n_local: 10,
            patch_size: 4,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            flip_prob: 0.5,
            block_mask_prob: 0.5,
            block_ratio: (0.1, 0.5),
            max_retries: 20,
            sampling: SamplingStrategy::Area,
            object_aware: true,
            pmlc: false,
            oalc: false,
            malc: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(OdisError::config(format!(
                    "scale range ({lo}, {hi}) must lie in (0, 1]"
                )));
            }
        }
        if self.global_side < self.patch_size || self.local_side < self.patch_size {
            return Err(OdisError::config("crop side smaller than patch size"));
        }
        if !self.global_side.is_multiple_of(self.patch_size) || !self.local_side.is_multiple_of(self.patch_size) {
            return Err(OdisError::config("crop sides must be multiples of the patch size"));
        }
        let (r0, r1) = self.block_ratio;
        if !(0.0..=1.0).contains(&r0) || !(0.0..=1.0).contains(&r1) || r0 > r1 {
            return Err(OdisError::config("block mask ratio range invalid"));
        }
        Ok(())
    }

    pub fn global_grid(&self) -> usize {
        self.global_side / self.patch_size
    }

    pub fn local_grid(&self) -> usize {
        self.local_side / self.patch_size
    }
}

/// One global view: image crop, aligned seg crop, its geometry, the
/// binarized target-object patch mask, and an optional block mask.
#[derive(Clone, Debug)]
pub struct GlobalView {
    pub image: Tensor<f32>,
    pub seg: Vec<u16>,
    pub crop: CropSpec,
    pub obj_mask: Vec<u8>,
    pub block_mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct LocalView {
    pub image: Tensor<f32>,
    pub seg: Vec<u16>,
    pub crop: CropSpec,
    /// Present only under the masked-attention-for-locals ablation (and
    /// only when the target survives in the crop).
    pub obj_mask: Option<Vec<u8>>,
    /// Present only under the patch-masking-for-locals ablation.
    pub block_mask: Option<Vec<u8>>,
}

/// Two globals plus locals for one sample and one target object.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub target_instance: u16,
    pub globals: [GlobalView; 2],
    pub locals: Vec<LocalView>,
}

/// Pick the target instance, uniformly or proportional to pixel area.
pub fn sample_target_object(
    instance_map: &[u16],
    strategy: SamplingStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<u16> {
    let mut areas = BTreeMap::new();
    for &id in instance_map {
        if id != 0 {
            *areas.entry(id).or_insert(0usize) += 1;
        }
    }
    if areas.is_empty() {
        return Err(OdisError::invalid("cannot sample a target from a background-only map"));
    }
    match strategy {
        SamplingStrategy::Uniform => {
            let ids: Vec<u16> = areas.keys().copied().collect();
            Ok(ids[rng.gen_range(0..ids.len())])
        }
        SamplingStrategy::Area => {
            let total: usize = areas.values().sum();
            let mut pick = rng.gen_range(0..total);
            for (&id, &a) in &areas {
                if pick < a {
                    return Ok(id);
                }
                pick -= a;
            }
            unreachable!("area sampling exhausted the cumulative sum")
        }
    }
}

/// Sample a crop rectangle with area fraction in `scale` and aspect ratio
/// in [3/4, 4/3]; falls back to the aspect-clamped center crop after ten
/// failed draws (for a square source that is the full frame).
fn sample_crop_rect(side: usize, scale: (f64, f64), rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let area = (side * side) as f64;
    for _ in 0..10 {
        let frac = rng.gen_range(scale.0..=scale.1);
        let aspect = (rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln())).exp();
        let target = area * frac;
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=side).contains(&w) && (1..=side).contains(&h) {
            let x0 = rng.gen_range(0..=side - w);
            let y0 = rng.gen_range(0..=side - h);
            return (x0, y0, w, h);
        }
    }
    (0, 0, side, side)
}

/// Bilinear crop-resize of a [C, S, S] image; only pixels inside the crop
/// rectangle contribute.
pub fn apply_crop_to_image(image: &Tensor<f32>, crop: CropSpec, out_side: usize) -> Tensor<f32> {
    let c = image.shape()[0];
    let s = image.shape()[1];
    let mut out = Tensor::zeros(vec![c, out_side, out_side]);
    let sx = crop.w as f32 / out_side as f32;
    let sy = crop.h as f32 / out_side as f32;
    for ch in 0..c {
        let src = &image.data()[ch * s * s..(ch + 1) * s * s];
        for j in 0..out_side {
            let v = ((j as f32 + 0.5) * sy - 0.5).clamp(0.0, (crop.h - 1) as f32);
            let y0 = v.floor() as usize;
            let y1 = (y0 + 1).min(crop.h - 1);
            let fy = v - y0 as f32;
            for i in 0..out_side {
                let u = ((i as f32 + 0.5) * sx - 0.5).clamp(0.0, (crop.w - 1) as f32);
                let x0 = u.floor() as usize;
                let x1 = (x0 + 1).min(crop.w - 1);
                let fx = u - x0 as f32;
                let at = |yy: usize, xx: usize| src[(crop.y0 + yy) * s + crop.x0 + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                let dst_i = if crop.flip { out_side - 1 - i } else { i };
                out.data_mut()[ch * out_side * out_side + j * out_side + dst_i] =
                    top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor crop-resize of the instance map under the identical
/// geometry, preserving ids exactly.
pub fn apply_crop_to_map(map: &[u16], side: usize, crop: CropSpec, out_side: usize) -> Vec<u16> {
    let mut out = vec![0u16; out_side * out_side];
    let sx = crop.w as f32 / out_side as f32;
    let sy = crop.h as f32 / out_side as f32;
    for j in 0..out_side {
        let yy = (((j as f32 + 0.5) * sy).floor() as usize).min(crop.h - 1);
        for i in 0..out_side {
            let xx = (((i as f32 + 0.5) * sx).floor() as usize).min(crop.w - 1);
            let dst_i = if crop.flip { out_side - 1 - i } else { i };
            out[j * out_side + dst_i] = map[(crop.y0 + yy) * side + crop.x0 + xx];
        }
    }
    out
}

/// One random-resized crop applied identically to image and instance map.
pub fn paired_random_resized_crop(
    sample: &SceneSample,
    scale: (f64, f64),
    out_side: usize,
    flip_prob: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f32>, Vec<u16>, CropSpec) {
    let (x0, y0, w, h) = sample_crop_rect(sample.side, scale, rng);
    let flip = rng.gen_range(0.0..1.0) < flip_prob;
    let crop = CropSpec { x0, y0, w, h, flip };
    let image = apply_crop_to_image(&sample.image, crop, out_side);
    let seg = apply_crop_to_map(&sample.instance_map, sample.side, crop, out_side);
    (image, seg, crop)
}

/// Binarize a seg view into a patch-level mask: a patch is set as soon as
/// any of its pixels belongs to the target (any-overlap rule, so small
/// objects survive patchification).
pub fn patchify_mask(seg: &[u16], side: usize, target: u16, patch: usize) -> Result<Vec<u8>> {
    if !side.is_multiple_of(patch) {
        return Err(OdisError::invalid(format!(
            "seg side {side} not divisible by patch size {patch}"
        )));
    }
    let g = side / patch;
    let mut mask = vec![0u8; g * g];
    for (idx, &id) in seg.iter().enumerate() {
        if id == target {
            let y = idx / side;
            let x = idx % side;
            mask[(y / patch) * g + x / patch] = 1;
        }
    }
    Ok(mask)
}

/// Deterministic fallback when retries run out: the target's bounding box
/// inflated by 20% per side and clipped to the frame, no flip.
fn fallback_bbox_crop(sample: &SceneSample, target: u16) -> Result<CropSpec> {
    let s = sample.side;
    let mut min_x = s;
    let mut min_y = s;
    let mut max_x = 0usize;
    let mut max_y = 0usize;
    let mut found = false;
    for (idx, &id) in sample.instance_map.iter().enumerate() {
        if id == target {
            let y = idx / s;
            let x = idx % s;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            found = true;
        }
    }
    if !found {
        return Err(OdisError::invalid(format!(
            "target instance {target} absent from the instance map"
        )));
    }
    let w = max_x - min_x + 1;
    let h = max_y - min_y + 1;
    let pad_x = ((w as f64) * 0.1).round() as usize;
    let pad_y = ((h as f64) * 0.1).round() as usize;
    let x0 = min_x.saturating_sub(pad_x);
    let y0 = min_y.saturating_sub(pad_y);
    let x1 = (max_x + 1 + pad_x).min(s);
    let y1 = (max_y + 1 + pad_y).min(s);
    Ok(CropSpec { x0, y0, w: x1 - x0, h: y1 - y0, flip: false })
}

/// Retry a random crop until the target's patch mask is nonempty, at most
/// `max_retries` attempts, falling back to the inflated bounding box.
/// Returns the view pieces and the number of random attempts consumed.
pub fn object_aware_view(
    sample: &SceneSample,
    target: u16,
    scale: (f64, f64),
    out_side: usize,
    patch: usize,
    flip_prob: f64,
    max_retries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<u16>, CropSpec, Vec<u8>, usize)> {
    if !sample.instance_map.contains(&target) {
        return Err(OdisError::invalid(format!(
            "target instance {target} absent from the instance map"
        )));
    }
    for attempt in 1..=max_retries {
        let (image, seg, crop) = paired_random_resized_crop(sample, scale, out_side, flip_prob, rng);
        let mask = patchify_mask(&seg, out_side, target, patch)?;
        if mask.iter().any(|&m| m != 0) {
            return Ok((image, seg, crop, mask, attempt));
        }
    }
    let crop = fallback_bbox_crop(sample, target)?;
    let image = apply_crop_to_image(&sample.image, crop, out_side);
    let seg = apply_crop_to_map(&sample.instance_map, sample.side, crop, out_side);
    let mask = patchify_mask(&seg, out_side, target, patch)?;
    debug_assert!(mask.iter().any(|&m| m != 0), "bbox fallback always contains the target");
    Ok((image, seg, crop, mask, max_retries))
}

/// Two object-aware global views, each retried independently.
pub fn object_aware_global_views(
    sample: &SceneSample,
    target: u16,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<[(Tensor<f32>, Vec<u16>, CropSpec, Vec<u8>); 2]> {
    let make = |rng: &mut ChaCha8Rng| -> Result<(Tensor<f32>, Vec<u16>, CropSpec, Vec<u8>)> {
        let (image, seg, crop, mask, _) = object_aware_view(
            sample,
            target,
            cfg.global_scale,
            cfg.global_side,
            cfg.patch_size,
            cfg.flip_prob,
            cfg.max_retries,
            rng,
        )?;
        Ok((image, seg, crop, mask))
    };
    Ok([make(rng)?, make(rng)?])
}

/// Ratio of patches to mask for one block-masked view.
pub fn sample_block_ratio(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

/// Greedy block masking: place random rectangles (aspect in [0.3, 1/0.3],
/// 4..=7 cells where the grid fits it) until the masked fraction reaches
/// `ratio`. The final fraction lands in [ratio, ratio + 8/(HW)].
pub fn block_mask(h: usize, w: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(OdisError::invalid(format!("block mask ratio {ratio} outside [0, 1]")));
    }
    let hw = h * w;
    let mut mask = vec![0u8; hw];
    let target = (ratio * hw as f64).ceil() as usize;
    let mut masked = 0usize;
    let a_lo = 4.min(hw);
    let a_hi = 7.min(hw);
    while masked < target {
        let area = rng.gen_range(a_lo..=a_hi);
        let aspect = (rng.gen_range((0.3f64).ln()..=(1.0f64 / 0.3).ln())).exp();
        let bh = (((area as f64) * aspect).sqrt().round() as usize).clamp(1, h);
        // integer division keeps the block at or below the drawn area, so a
        // single placement can never overshoot the +8/(HW) bound
        let bw = (area / bh).clamp(1, w);
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        for y in top..top + bh {
            for x in left..left + bw {
                let cell = &mut mask[y * w + x];
                if *cell == 0 {
                    *cell = 1;
                    masked += 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Local crops per the configured ablation flags. The default draws plain
/// random-resized crops with no masks of any kind.
pub fn local_crops(
    sample: &SceneSample,
    target: u16,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LocalView>> {
    let mut views = Vec::with_capacity(cfg.n_local);
    for _ in 0..cfg.n_local {
        let (image, seg, crop) = if cfg.oalc {
            let (image, seg, crop, _, _) = object_aware_view(
                sample,
                target,
                cfg.local_scale,
                cfg.local_side,
                cfg.patch_size,
                cfg.flip_prob,
                cfg.max_retries,
                rng,
            )?;
            (image, seg, crop)
        } else {
            paired_random_resized_crop(sample, cfg.local_scale, cfg.local_side, cfg.flip_prob, rng)
        };
        let obj_mask = if cfg.malc {
            let m = patchify_mask(&seg, cfg.local_side, target, cfg.patch_size)?;
            // without object-aware cropping the target may be absent; fall
            // back to full attention for that view
            if m.iter().any(|&v| v != 0) {
                Some(m)
            } else {
                None
            }
        } else {
            None
        };
        let block = if cfg.pmlc && rng.gen_range(0.0..1.0) < cfg.block_mask_prob {
            let r = sample_block_ratio(cfg.block_ratio, rng);
            Some(block_mask(cfg.local_grid(), cfg.local_grid(), r, rng)?)
        } else {
            None
        };
        views.push(LocalView { image, seg, crop, obj_mask, block_mask: block });
    }
    Ok(views)
}

/// Assemble the full view bundle for one sample: target object, two
/// object-aware globals with patch masks, independent block masks, and
/// locals per the ablation flags.
pub fn build_view_bundle(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBundle> {
    cfg.validate()?;
    let target = sample_target_object(&sample.instance_map, cfg.sampling, rng)?;

    let raw_globals = if cfg.object_aware {
        object_aware_global_views(sample, target, cfg, rng)?
    } else {
        // plain multi-crop baseline: any crop is kept, masks are all-ones
        let g = cfg.global_grid();
        let make = |rng: &mut ChaCha8Rng| {
            let (image, seg, crop) =
                paired_random_resized_crop(sample, cfg.global_scale, cfg.global_side, cfg.flip_prob, rng);
            (image, seg, crop, vec![1u8; g * g])
        };
        [make(rng), make(rng)]
    };

    let globals = raw_globals.map(|(image, seg, crop, obj_mask)| {
        let block = if rng.gen_range(0.0..1.0) < cfg.block_mask_prob {
            let r = sample_block_ratio(cfg.block_ratio, rng);
            Some(block_mask(cfg.global_grid(), cfg.global_grid(), r, rng).expect("ratio in range"))
        } else {
            None
        };
        GlobalView { image, seg, crop, obj_mask, block_mask: block }
    });

    let locals = local_crops(sample, target, cfg, rng)?;
    Ok(ViewBundle { target_instance: target, globals, locals })
}

#[cfg(test)]
mod tests;
