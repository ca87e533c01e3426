//! Dense nearest-neighbor retrieval: a memory bank of patch features with
//! soft labels, softmax-weighted top-k label aggregation, bilinear
//! upsampling to pixels, and the mIoU scorer.

use crate::augment::SceneSample;
use crate::error::{OdisError, Result};
use crate::vit::{encode_image, ModelParams, ParamLayout, ViTConfig};
use crate::workers::Workers;

/// Reference patch features with soft class labels.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    /// L2-normalized keys.
    pub keys: Vec<Vec<f32>>,
    /// Soft labels over classes (background included), each summing to 1.
    pub labels: Vec<Vec<f32>>,
    pub classes: usize,
    pub subsample: usize,
    pub capacity: usize,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub(crate) fn normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

/// Soft label of one patch: average of pixel one-hot class labels inside
/// the patch.
pub fn patch_soft_labels(class_map: &[u8], side: usize, patch: usize, classes: usize) -> Vec<Vec<f32>> {
    let g = side / patch;
    let mut out = vec![vec![0.0f32; classes]; g * g];
    for (idx, &c) in class_map.iter().enumerate() {
        let y = idx / side;
        let x = idx % side;
        out[(y / patch) * g + x / patch][c as usize] += 1.0;
    }
    let inv = 1.0 / (patch * patch) as f32;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Encode every image unmasked and bank each f-th patch (deterministic
/// global stride over image-major, patch-minor order), truncated at
/// `capacity`.
pub fn build_memory_bank(
    params: &ModelParams<f32>,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    samples: &[SceneSample],
    classes: usize,
    subsample: usize,
    capacity: usize,
    workers: &Workers,
) -> Result<MemoryBank> {
    if subsample == 0 {
        return Err(OdisError::invalid("subsample factor must be positive"));
    }
    let hw = cfg.tokens();
    let per_image: Vec<Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)>> =
        workers.map_ordered(samples, |_, sample| {
            if sample.side != cfg.image_side {
                return Err(OdisError::invalid(format!(
                    "bank expects side {} samples, got {}",
                    cfg.image_side, sample.side
                )));
            }
            let (_, z_patches) = encode_image(params, layout, cfg, &sample.image, None)?;
            let keys: Vec<Vec<f32>> =
                (0..hw).map(|i| normalize(z_patches.row(i))).collect();
            let labels =
                patch_soft_labels(&sample.class_map(), sample.side, cfg.patch_size, classes);
            Ok((keys, labels))
        });

    let mut keys = Vec::new();
    let mut labels = Vec::new();
    let mut global_idx = 0usize;
    'outer: for r in per_image {
        let (k, l) = r?;
        for (key, label) in k.into_iter().zip(l) {
            if global_idx.is_multiple_of(subsample) {
                keys.push(key);
                labels.push(label);
                if keys.len() >= capacity {
                    break 'outer;
                }
            }
            global_idx += 1;
        }
    }
    Ok(MemoryBank { keys, labels, classes, subsample, capacity })
}

/// Top-k retrieval with softmax-normalized similarity weights. Keys and
/// queries are L2-normalized; the top k is selected by (similarity desc,
/// index asc) so the arithmetic order is fully determined.
pub fn dense_retrieve(
    queries: &[Vec<f32>],
    bank: &MemoryBank,
    k: usize,
    temp: f64,
) -> Result<Vec<Vec<f32>>> {
    if bank.is_empty() {
        return Err(OdisError::invalid("dense retrieval needs a nonempty bank"));
    }
    if k == 0 || k > bank.len() {
        return Err(OdisError::invalid(format!(
            "k = {k} outside 1..={}",
            bank.len()
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let qn = normalize(q);
        let mut sims: Vec<(f32, usize)> = bank
            .keys
            .iter()
            .enumerate()
            .map(|(i, key)| {
                let dot: f32 = key.iter().zip(&qn).map(|(&a, &b)| a * b).sum();
                (dot, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let max = top[0].0; // sorted descending
        let mut weights = Vec::with_capacity(k);
        let mut sum = 0.0f32;
        for &(s, _) in top {
            let w = (((s - max) as f64) / temp).exp() as f32;
            weights.push(w);
            sum += w;
        }
        let mut label = vec![0.0f32; bank.classes];
        for (&(_, i), &w) in top.iter().zip(&weights) {
            let wn = w / sum;
            for (acc, &lv) in label.iter_mut().zip(&bank.labels[i]) {
                *acc += wn * lv;
            }
        }
        out.push(label);
    }
    Ok(out)
}

/// Channelwise bilinear upsampling (corner alignment off) of an h x w
/// grid of soft labels to out_h x out_w pixels.
pub fn upsample_bilinear(
    grid: &[Vec<f32>],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Vec<f32>>> {
    if grid.len() != h * w {
        return Err(OdisError::invalid(format!(
            "grid has {} cells, expected {h}x{w}",
            grid.len()
        )));
    }
    if out_h < h || out_w < w {
        return Err(OdisError::invalid("output must be at least the grid size"));
    }
    let classes = grid[0].len();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let mut px = vec![0.0f32; classes];
            for c in 0..classes {
                let top = grid[y0 * w + x0][c] * (1.0 - tx) + grid[y0 * w + x1][c] * tx;
                let bot = grid[y1 * w + x0][c] * (1.0 - tx) + grid[y1 * w + x1][c] * tx;
                px[c] = top * (1.0 - ty) + bot * ty;
            }
            out.push(px);
        }
    }
    Ok(out)
}

pub fn argmax_labels(soft: &[Vec<f32>]) -> Vec<u8> {
    soft.iter()
        .map(|row| {
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean intersection-over-union over the classes present in either
/// raster; classes absent from both are skipped.
pub fn miou(pred: &[u8], gt: &[u8], class_count: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(OdisError::ShapeMismatch {
            op: "miou",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let mut inter = vec![0usize; class_count];
    let mut union = vec![0usize; class_count];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for c in 0..class_count {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Ok(1.0); // both rasters empty of every class
    }
    Ok(total / present as f64)
}

/// Dense retrieval protocol over a validation set: per-image patch
/// queries, label aggregation from the bank, bilinear upsampling to the
/// pixel grid, and the mean per-image mIoU.
pub fn dense_protocol(
    params: &ModelParams<f32>,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    bank: &MemoryBank,
    val: &[SceneSample],
    k: usize,
    temp: f64,
    workers: &Workers,
) -> Result<f64> {
    if val.is_empty() {
        return Err(OdisError::invalid("dense protocol needs validation samples"));
    }
    let grid = cfg.grid();
    let scores: Vec<Result<f64>> = workers.map_ordered(val, |_, sample| {
        let (_, z_patches) = encode_image(params, layout, cfg, &sample.image, None)?;
        let queries: Vec<Vec<f32>> =
            (0..cfg.tokens()).map(|i| z_patches.row(i).to_vec()).collect();
        let soft = dense_retrieve(&queries, bank, k, temp)?;
        let pixels = upsample_bilinear(&soft, grid, grid, sample.side, sample.side)?;
        let pred = argmax_labels(&pixels);
        miou(&pred, &sample.class_map(), bank.classes)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / val.len() as f64)
}
