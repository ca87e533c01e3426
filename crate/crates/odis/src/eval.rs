//! Frozen-feature evaluation: k-NN and linear-probe classification over
//! pooled object features, and dense nearest-neighbor retrieval over
//! patch features.

pub mod dense;

use rand::seq::SliceRandom;

use crate::augment::{apply_crop_to_image, apply_crop_to_map, patchify_mask, CropSpec, SceneSample};
use crate::error::{OdisError, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::vit::checkpoint::{read_records, write_records};
use crate::vit::{encode_image, ModelParams, ParamLayout, ViTConfig};
use crate::workers::Workers;

/// Frozen features for a set of samples, labeled by the primary object.
#[derive(Clone, Debug)]
pub struct FeatureTable {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
    /// Extraction mode tag: pooled with ground-truth masks or unmasked.
    pub masked: bool,
    pub dim: usize,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Container export with "feat/<id>" and "label/<id>" records.
    pub fn export(&self, path: &std::path::Path) -> Result<()> {
        let mut records = Vec::with_capacity(2 * self.len());
        for i in 0..self.len() {
            records.push((
                format!("feat/{}", self.ids[i]),
                Tensor::new(vec![self.dim], self.features[i].clone())?,
            ));
            records.push((
                format!("label/{}", self.ids[i]),
                Tensor::scalar(self.labels[i] as f32),
            ));
        }
        write_records(path, &records)
    }

    pub fn import(path: &std::path::Path, masked: bool) -> Result<Self> {
        let records = read_records(path)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        let mut pending: std::collections::BTreeMap<String, Vec<f32>> = Default::default();
        let mut label_map: std::collections::BTreeMap<String, u8> = Default::default();
        for (name, tensor) in records {
            if let Some(id) = name.strip_prefix("feat/") {
                pending.insert(id.to_string(), tensor.data().to_vec());
            } else if let Some(id) = name.strip_prefix("label/") {
                label_map.insert(id.to_string(), tensor.item() as u8);
            }
        }
        let mut dim = 0;
        for (id, feat) in pending {
            let label = *label_map
                .get(&id)
                .ok_or_else(|| OdisError::invalid(format!("feature {id} lacks a label record")))?;
            dim = feat.len();
            features.push(feat);
            labels.push(label);
            ids.push(id);
        }
        Ok(FeatureTable { features, labels, ids, masked, dim })
    }
}

fn l2_normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

/// Center-crop resize of a sample to the model's input side, with the
/// instance map transformed by the identical geometry.
fn to_model_view(sample: &SceneSample, side: usize) -> (Tensor<f32>, Vec<u16>) {
    let crop = CropSpec { x0: 0, y0: 0, w: sample.side, h: sample.side, flip: false };
    if sample.side == side {
        return (sample.image.clone(), sample.instance_map.clone());
    }
    (
        apply_crop_to_image(&sample.image, crop, side),
        apply_crop_to_map(&sample.instance_map, sample.side, crop, side),
    )
}

/// Pooled object features from the frozen backbone. With `use_masks`, the
/// primary object's ground-truth mask restricts pooling; a sample whose
/// mask binarizes to empty falls back to the all-ones mask (counted in
/// the second return value).
pub fn extract_features(
    params: &ModelParams<f32>,
    layout: &ParamLayout,
    cfg: &ViTConfig,
    samples: &[SceneSample],
    use_masks: bool,
    workers: &Workers,
) -> Result<(FeatureTable, usize)> {
    let rows: Vec<Result<(Vec<f32>, u8, bool)>> = workers.map_ordered(samples, |_, sample| {
        let (image, map) = to_model_view(sample, cfg.image_side);
        let label = *sample
            .labels
            .get(&1)
            .ok_or_else(|| OdisError::invalid("sample lacks the primary instance 1"))?;
        let mut fallback = false;
        let mask = if use_masks {
            let m = patchify_mask(&map, cfg.image_side, 1, cfg.patch_size)?;
            if m.iter().any(|&v| v != 0) {
                Some(m)
            } else {
                fallback = true;
                Some(vec![1u8; cfg.tokens()])
            }
        } else {
            None
        };
        let (z_obj, _) = encode_image(params, layout, cfg, &image, mask.as_deref())?;
        Ok((z_obj.data().to_vec(), label, fallback))
    });
    let mut features = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut ids = Vec::with_capacity(samples.len());
    let mut fallbacks = 0;
    for (i, r) in rows.into_iter().enumerate() {
        let (feat, label, fb) = r?;
        features.push(feat);
        labels.push(label);
        ids.push(format!("s{i:05}"));
        fallbacks += fb as usize;
    }
    Ok((
        FeatureTable { features, labels, ids, masked: use_masks, dim: cfg.embed_dim },
        fallbacks,
    ))
}

/// Temperature-weighted k-NN vote on cosine similarity: weight
/// exp(sim / temp), ties broken toward the smallest class id.
pub fn knn_classify(
    train: &FeatureTable,
    queries: &[Vec<f32>],
    k: usize,
    temp: f64,
) -> Result<Vec<u8>> {
    if train.is_empty() {
        return Err(OdisError::invalid("k-NN needs a nonempty feature table"));
    }
    if k == 0 || k > train.len() {
        return Err(OdisError::invalid(format!(
            "k = {k} outside 1..={}",
            train.len()
        )));
    }
    let keys: Vec<Vec<f32>> = train.features.iter().map(|f| l2_normalized(f)).collect();
    let n_classes = train.labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let qn = l2_normalized(q);
        let mut sims: Vec<(f32, usize)> = keys
            .iter()
            .enumerate()
            .map(|(i, key)| {
                let dot: f32 = key.iter().zip(&qn).map(|(&a, &b)| a * b).sum();
                (dot, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0f64; n_classes];
        for &(sim, i) in sims.iter().take(k) {
            votes[train.labels[i] as usize] += (sim as f64 / temp).exp();
        }
        let mut best = 0usize;
        for c in 1..n_classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

/// Sweep k values; returns (best_k, best_accuracy) plus the whole sweep.
pub fn knn_sweep(
    train: &FeatureTable,
    val: &FeatureTable,
    ks: &[usize],
    temp: f64,
) -> Result<((usize, f64), Vec<(usize, f64)>)> {
    let mut sweep = Vec::new();
    for &k in ks {
        if k > train.len() {
            continue;
        }
        let pred = knn_classify(train, &val.features, k, temp)?;
        sweep.push((k, accuracy(&pred, &val.labels)));
    }
    if sweep.is_empty() {
        return Err(OdisError::invalid("no feasible k in the sweep"));
    }
    let best = sweep
        .iter()
        .copied()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .unwrap();
    Ok((best, sweep))
}

/// Single affine layer with softmax cross-entropy, trained by minibatch
/// SGD with momentum on the frozen features for each learning rate in the
/// sweep; reports the best validation accuracy.
pub fn linear_probe(
    train: &FeatureTable,
    val: &FeatureTable,
    lrs: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if train.is_empty() || val.is_empty() {
        return Err(OdisError::invalid("linear probe needs nonempty splits"));
    }
    let d = train.dim;
    let classes = train
        .labels
        .iter()
        .chain(&val.labels)
        .copied()
        .max()
        .unwrap_or(0) as usize
        + 1;
    let batch = 32usize;
    let momentum = 0.9;

    let mut best: Option<(f64, f64)> = None;
    for (li, &lr) in lrs.iter().enumerate() {
        let mut w = vec![0.0f64; d * classes];
        let mut b = vec![0.0f64; classes];
        let mut vw = vec![0.0f64; d * classes];
        let mut vb = vec![0.0f64; classes];
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..epochs {
            let mut rng = stream(seed, &[0x11ea4, li as u64, epoch as u64]);
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut gw = vec![0.0f64; d * classes];
                let mut gb = vec![0.0f64; classes];
                for &i in chunk {
                    let x = &train.features[i];
                    let mut logits = b.clone();
                    for (j, &xv) in x.iter().enumerate() {
                        let xv = xv as f64;
                        for c in 0..classes {
                            logits[c] += xv * w[j * classes + c];
                        }
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                    let sum: f64 = probs.iter().sum();
                    for p in probs.iter_mut() {
                        *p /= sum;
                    }
                    probs[train.labels[i] as usize] -= 1.0;
                    for (j, &xv) in x.iter().enumerate() {
                        let xv = xv as f64;
                        for c in 0..classes {
                            gw[j * classes + c] += xv * probs[c];
                        }
                    }
                    for c in 0..classes {
                        gb[c] += probs[c];
                    }
                }
                let inv = 1.0 / chunk.len() as f64;
                for (vwi, gwi) in vw.iter_mut().zip(&gw) {
                    *vwi = momentum * *vwi + gwi * inv;
                }
                for (vbi, gbi) in vb.iter_mut().zip(&gb) {
                    *vbi = momentum * *vbi + gbi * inv;
                }
                for (wi, vwi) in w.iter_mut().zip(&vw) {
                    *wi -= lr * vwi;
                }
                for (bi, vbi) in b.iter_mut().zip(&vb) {
                    *bi -= lr * vbi;
                }
            }
        }
        // validation accuracy for this rate
        let mut hits = 0usize;
        for (x, &label) in val.features.iter().zip(&val.labels) {
            let mut logits = b.clone();
            for (j, &xv) in x.iter().enumerate() {
                let xv = xv as f64;
                for c in 0..classes {
                    logits[c] += xv * w[j * classes + c];
                }
            }
            let mut bestc = 0usize;
            for c in 1..classes {
                if logits[c] > logits[bestc] {
                    bestc = c;
                }
            }
            hits += (bestc == label as usize) as usize;
        }
        let acc = hits as f64 / val.len() as f64;
        if best.map(|(_, a)| acc > a).unwrap_or(true) {
            best = Some((lr, acc));
        }
    }
    Ok(best.expect("nonempty sweep"))
}
