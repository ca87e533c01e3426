//! Command implementations behind the `odis` binary: dataset generation,
//! training, frozen-feature evaluation, and the gradient-check suite.
//! Each returns a library error; the binary maps errors to exit codes
//! (1 usage/config, 2 numeric failure).

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::augment::SceneSample;
use crate::config::{parse_scene_spec, RunConfig};
use crate::data::io::{read_dataset, read_manifest, split, write_dataset, DatasetManifest};
use crate::data::{generate_scene, SceneSpec};
use crate::distill::{full_loss_grad_check, run_training, TrainOutcome, TrainState};
use crate::error::{OdisError, Result};
use crate::eval::dense::{build_memory_bank, dense_protocol};
use crate::eval::{extract_features, knn_sweep, linear_probe};
use crate::rng::stream;
use crate::tensor::gradcheck::{primitive_suite, CheckReport, GRAD_TOL};
use crate::vit::{ModelParams, ParamLayout, ViTConfig};
use crate::workers::Workers;

const GEN_TAG: u64 = 0x9e4e;

/// Generate `count` scenes under `out` with a manifest.
pub fn cmd_gen_data(
    spec_path: Option<&Path>,
    out: &Path,
    count: usize,
    seed: u64,
    workers: &Workers,
) -> Result<DatasetManifest> {
    let spec: SceneSpec = match spec_path {
        Some(p) => parse_scene_spec(&std::fs::read_to_string(p)?)?,
        None => SceneSpec::default(),
    };
    spec.validate()?;
    let indices: Vec<usize> = (0..count).collect();
    let samples: Vec<Result<SceneSample>> = workers.map_ordered(&indices, |_, &i| {
        let mut rng = stream(seed, &[GEN_TAG, i as u64]);
        generate_scene(&spec, &mut rng)
    });
    let samples: Vec<SceneSample> = samples.into_iter().collect::<Result<_>>()?;
    write_dataset(&samples, out)
}

/// Train per the run configuration; checkpoints and the metrics stream go
/// to `out`. `resume` continues from an existing checkpoint bit-exactly.
pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    workers: &Workers,
) -> Result<TrainOutcome> {
    let cfg = RunConfig::load(config_path)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.to_flat_string())?;

    let data_dir = resolve_data_dir(config_path, &cfg.data_dir);
    let (_, samples) = read_dataset(&data_dir)?;
    run_training(
        &samples,
        &cfg.vit()?,
        &cfg.augment()?,
        &cfg.train()?,
        out,
        workers,
        resume,
    )
}

/// The data_dir key is taken relative to the config file's directory
/// unless absolute.
fn resolve_data_dir(config_path: &Path, data_dir: &str) -> PathBuf {
    let p = Path::new(data_dir);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub protocol: &'a str,
    pub use_masks: bool,
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
}

fn load_teacher(checkpoint: &Path, cfg: &RunConfig) -> Result<(ViTConfig, ModelParams<f32>, ParamLayout)> {
    let vit_cfg = cfg.vit()?;
    let state: TrainState<f32> = TrainState::load(checkpoint, &vit_cfg, &cfg.train()?)?;
    let layout = state.layout.clone();
    Ok((vit_cfg, state.teacher, layout))
}

/// Run one frozen-feature protocol and append its records (one JSON
/// object per line) to the results file. Returns the appended records.
pub fn cmd_eval(req: &EvalRequest, workers: &Workers) -> Result<Vec<serde_json::Value>> {
    if !matches!(req.protocol, "knn" | "linear" | "dense") {
        return Err(OdisError::config(format!(
            "unknown protocol '{}' (expected knn|linear|dense)",
            req.protocol
        )));
    }
    let cfg = match req.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ecfg = cfg.eval()?;
    let (vit_cfg, teacher, layout) = load_teacher(req.checkpoint, &cfg)?;

    let manifest = read_manifest(req.dataset)?;
    let (train_m, val_m) = split(&manifest, ecfg.split_fraction, ecfg.split_seed)?;
    let load = |m: &DatasetManifest| -> Result<Vec<SceneSample>> {
        m.records.iter().map(|r| m.load_sample(r)).collect()
    };
    let train_samples = load(&train_m)?;
    let val_samples = load(&val_m)?;

    let records = match req.protocol {
        "knn" => {
            let (train_feats, _) =
                extract_features(&teacher, &layout, &vit_cfg, &train_samples, req.use_masks, workers)?;
            let (val_feats, _) =
                extract_features(&teacher, &layout, &vit_cfg, &val_samples, req.use_masks, workers)?;
            let ((best_k, best_acc), sweep) =
                knn_sweep(&train_feats, &val_feats, &ecfg.knn_ks, ecfg.knn_temp)?;
            let _ = sweep;
            vec![json!({
                "protocol": "knn",
                "use_masks": req.use_masks,
                "k": best_k,
                "accuracy_or_miou": best_acc,
                "bank_size": train_feats.len(),
                "seed": cfg.seed,
            })]
        }
        "linear" => {
            let (train_feats, _) =
                extract_features(&teacher, &layout, &vit_cfg, &train_samples, req.use_masks, workers)?;
            let (val_feats, _) =
                extract_features(&teacher, &layout, &vit_cfg, &val_samples, req.use_masks, workers)?;
            let (_, best_acc) = linear_probe(
                &train_feats,
                &val_feats,
                &ecfg.probe_lrs,
                ecfg.probe_epochs,
                cfg.eval_seed,
            )?;
            vec![json!({
                "protocol": "linear",
                "use_masks": req.use_masks,
                "k": serde_json::Value::Null,
                "accuracy_or_miou": best_acc,
                "bank_size": train_feats.len(),
                "seed": cfg.seed,
            })]
        }
        "dense" => {
            let classes = manifest.max_class() as usize + 1;
            let mut out = Vec::new();
            for &factor in &ecfg.bank_factors {
                if ![1, 8, 64, 128].contains(&factor) {
                    eprintln!("note: nonstandard bank subsample factor {factor}");
                }
                let bank = build_memory_bank(
                    &teacher,
                    &layout,
                    &vit_cfg,
                    &train_samples,
                    classes,
                    factor,
                    ecfg.bank_cap,
                    workers,
                )?;
                let mut best: Option<(usize, f64)> = None;
                for &k in &ecfg.dense_ks {
                    if k > bank.len() {
                        continue;
                    }
                    let score = dense_protocol(
                        &teacher, &layout, &vit_cfg, &bank, &val_samples, k, ecfg.dense_temp,
                        workers,
                    )?;
                    if best.map(|(_, b)| score > b).unwrap_or(true) {
                        best = Some((k, score));
                    }
                }
                let (k, score) = best.ok_or_else(|| {
                    OdisError::invalid("no feasible k for the dense sweep (bank too small)")
                })?;
                out.push(json!({
                    "protocol": "dense",
                    "use_masks": req.use_masks,
                    "k": k,
                    "accuracy_or_miou": score,
                    "bank_size": bank.len(),
                    "subsample": factor,
                    "seed": cfg.seed,
                }));
            }
            out
        }
        _ => unreachable!("protocol validated above"),
    };

    if let Some(parent) = req.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = OpenOptions::new().create(true).append(true).open(req.out)?;
    for r in &records {
        serde_json::to_writer(&mut file, r)
            .map_err(|e| OdisError::invalid(format!("results serialization: {e}")))?;
        file.write_all(b"\n")?;
    }
    Ok(records)
}

pub struct GradCheckOutcome {
    pub reports: Vec<CheckReport>,
    pub passed: bool,
}

/// Finite-difference suite over every tape primitive plus the full
/// training loss on the micro model. `corrupt` deliberately tampers one
/// primitive's analytic gradient (negative-control fixture).
pub fn cmd_grad_check(corrupt: Option<&str>, full_loss_coords: usize) -> Result<GradCheckOutcome> {
    let mut reports = primitive_suite(0x90ad, corrupt)?;
    reports.push(full_loss_grad_check(Some(full_loss_coords))?);
    let passed = reports.iter().all(|r| r.passed());
    Ok(GradCheckOutcome { reports, passed })
}

/// One pass/fail line per operation, worst relative error included.
pub fn print_grad_report(out: &mut impl Write, outcome: &GradCheckOutcome) -> std::io::Result<()> {
    for r in &outcome.reports {
        writeln!(
            out,
            "{} {:<14} worst rel err {:.3e} (tol {GRAD_TOL:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.worst_rel_err
        )?;
    }
    Ok(())
}
