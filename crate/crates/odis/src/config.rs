//! Flat key=value run configuration: one pair per line, '#' comments,
//! unknown keys rejected, every key defaulted. The fully resolved
//! configuration is echoed into the run directory and parses back to an
//! identical value.

use std::collections::BTreeMap;
use std::path::Path;

use crate::augment::{AugmentConfig, SamplingStrategy};
use crate::data::{Background, SceneSpec, NUM_SHAPE_CLASSES};
use crate::distill::{Objective, TrainConfig};
use crate::error::{OdisError, Result};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split_fraction: f64,
    pub split_seed: u64,
    pub knn_ks: Vec<usize>,
    pub knn_temp: f64,
    pub probe_lrs: Vec<f64>,
    pub probe_epochs: usize,
    pub dense_ks: Vec<usize>,
    pub dense_temp: f64,
    pub bank_factors: Vec<usize>,
    pub bank_cap: usize,
}

/// Every tunable of a run, flattened. Field order here is the echo order.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: String,
    // model
    pub image_side: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden_dim: usize,
    pub head_output_dim: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    // augmentation
    pub local_side: usize,
    pub n_local: usize,
    pub global_scale_min: f64,
    pub global_scale_max: f64,
    pub local_scale_min: f64,
    pub local_scale_max: f64,
    pub flip_prob: f64,
    pub block_mask_prob: f64,
    pub block_ratio_min: f64,
    pub block_ratio_max: f64,
    pub max_retries: usize,
    pub sampling: String,
    // objective and ablation toggles
    pub objective: String,
    pub loss_image: bool,
    pub pmlc: bool,
    pub oalc: bool,
    pub malc: bool,
    // optimization
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_start: f64,
    pub ema_every: u64,
    pub center_momentum: f64,
    pub checkpoint_every: u64,
    // evaluation
    pub eval_split: f64,
    pub eval_seed: u64,
    pub knn_ks: String,
    pub knn_temp: f64,
    pub probe_lrs: String,
    pub probe_epochs: usize,
    pub dense_ks: String,
    pub dense_temp: f64,
    pub bank_factors: String,
    pub bank_cap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: "data".into(),
            image_side: 32,
            patch_size: 4,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            head_hidden_dim: 128,
            head_output_dim: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            local_side: 16,
            n_local: 10,
            global_scale_min: 0.32,
            global_scale_max: 1.0,
            local_scale_min: 0.05,
            local_scale_max: 0.32,
            flip_prob: 0.5,
            block_mask_prob: 0.5,
            block_ratio_min: 0.1,
            block_ratio_max: 0.5,
            max_retries: 20,
            sampling: "area".into(),
            objective: "odis".into(),
            loss_image: false,
            pmlc: false,
            oalc: false,
            malc: false,
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
            eval_split: 0.875,
            eval_seed: 0,
            knn_ks: "1,5,10,20".into(),
            knn_temp: 0.07,
            probe_lrs: "0.001,0.01,0.1".into(),
            probe_epochs: 20,
            dense_ks: "5,10,30".into(),
            dense_temp: 0.07,
            bank_factors: "1,8,64,128".into(),
            bank_cap: 100000,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        fn apply(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $(stringify!($key) => {
                    cfg.$key = parse_value(key, value)?;
                    Ok(())
                })*
                other => Err(OdisError::config(format!("unknown config key '{other}'"))),
            }
        }

        fn echo(cfg: &RunConfig, out: &mut String) {
            $(out.push_str(&format!("{} = {}\n", stringify!($key), cfg.$key));)*
        }
    };
}

config_keys!(
    seed, data_dir,
    image_side, patch_size, depth, embed_dim, heads, mlp_ratio,
    head_hidden_dim, head_output_dim, student_temp, teacher_temp,
    local_side, n_local, global_scale_min, global_scale_max,
    local_scale_min, local_scale_max, flip_prob, block_mask_prob,
    block_ratio_min, block_ratio_max, max_retries, sampling,
    objective, loss_image, pmlc, oalc, malc,
    steps, batch_size, lr, warmup_frac, weight_decay, grad_clip,
    ema_start, ema_every, center_momentum, checkpoint_every,
    eval_split, eval_seed, knn_ks, knn_temp, probe_lrs, probe_epochs,
    dense_ks, dense_temp, bank_factors, bank_cap,
);

trait FromConfigValue: Sized {
    fn from_value(v: &str) -> Option<Self>;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {
        $(impl FromConfigValue for $t {
            fn from_value(v: &str) -> Option<Self> {
                v.parse().ok()
            }
        })*
    };
}
via_fromstr!(u64, usize, f64, bool);

impl FromConfigValue for String {
    fn from_value(v: &str) -> Option<Self> {
        Some(v.to_string())
    }
}

fn parse_value<T: FromConfigValue>(key: &str, value: &str) -> Result<T> {
    T::from_value(value)
        .ok_or_else(|| OdisError::config(format!("bad value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Parse flat text: `key = value` lines, blank lines, '#' comments.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                OdisError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            apply(&mut cfg, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Fully resolved flat text; `parse` of this is `==` to self.
    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        echo(self, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.vit()?.validate()?;
        self.augment()?.validate()?;
        let _ = self.objective()?;
        let _ = self.eval()?;
        if self.batch_size == 0 {
            return Err(OdisError::config("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn vit(&self) -> Result<ViTConfig> {
        Ok(ViTConfig {
            image_side: self.image_side,
            patch_size: self.patch_size,
            channels: 3,
            depth: self.depth,
            embed_dim: self.embed_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            head_hidden_dim: self.head_hidden_dim,
            head_output_dim: self.head_output_dim,
            student_temp: self.student_temp,
            teacher_temp: self.teacher_temp,
        })
    }

    pub fn objective(&self) -> Result<Objective> {
        Objective::parse(&self.objective)
    }

    pub fn sampling_strategy(&self) -> Result<SamplingStrategy> {
        match self.sampling.as_str() {
            "area" => Ok(SamplingStrategy::Area),
            "uniform" => Ok(SamplingStrategy::Uniform),
            other => Err(OdisError::config(format!(
                "unknown sampling '{other}' (expected area|uniform)"
            ))),
        }
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        Ok(AugmentConfig {
            global_side: self.image_side,
            local_side: self.local_side,
            n_local: self.n_local,
            patch_size: self.patch_size,
            global_scale: (self.global_scale_min, self.global_scale_max),
            local_scale: (self.local_scale_min, self.local_scale_max),
            flip_prob: self.flip_prob,
            block_mask_prob: self.block_mask_prob,
            block_ratio: (self.block_ratio_min, self.block_ratio_max),
            max_retries: self.max_retries,
            sampling: self.sampling_strategy()?,
            // the image-level baseline trains on plain crops
            object_aware: self.objective()? == Objective::Odis,
            pmlc: self.pmlc,
            oalc: self.oalc,
            malc: self.malc,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            objective: self.objective()?,
            loss_image: self.loss_image,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ema_start: self.ema_start,
            ema_every: self.ema_every,
            center_momentum: self.center_momentum,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            split_fraction: self.eval_split,
            split_seed: self.eval_seed,
            knn_ks: parse_list(&self.knn_ks, "knn_ks")?,
            knn_temp: self.knn_temp,
            probe_lrs: parse_list(&self.probe_lrs, "probe_lrs")?,
            probe_epochs: self.probe_epochs,
            dense_ks: parse_list(&self.dense_ks, "dense_ks")?,
            dense_temp: self.dense_temp,
            bank_factors: parse_list(&self.bank_factors, "bank_factors")?,
            bank_cap: self.bank_cap,
        })
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, key: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| OdisError::config(format!("bad list entry '{v}' in {key}")))
        })
        .collect()
}

/// Flat scene specification for dataset generation, same syntax.
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            OdisError::config(format!("line {}: expected key = value", lineno + 1))
        })?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    for (key, value) in pairs {
        match key.as_str() {
            "canvas_side" => spec.canvas_side = parse_value(&key, &value)?,
            "objects_min" => spec.object_count.0 = parse_value(&key, &value)?,
            "objects_max" => spec.object_count.1 = parse_value(&key, &value)?,
            "classes" => spec.num_classes = parse_value(&key, &value)?,
            "size_min" => spec.size_range.0 = parse_value(&key, &value)?,
            "size_max" => spec.size_range.1 = parse_value(&key, &value)?,
            "occlusion" => spec.occlusion = parse_value(&key, &value)?,
            "background" => spec.background = Background::parse(&value)?,
            other => {
                return Err(OdisError::config(format!(
                    "unknown scene spec key '{other}'"
                )))
            }
        }
    }
    spec.validate()?;
    let _ = NUM_SHAPE_CLASSES;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let echoed = cfg.to_flat_string();
        let back = RunConfig::parse(&echoed).unwrap();
        assert_eq!(cfg, back, "parse(echo(config)) must equal the config");
    }

    #[test]
    fn overrides_and_comments() {
        let text = "\n# a comment\nsteps = 12  # trailing comment\nobjective = ibot\nknn_ks = 1,3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.steps, 12);
        assert_eq!(cfg.objective().unwrap(), Objective::Ibot);
        assert_eq!(cfg.eval().unwrap().knn_ks, vec![1, 3]);
        // round trip preserves the override
        let back = RunConfig::parse(&cfg.to_flat_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("nonsense = 1\n").is_err());
        assert!(RunConfig::parse("steps = many\n").is_err());
        assert!(RunConfig::parse("objective = dino2\n").is_err());
        assert!(RunConfig::parse("image_side = 33\n").is_err(), "validation runs");
    }

    #[test]
    fn scene_spec_parsing() {
        let spec = parse_scene_spec("canvas_side = 16\nobjects_min = 1\nobjects_max = 2\nbackground = flat\n").unwrap();
        assert_eq!(spec.canvas_side, 16);
        assert_eq!(spec.object_count, (1, 2));
        assert_eq!(spec.background, Background::Flat);
        assert!(parse_scene_spec("mystery = 4\n").is_err());
        assert!(parse_scene_spec("objects_min = 5\nobjects_max = 2\n").is_err());
    }
}
