//! Run configuration: defaults, then a `key = value` file, then command-line
//! overrides. Every key is typed and unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::ScaleMode;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::CcanConfig;
use crate::seed::derive_seed;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub model: CcanConfig,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    pub run_name: String,
    pub run_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Split plan CSV; empty means `<data.dir>/splits.csv`.
    pub split_file: String,
    pub split_k: usize,
    pub split_val_fraction: f64,
    pub split_fold: usize,
    pub eval_set: String,
    pub eval_checkpoint: String,
    pub explain_bag: String,
    pub explain_checkpoint: String,
    pub explain_out: String,
    pub explain_k: usize,
    pub bench_ns: Vec<usize>,
    pub bench_repeats: usize,
    pub bench_warmups: usize,
    pub bench_baseline: bool,
    pub sweep_models: Vec<String>,
    /// Empty means every fold of the plan.
    pub sweep_folds: Vec<usize>,
    pub preprocess_input: Vec<String>,
    /// Sidecars, one per input; empty means `<input>.meta` next to each image.
    pub preprocess_meta: Vec<String>,
    pub preprocess_out: String,
    pub preprocess_patch_microns: f64,
}

/// Root seed when none is configured: `CCAN_SEED` or 0.
pub fn env_seed() -> Result<u64> {
    match std::env::var("CCAN_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CCAN_SEED = {s:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            model: CcanConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticConfig {
                feature_dim: CcanConfig::default().feature_dim,
                ..SyntheticConfig::default()
            },
            run_name: "default".into(),
            run_dir: "runs".into(),
            data_dir: "data/synth".into(),
            split_file: String::new(),
            split_k: 4,
            split_val_fraction: 0.2,
            split_fold: 0,
            eval_set: "test".into(),
            eval_checkpoint: String::new(),
            explain_bag: String::new(),
            explain_checkpoint: String::new(),
            explain_out: String::new(),
            explain_k: 5,
            bench_ns: vec![250, 500, 1000, 2000, 4000],
            bench_repeats: 7,
            bench_warmups: 2,
            bench_baseline: true,
            sweep_models: vec!["ccan".into(), "mean-pool".into(), "max-pool".into()],
            sweep_folds: Vec::new(),
            preprocess_input: Vec::new(),
            preprocess_meta: Vec::new(),
            preprocess_out: String::new(),
            preprocess_patch_microns: crate::preprocess::PATCH_MICRONS,
        }
    }

    /// Defaults with the root seed taken from the environment.
    pub fn defaults() -> Result<Self> {
        Ok(Self::with_seed(env_seed()?))
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[String]| v.join(",");
        let nums = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let mut e: Vec<(&'static str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("jobs", self.jobs.to_string()),
            ("model.J", m.stages.to_string()),
            ("model.M", m.latents.to_string()),
            ("model.C", m.compression.to_string()),
            ("model.D_l", m.latent_dim.to_string()),
            ("model.D_f", m.feature_dim.to_string()),
            ("model.Z", m.repeats.to_string()),
            ("model.S", m.self_layers.to_string()),
            ("model.p_do", m.token_dropout.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.I", m.frequencies.to_string()),
            ("model.f_max", m.f_max.to_string()),
            ("model.scale_mode", m.scale_mode.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.append_raw_coords", m.append_raw_coords.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr_max", t.lr_max.to_string()),
            ("train.lr_min", t.lr_min.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            (
                "train.fractions",
                t.fractions.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("synth.n_bags", s.n_bags.to_string()),
            ("synth.min_tokens", s.tokens_per_bag.0.to_string()),
            ("synth.max_tokens", s.tokens_per_bag.1.to_string()),
            ("synth.D_f", s.feature_dim.to_string()),
            ("synth.witness_shift", s.witness_shift.to_string()),
            ("synth.min_witnesses", s.witness_count.0.to_string()),
            ("synth.max_witnesses", s.witness_count.1.to_string()),
            ("synth.grid_rows", s.grid.0.to_string()),
            ("synth.grid_cols", s.grid.1.to_string()),
            ("synth.num_classes", s.num_classes.to_string()),
            ("run.name", self.run_name.clone()),
            ("run.dir", self.run_dir.display().to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            ("split.file", self.split_file.clone()),
            ("split.k", self.split_k.to_string()),
            ("split.val_fraction", self.split_val_fraction.to_string()),
            ("split.fold", self.split_fold.to_string()),
            ("eval.set", self.eval_set.clone()),
            ("eval.checkpoint", self.eval_checkpoint.clone()),
            ("explain.bag", self.explain_bag.clone()),
            ("explain.checkpoint", self.explain_checkpoint.clone()),
            ("explain.out", self.explain_out.clone()),
            ("explain.k", self.explain_k.to_string()),
            ("bench.ns", nums(&self.bench_ns)),
            ("bench.repeats", self.bench_repeats.to_string()),
            ("bench.warmups", self.bench_warmups.to_string()),
            ("bench.baseline", self.bench_baseline.to_string()),
            ("sweep.models", list(&self.sweep_models)),
            ("sweep.folds", nums(&self.sweep_folds)),
            ("preprocess.input", list(&self.preprocess_input)),
            ("preprocess.meta", list(&self.preprocess_meta)),
            ("preprocess.out", self.preprocess_out.clone()),
            ("preprocess.patch_microns", self.preprocess_patch_microns.to_string()),
        ];
        e.sort_by(|a, b| a.0.cmp(b.0));
        e
    }

    pub fn keys() -> Vec<&'static str> {
        Self::with_seed(0).entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "model.J" => m.stages = parse(key, v)?,
            "model.M" => m.latents = parse(key, v)?,
            "model.C" => m.compression = parse(key, v)?,
            "model.D_l" => m.latent_dim = parse(key, v)?,
            "model.D_f" => m.feature_dim = parse(key, v)?,
            "model.Z" => m.repeats = parse(key, v)?,
            "model.S" => m.self_layers = parse(key, v)?,
            "model.p_do" => m.token_dropout = parse(key, v)?,
            "model.num_classes" => m.num_classes = parse(key, v)?,
            "model.I" => m.frequencies = parse(key, v)?,
            "model.f_max" => m.f_max = parse(key, v)?,
            "model.scale_mode" => m.scale_mode = parse::<ScaleMode>(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.append_raw_coords" => m.append_raw_coords = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr_max" => t.lr_max = parse(key, v)?,
            "train.lr_min" => t.lr_min = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.fractions" => t.fractions = parse_list(key, v)?,
            "synth.n_bags" => s.n_bags = parse(key, v)?,
            "synth.min_tokens" => s.tokens_per_bag.0 = parse(key, v)?,
            "synth.max_tokens" => s.tokens_per_bag.1 = parse(key, v)?,
            "synth.D_f" => s.feature_dim = parse(key, v)?,
            "synth.witness_shift" => s.witness_shift = parse(key, v)?,
            "synth.min_witnesses" => s.witness_count.0 = parse(key, v)?,
            "synth.max_witnesses" => s.witness_count.1 = parse(key, v)?,
            "synth.grid_rows" => s.grid.0 = parse(key, v)?,
            "synth.grid_cols" => s.grid.1 = parse(key, v)?,
            "synth.num_classes" => s.num_classes = parse(key, v)?,
            "run.name" => self.run_name = v.to_string(),
            "run.dir" => self.run_dir = v.into(),
            "data.dir" => self.data_dir = v.into(),
            "split.file" => self.split_file = v.to_string(),
            "split.k" => self.split_k = parse(key, v)?,
            "split.val_fraction" => self.split_val_fraction = parse(key, v)?,
            "split.fold" => self.split_fold = parse(key, v)?,
            "eval.set" => self.eval_set = v.to_string(),
            "eval.checkpoint" => self.eval_checkpoint = v.to_string(),
            "explain.bag" => self.explain_bag = v.to_string(),
            "explain.checkpoint" => self.explain_checkpoint = v.to_string(),
            "explain.out" => self.explain_out = v.to_string(),
            "explain.k" => self.explain_k = parse(key, v)?,
            "bench.ns" => self.bench_ns = parse_list(key, v)?,
            "bench.repeats" => self.bench_repeats = parse(key, v)?,
            "bench.warmups" => self.bench_warmups = parse(key, v)?,
            "bench.baseline" => self.bench_baseline = parse(key, v)?,
            "sweep.models" => self.sweep_models = parse_list(key, v)?,
            "sweep.folds" => self.sweep_folds = parse_list(key, v)?,
            "preprocess.input" => self.preprocess_input = parse_list(key, v)?,
            "preprocess.meta" => self.preprocess_meta = parse_list(key, v)?,
            "preprocess.out" => self.preprocess_out = v.to_string(),
            "preprocess.patch_microns" => self.preprocess_patch_microns = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file: one entry per line, `#` starts a
    /// comment, blank lines are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", no + 1))
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{origin}:{}: {msg}", no + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Config echo: sorted `key = value` lines, loadable by [`apply_text`].
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Seeds the model, trainer, generator and split from the root seed.
    pub fn resolved_model(&self) -> CcanConfig {
        CcanConfig {
            seed: derive_seed(self.seed, "model"),
            ..self.model.clone()
        }
    }

    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn resolved_synth(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: derive_seed(self.seed, "synth"),
            ..self.synth.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn split_path(&self) -> PathBuf {
        if self.split_file.is_empty() {
            self.data_dir.join("splits.csv")
        } else {
            PathBuf::from(&self.split_file)
        }
    }

    pub fn run_path(&self) -> PathBuf {
        self.run_dir.join(&self.run_name)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| {
        Error::Config(format!(
            "{key}: cannot parse {v:?} as {}: {e}",
            std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")
        ))
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Builds the configuration from an optional file and raw `--key value` /
/// `--key=value` arguments. A `--config FILE` pair among the arguments is
/// honoured as if given up front.
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut file: Option<PathBuf> = file.map(Path::to_path_buf);
    let mut it = overrides.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --key value, got {arg:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            file = Some(value.into());
        } else {
            pairs.push((key, value));
        }
    }
    let mut cfg = RunConfig::defaults()?;
    if let Some(f) = &file {
        cfg.apply_file(f)?;
    }
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    Ok(cfg)
}
