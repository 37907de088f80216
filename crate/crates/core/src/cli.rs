//! Command implementations behind the `ccan` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::bag::FeatureBag;
use crate::baseline::{BaselineConfig, BaselineKind};
use crate::bench::{bench_scaling, BenchOptions};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_config, RunConfig};
use crate::data::{
    generate_synthetic, load_dataset, patient_grouped_kfold, read_bag, save_dataset, Dataset, SplitPlan,
};
use crate::error::{Error, Result};
use crate::explain::{explain_bag, export_class_embeddings, export_heatmap, top_k_patches};
use crate::metrics::auc_for_outputs;
use crate::model::{CcanModel, MilModel};
use crate::preprocess::{parse_sidecar, process_image, read_pnm, PreprocessConfig, QC_HEADER};
use crate::seed::derive_seed;
use crate::train::{data_efficiency_sweep, predict_all, resolve, sweep_csv, train, ModelSpec};

pub const CHECKPOINT_FILE: &str = "checkpoint.ccan";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Preprocess,
    Synth,
    Split,
    Train,
    Eval,
    Sweep,
    Explain,
    Bench,
    Embed,
}

#[derive(Debug, Parser)]
#[command(name = "ccan", version, about = "Cascaded cross-attention MIL for whole-slide images")]
pub struct Cli {
    pub command: Command,
    /// `key = value` configuration file; flags given after it win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, e.g. `--model.J 3`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

/// Parses arguments, runs the command and returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    run_command(cli.command, &cfg)
}

pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<String> {
    match cmd {
        Command::Preprocess => preprocess(cfg),
        Command::Synth => synth(cfg),
        Command::Split => split(cfg),
        Command::Train => train_cmd(cfg),
        Command::Eval => eval(cfg),
        Command::Sweep => sweep(cfg),
        Command::Explain => explain(cfg),
        Command::Bench => bench(cfg),
        Command::Embed => embed(cfg),
    }
}

/// Exit status for a failed command: 2 for usage and configuration
/// mistakes, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

/// Creates `<run.dir>/<run.name>/reports` and echoes the configuration.
fn prepare_run(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_path();
    mkdir(&dir.join("reports"))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

fn checkpoint_path(cfg: &RunConfig, explicit: &str) -> PathBuf {
    if explicit.is_empty() {
        cfg.run_path().join(CHECKPOINT_FILE)
    } else {
        PathBuf::from(explicit)
    }
}

fn check_compatible(model: &crate::model::CcanConfig, ds: &Dataset) -> Result<()> {
    if let Some(b) = ds.bags.first() {
        if b.dim() != model.feature_dim {
            return Err(Error::Config(format!(
                "model.D_f = {} but the dataset has {}-dimensional features",
                model.feature_dim,
                b.dim()
            )));
        }
    }
    if ds.num_classes() > model.num_classes {
        return Err(Error::Config(format!(
            "model.num_classes = {} but the dataset has labels up to {}",
            model.num_classes,
            ds.num_classes() - 1
        )));
    }
    Ok(())
}

fn load_plan(cfg: &RunConfig) -> Result<SplitPlan> {
    let path = cfg.split_path();
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no split plan at {}; run `ccan split` first",
            path.display()
        )));
    }
    SplitPlan::read_csv(&path, cfg.split_seed())
}

fn preprocess(cfg: &RunConfig) -> Result<String> {
    if cfg.preprocess_input.is_empty() {
        return Err(Error::Usage("preprocess needs --preprocess.input IMAGE[,IMAGE...]".into()));
    }
    if !cfg.preprocess_meta.is_empty() && cfg.preprocess_meta.len() != cfg.preprocess_input.len() {
        return Err(Error::Config(format!(
            "preprocess.meta lists {} sidecars for {} inputs",
            cfg.preprocess_meta.len(),
            cfg.preprocess_input.len()
        )));
    }
    let out = if cfg.preprocess_out.is_empty() {
        cfg.data_dir.clone()
    } else {
        PathBuf::from(&cfg.preprocess_out)
    };
    mkdir(&out)?;
    let pcfg = PreprocessConfig {
        patch_microns: cfg.preprocess_patch_microns,
        feature_dim: cfg.model.feature_dim,
        seed: derive_seed(cfg.seed, "preprocess"),
        ..PreprocessConfig::default()
    };
    let mut bags = Vec::new();
    let mut qc = format!("{QC_HEADER}\n");
    let mut notes = String::new();
    for (i, input) in cfg.preprocess_input.iter().enumerate() {
        let img_path = PathBuf::from(input);
        let meta_path = match cfg.preprocess_meta.get(i) {
            Some(m) => PathBuf::from(m),
            None => img_path.with_extension("meta"),
        };
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let (mpp, meta) = parse_sidecar(&text)?;
        let img = read_pnm(&img_path, mpp)?;
        let (bag, report) = process_image(&img, &meta, &pcfg)?;
        qc.push_str(&report.csv_row());
        qc.push('\n');
        match bag {
            Some(b) => bags.push(b),
            None => {
                let _ = writeln!(notes, "skipped {}: no patch survived filtering", meta.bag_id);
            }
        }
    }
    write(&out.join("qc.csv"), &qc)?;
    if bags.is_empty() {
        return Err(Error::Data("no slide produced any patch".into()));
    }
    let n = bags.len();
    save_dataset(&Dataset { bags, witnesses: Vec::new() }, &out)?;
    Ok(format!("{notes}wrote {n} bags to {}", out.display()))
}

fn synth(cfg: &RunConfig) -> Result<String> {
    let ds = generate_synthetic(&cfg.resolved_synth())?;
    save_dataset(&ds, &cfg.data_dir)?;
    Ok(format!("wrote {} synthetic bags to {}", ds.len(), cfg.data_dir.display()))
}

fn split(cfg: &RunConfig) -> Result<String> {
    let ds = load_dataset(&cfg.data_dir)?;
    let plan = patient_grouped_kfold(&ds.bags, cfg.split_k, cfg.split_val_fraction, cfg.split_seed())?;
    let path = cfg.split_path();
    plan.write_csv(&path)?;
    Ok(format!("wrote {}-fold split of {} bags to {}", plan.k, ds.len(), path.display()))
}

fn train_cmd(cfg: &RunConfig) -> Result<String> {
    let mcfg = cfg.resolved_model();
    let tcfg = cfg.resolved_train();
    mcfg.validate()?;
    tcfg.validate()?;
    let ds = load_dataset(&cfg.data_dir)?;
    check_compatible(&mcfg, &ds)?;
    let plan = load_plan(cfg)?;
    let fold = plan.fold(cfg.split_fold)?;
    let dir = prepare_run(cfg)?;
    let mut model = CcanModel::<f32>::new(mcfg)?;
    let outcome = train(
        &mut model,
        &resolve(&ds, &fold.train)?,
        &resolve(&ds, &fold.val)?,
        &resolve(&ds, &fold.test)?,
        &tcfg,
    )?;
    let h = &outcome.history;
    h.write_csv(&dir.join("history.csv"))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    let test = h.test_auc_at_best.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    Ok(format!(
        "best epoch {} of {}: val AUC {:.4}, test AUC {test}; checkpoint {}",
        h.best_epoch,
        h.epochs.len(),
        h.best_val_auc,
        ckpt.display()
    ))
}

fn eval(cfg: &RunConfig) -> Result<String> {
    let ckpt = checkpoint_path(cfg, &cfg.eval_checkpoint);
    let model = load_checkpoint::<f32>(&ckpt)?;
    let ds = load_dataset(&cfg.data_dir)?;
    check_compatible(model.config(), &ds)?;
    let bags: Vec<&FeatureBag> = match cfg.eval_set.as_str() {
        "all" => ds.bags.iter().collect(),
        set @ ("train" | "val" | "test") => {
            let plan = load_plan(cfg)?;
            let fold = plan.fold(cfg.split_fold)?;
            let ids = match set {
                "train" => &fold.train,
                "val" => &fold.val,
                _ => &fold.test,
            };
            resolve(&ds, ids)?
        }
        other => {
            return Err(Error::Config(format!(
                "eval.set must be train, val, test or all, got {other:?}"
            )))
        }
    };
    let probs = predict_all(&model, &bags)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let auc = auc_for_outputs(&probs, &labels, model.num_classes())?;
    let dir = prepare_run(cfg)?;
    let mut csv = String::from("bag_id,label");
    for i in 0..probs.first().map_or(0, Vec::len) {
        let _ = write!(csv, ",p{i}");
    }
    csv.push('\n');
    for (b, p) in bags.iter().zip(&probs) {
        let _ = write!(csv, "{},{}", b.bag_id, b.label);
        for v in p {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let out = dir.join("reports").join(format!("predictions_{}.csv", cfg.eval_set));
    write(&out, &csv)?;
    Ok(format!("{} AUC {auc:.4} over {} bags; predictions {}", cfg.eval_set, bags.len(), out.display()))
}

fn model_specs(cfg: &RunConfig) -> Result<Vec<ModelSpec>> {
    let model = cfg.resolved_model();
    cfg.sweep_models
        .iter()
        .map(|name| {
            Ok(match name.as_str() {
                "ccan" => ModelSpec::Ccan(model.clone()),
                other => {
                    let kind: BaselineKind = other.parse()?;
                    ModelSpec::Baseline(BaselineConfig::like(kind, &model))
                }
            })
        })
        .collect()
}

fn sweep(cfg: &RunConfig) -> Result<String> {
    let tcfg = cfg.resolved_train();
    let specs = model_specs(cfg)?;
    let ds = load_dataset(&cfg.data_dir)?;
    check_compatible(&cfg.model, &ds)?;
    let plan = load_plan(cfg)?;
    let folds: Vec<usize> = if cfg.sweep_folds.is_empty() {
        (0..plan.k).collect()
    } else {
        cfg.sweep_folds.clone()
    };
    let dir = prepare_run(cfg)?;
    let rows = data_efficiency_sweep(&ds, &plan, &folds, &specs, &tcfg, cfg.jobs.max(1))?;
    let out = dir.join("reports").join("sweep.csv");
    write(&out, &sweep_csv(&rows))?;
    let mut s = String::new();
    for spec in &specs {
        for &f in &tcfg.fractions {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == spec.name() && r.fraction == f)
                .map(|r| r.test_auc)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(s, "{:<20} fraction {f:<5} mean test AUC {mean:.4}", spec.name());
        }
    }
    let _ = write!(s, "{} cells written to {}", rows.len(), out.display());
    Ok(s)
}

fn find_bag(cfg: &RunConfig, what: &str) -> Result<FeatureBag> {
    let p = Path::new(what);
    if p.is_file() {
        return read_bag(p);
    }
    let ds = load_dataset(&cfg.data_dir)?;
    ds.bags
        .into_iter()
        .find(|b| b.bag_id == what)
        .ok_or_else(|| Error::Data(format!("{what:?} is neither a bag file nor a bag id in {}", cfg.data_dir.display())))
}

fn explain(cfg: &RunConfig) -> Result<String> {
    if cfg.explain_checkpoint.is_empty() {
        return Err(Error::Usage("explain needs --explain.checkpoint FILE".into()));
    }
    if cfg.explain_bag.is_empty() {
        return Err(Error::Usage("explain needs --explain.bag FILE_OR_ID".into()));
    }
    let model = load_checkpoint::<f32>(Path::new(&cfg.explain_checkpoint))?;
    let bag = find_bag(cfg, &cfg.explain_bag)?;
    let map = explain_bag(&model, &bag)?;
    let prefix = if cfg.explain_out.is_empty() {
        let dir = cfg.run_path().join("reports");
        mkdir(&dir)?;
        dir.join(format!("{}_attention", bag.bag_id))
    } else {
        PathBuf::from(&cfg.explain_out)
    };
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let (csv, pgm) = export_heatmap(&map, &prefix)?;
    let (low, high) = top_k_patches(&map.scores, cfg.explain_k)?;
    let fmt = |idx: &[usize]| {
        idx.iter()
            .map(|&i| format!("({},{})={:.3}", map.coords[i].row, map.coords[i].col, map.scores[i]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!(
        "highest: {}\nlowest: {}\nheatmap {} and {}",
        fmt(&high),
        fmt(&low),
        csv.display(),
        pgm.display()
    ))
}

fn bench(cfg: &RunConfig) -> Result<String> {
    let opts = BenchOptions {
        ns: cfg.bench_ns.clone(),
        repeats: cfg.bench_repeats,
        warmups: cfg.bench_warmups,
        include_baseline: cfg.bench_baseline,
        ..BenchOptions::default()
    };
    let report = bench_scaling(&cfg.resolved_model(), &opts)?;
    let dir = prepare_run(cfg)?;
    let out = dir.join("reports").join("scaling.csv");
    write(&out, &report.to_csv())?;
    Ok(format!("{}\nrows written to {}", report.summary(), out.display()))
}

fn embed(cfg: &RunConfig) -> Result<String> {
    let ckpt = checkpoint_path(cfg, &cfg.eval_checkpoint);
    let model = load_checkpoint::<f32>(&ckpt)?;
    let ds = load_dataset(&cfg.data_dir)?;
    check_compatible(model.config(), &ds)?;
    let dir = prepare_run(cfg)?;
    let out = dir.join("reports").join("class_embeddings.csv");
    let bags: Vec<&FeatureBag> = ds.bags.iter().collect();
    export_class_embeddings(&model, &bags, &out)?;
    Ok(format!("class embeddings of {} bags written to {}", bags.len(), out.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_command_is_a_usage_error() {
        let err = Cli::try_parse_from(["ccan", "fly"]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("explain"), "{msg}");
    }

    #[test]
    fn overrides_after_command_are_collected() {
        let cli = Cli::try_parse_from(["ccan", "train", "--config", "x.txt", "--model.J", "2"]).unwrap();
        assert_eq!(cli.command, Command::Train);
        assert_eq!(cli.config.as_deref(), Some(Path::new("x.txt")));
        assert_eq!(cli.overrides, vec!["--model.J", "2"]);
    }

    #[test]
    fn explain_without_checkpoint_is_usage() {
        let cfg = RunConfig::with_seed(0);
        let e = run_command(Command::Explain, &cfg).unwrap_err();
        assert!(matches!(e, Error::Usage(_)));
        assert_eq!(exit_code(&e), 2);
    }
}
