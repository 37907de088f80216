//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ccan::attention::ScaleMode;
use ccan::bag::FeatureBag;
use ccan::baseline::{BaselineConfig, BaselineKind, BaselineModel};
use ccan::bench::{bench_scaling, count_macs, instrumented_macs, linear_fit, random_bag, BenchOptions};
use ccan::config::RunConfig;
use ccan::data::{decode_bag, encode_bag, generate_synthetic, patient_grouped_kfold, Dataset, SplitPlan};
use ccan::explain::{explain_bag, rollout_stage};
use ccan::gradcheck::{grad_check_with, GradCheckOptions, Stencil};
use ccan::metrics::{auc_binary, auc_macro_ovr};
use ccan::model::{CcanConfig, CcanModel, MilModel, Mode};
use ccan::preprocess::{classify_patch, process_image, PatchVerdict, PreprocessConfig, RasterImage, SlideMeta};
use ccan::seed::rng_for;
use ccan::train::{data_efficiency_sweep, resolve, train, ModelSpec};
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy_config(seed: u64) -> CcanConfig {
    CcanConfig {
        stages: 2,
        latents: 8,
        compression: 2,
        latent_dim: 16,
        feature_dim: 12,
        repeats: 1,
        self_layers: 2,
        token_dropout: 0.0,
        frequencies: 2,
        seed,
        ..CcanConfig::default()
    }
}

fn c1_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let model = CcanModel::<f64>::new(toy_config(seed)).map_err(|e| e.to_string())?;
        let bag = random_bag(20, 12, 100 + seed).map_err(|e| e.to_string())?;
        let label = (seed % 2) as u8;
        let mut params = model.params().clone();
        let f = |p: &ccan::params::ParamStore<f64>, g: &mut ccan::autograd::Graph<f64>| {
            let mut m = model.clone();
            *m.params_mut() = p.clone();
            let fv = m.forward_graph(g, &bag, Mode::Eval, false)?;
            m.loss(g, &fv, label)
        };
        let opts = GradCheckOptions {
            eps: 1e-3,
            stencil: Stencil::Central4,
            max_coords_per_param: Some(24),
        };
        let report = grad_check_with(f, &mut params, opts).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_err);
    }
    check(worst < 1e-3, format!("max relative error {worst:.2e} over 5 seeds (< 1e-3)"))
}

fn random_config<R: Rng>(rng: &mut R) -> CcanConfig {
    loop {
        let c = draw_config(rng);
        if c.validate().is_ok() {
            return c;
        }
    }
}

fn draw_config<R: Rng>(rng: &mut R) -> CcanConfig {
    let heads = [1, 2][rng.random_range(0..2)];
    CcanConfig {
        stages: rng.random_range(1..=3),
        latents: rng.random_range(2..=12),
        compression: rng.random_range(1..=3),
        latent_dim: heads * rng.random_range(2..=8),
        feature_dim: rng.random_range(1..=10),
        repeats: rng.random_range(1..=2),
        self_layers: rng.random_range(0..=2),
        token_dropout: rng.random_range(0.0..0.5),
        frequencies: rng.random_range(1..=3),
        scale_mode: if rng.random_bool(0.5) { ScaleMode::Queries } else { ScaleMode::HeadDim },
        heads,
        num_classes: rng.random_range(2..=4),
        append_raw_coords: rng.random_bool(0.5),
        seed: rng.random(),
        ..CcanConfig::default()
    }
}

fn c2_attention_invariants() -> Outcome {
    let mut rng = rng_for(2, "c2");
    let (mut worst_row, mut worst_roll) = (0.0f64, 0.0f64);
    let mut records = 0usize;
    for _ in 0..50 {
        let cfg = random_config(&mut rng);
        let n = rng.random_range(1..=30);
        let model = CcanModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let bag = random_bag(n, cfg.feature_dim, rng.random()).map_err(|e| e.to_string())?;
        let mut drop = rng_for(rng.random(), "dropout");
        for mode in [Mode::Eval, Mode::Train(&mut drop)] {
            let out = model.forward(&bag, mode).map_err(|e| e.to_string())?;
            for st in &out.stages {
                for r in &st.records {
                    worst_row = worst_row.max(r.max_row_sum_error());
                    records += 1;
                }
                let roll = rollout_stage(st).map_err(|e| e.to_string())?;
                worst_roll = worst_roll.max((roll.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(
        worst_row < 1e-5 && worst_roll < 1e-4,
        format!("{records} matrices: row-sum error {worst_row:.1e}, rollout sum error {worst_roll:.1e}"),
    )
}

fn c3_permutation() -> Outcome {
    let mut rng = rng_for(3, "c3");
    let mut worst = 0.0f64;
    for i in 0..20 {
        let cfg = CcanConfig {
            latent_dim: 16,
            ..random_config(&mut rng)
        };
        let model = CcanModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let n = rng.random_range(2..=40);
        let bag = random_bag(n, cfg.feature_dim, 1000 + i).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = model.predict(&bag).map_err(|e| e.to_string())?;
        let b = model.predict(&bag.permuted(&perm)).map_err(|e| e.to_string())?;
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst < 1e-4, format!("max probability change {worst:.1e} over 20 bags (< 1e-4)"))
}

/// A mid-sized configuration whose forward pass at N = 4000 is quick enough
/// to time repeatedly on one core.
fn bench_config() -> CcanConfig {
    CcanConfig {
        stages: 3,
        latents: 64,
        latent_dim: 64,
        feature_dim: 256,
        token_dropout: 0.0,
        ..CcanConfig::default()
    }
}

fn c4_scaling() -> Outcome {
    let ns = [250usize, 500, 1000, 2000, 4000];
    let table = CcanConfig::default();
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let y: Vec<f64> = ns.iter().map(|&n| count_macs(&table, n) as f64).collect();
    let fit = linear_fit(&x, &y).map_err(|e| e.to_string())?;

    let cfg = bench_config();
    let model = CcanModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut probe_err = 0.0f64;
    for &n in &ns {
        let bag = random_bag(n, cfg.feature_dim, n as u64).map_err(|e| e.to_string())?;
        let measured = instrumented_macs(&model, &bag).map_err(|e| e.to_string())? as f64;
        let predicted = count_macs(&cfg, n) as f64;
        probe_err = probe_err.max((measured - predicted).abs() / predicted);
    }

    let base = BaselineModel::<f32>::new(BaselineConfig::like(BaselineKind::FullSelfAttention, &table))
        .map_err(|e| e.to_string())?;
    let quadruples = ns.iter().all(|&n| base.attention_term_macs(2 * n) == 4 * base.attention_term_macs(n));

    let opts = BenchOptions {
        ns: ns.to_vec(),
        repeats: 5,
        warmups: 1,
        include_baseline: false,
        ..BenchOptions::default()
    };
    let report = bench_scaling(&cfg, &opts).map_err(|e| e.to_string())?;
    let ratio = report.ccan_time_ratio(4000, 500).unwrap_or(f64::INFINITY);
    check(
        fit.r2 > 0.999 && probe_err < 0.01 && quadruples && ratio < 16.0,
        format!(
            "MAC fit R² {:.6}, probe error {:.2e}, baseline 4x on doubling {quadruples}, time(4000)/time(500) {ratio:.2}",
            fit.r2, probe_err
        ),
    )
}

/// Synthetic witness task used by criteria 5 to 7.
fn easy_run() -> RunConfig {
    let mut c = RunConfig::with_seed(0);
    for (k, v) in [
        ("synth.D_f", "8"),
        ("synth.n_bags", "200"),
        ("synth.witness_shift", "4"),
        ("model.D_f", "8"),
        ("model.J", "2"),
        ("model.M", "16"),
        ("model.D_l", "64"),
        ("model.S", "1"),
        ("model.I", "2"),
        ("model.p_do", "0.1"),
        ("train.epochs", "30"),
        ("train.batch_size", "8"),
        ("train.lr_max", "0.001"),
        ("train.lr_min", "0.00001"),
        ("split.k", "4"),
    ] {
        c.set(k, v).expect("valid key");
    }
    c
}

/// One witness per positive bag, shift 2, and small bags so that the gap
/// between averaging and selecting tokens is large.
fn hard_run() -> RunConfig {
    let mut c = easy_run();
    for (k, v) in [
        ("synth.n_bags", "2000"),
        ("synth.witness_shift", "2"),
        ("synth.min_witnesses", "1"),
        ("synth.max_witnesses", "1"),
        ("synth.min_tokens", "4"),
        ("synth.max_tokens", "8"),
        ("model.M", "8"),
        ("model.D_l", "16"),
        ("model.p_do", "0"),
        ("train.lr_max", "0.003"),
        ("train.fractions", "1"),
    ] {
        c.set(k, v).expect("valid key");
    }
    c
}

fn dataset(c: &RunConfig) -> Result<(Dataset, SplitPlan), String> {
    let ds = generate_synthetic(&c.resolved_synth()).map_err(|e| e.to_string())?;
    let plan = patient_grouped_kfold(&ds.bags, c.split_k, c.split_val_fraction, c.split_seed())
        .map_err(|e| e.to_string())?;
    Ok((ds, plan))
}

struct EasyModels {
    ds: Dataset,
    plan: SplitPlan,
    models: Vec<CcanModel<f32>>,
}

fn train_easy() -> Result<(EasyModels, Vec<f64>), String> {
    let c = easy_run();
    let (ds, plan) = dataset(&c)?;
    let mut models = Vec::new();
    let mut aucs = Vec::new();
    for fold in &plan.folds {
        let mut model = CcanModel::<f32>::new(c.resolved_model()).map_err(|e| e.to_string())?;
        let r = |ids: &[String]| resolve(&ds, ids).map_err(|e| e.to_string());
        let out = train(&mut model, &r(&fold.train)?, &r(&fold.val)?, &r(&fold.test)?, &c.resolved_train())
            .map_err(|e| e.to_string())?;
        aucs.push(out.history.test_auc_at_best.unwrap_or(f64::NAN));
        models.push(model);
    }
    Ok((EasyModels { ds, plan, models }, aucs))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c5_learnability(easy_aucs: &[f64]) -> Outcome {
    let easy = mean(easy_aucs);

    let c = hard_run();
    let (ds, plan) = dataset(&c)?;
    let model = c.resolved_model();
    let specs = [
        ModelSpec::Ccan(model.clone()),
        ModelSpec::Baseline(BaselineConfig::like(BaselineKind::MeanPool, &model)),
    ];
    let folds: Vec<usize> = (0..plan.k).collect();
    let rows = data_efficiency_sweep(&ds, &plan, &folds, &specs, &c.resolved_train(), 1).map_err(|e| e.to_string())?;
    let by = |name: &str| mean(&rows.iter().filter(|r| r.model == name).map(|r| r.test_auc).collect::<Vec<_>>());
    let (ccan, pool) = (by("ccan"), by("mean-pool"));
    check(
        easy >= 0.90 && ccan - pool >= 0.05,
        format!(
            "shift 4: CCAN mean test AUC {easy:.4} (>= 0.90); hard variant: CCAN {ccan:.4} vs mean-pool {pool:.4}, gap {:.4} (>= 0.05)",
            ccan - pool
        ),
    )
}

fn c6_sweep() -> Outcome {
    let mut c = easy_run();
    c.set("train.epochs", "10").unwrap();
    c.set("train.fractions", "0.02,0.05,0.10,0.25,0.50,0.75,1.00").unwrap();
    let (ds, plan) = dataset(&c)?;
    let folds: Vec<usize> = (0..plan.k).collect();
    let specs = [ModelSpec::Ccan(c.resolved_model())];
    let rows = data_efficiency_sweep(&ds, &plan, &folds, &specs, &c.resolved_train(), 1).map_err(|e| e.to_string())?;
    let at = |f: f64| mean(&rows.iter().filter(|r| r.fraction == f).map(|r| r.test_auc).collect::<Vec<_>>());
    let curve: Vec<String> = c.train.fractions.iter().map(|&f| format!("{f}:{:.3}", at(f))).collect();
    check(
        rows.len() == 28 && at(1.0) >= at(0.02),
        format!("{} cells; mean test AUC by fraction {}", rows.len(), curve.join(" ")),
    )
}

fn c7_witness_attention(easy: &EasyModels) -> Outcome {
    let (mut hits, mut total) = (0usize, 0usize);
    let index = easy.ds.index_of();
    for (fold, model) in easy.plan.folds.iter().zip(&easy.models) {
        for id in &fold.test {
            let i = index[id.as_str()];
            let bag: &FeatureBag = &easy.ds.bags[i];
            if bag.label == 0 {
                continue;
            }
            let map = explain_bag(model, bag).map_err(|e| e.to_string())?;
            let w = &easy.ds.witnesses[i];
            let pick = |want: bool| {
                let v: Vec<f64> = map.scores.iter().zip(w).filter(|(_, &m)| m == want).map(|(s, _)| *s).collect();
                mean(&v)
            };
            total += 1;
            if pick(true) > pick(false) {
                hits += 1;
            }
        }
    }
    let share = hits as f64 / total as f64;
    check(
        share >= 0.8,
        format!("witness attention above background in {hits}/{total} positive test bags ({:.1}%)", 100.0 * share),
    )
}

/// O(n²) pairwise AUC.
fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn c8_metrics() -> Outcome {
    let mut rng = rng_for(8, "c8");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=60);
        let k = rng.random_range(2..=4);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse grid so ties are common.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.random_range(0..8) as f64 / 8.0).collect())
            .collect();
        let col0: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        let bin: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let fast = auc_binary(&col0, &bin).map_err(|e| e.to_string())?;
        worst = worst.max((fast - brute_auc(&col0, &bin)).abs());

        let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
        let mut brute = 0.0;
        for &c in &present {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
            brute += brute_auc(&s, &l);
        }
        brute /= present.len() as f64;
        if present.len() == k {
            let fast = auc_macro_ovr(&scores, &labels, k).map_err(|e| e.to_string())?;
            worst = worst.max((fast - brute).abs());
        }
    }
    let example = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    check(
        worst < 1e-12 && example == 0.75,
        format!("max deviation from brute force {worst:.1e} over 200 instances; worked example {example}"),
    )
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// 3×2 patches at 1 µm per pixel: one white, one flat gray, four textured.
fn fixture_image() -> RasterImage {
    let (w, h) = (768usize, 512usize);
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (pr, pc) = (y / 256, x / 256);
            let v: [u8; 3] = match (pr, pc) {
                (0, 0) => [255, 255, 255],
                (0, 1) => [128, 128, 128],
                _ => {
                    let check = ((x / 16 + y / 16) % 2) as u8;
                    let t = ((x * 7 + y * 13 + pr * 31 + pc * 17) % 64) as u8;
                    [40 + 120 * check + t, 30 + t, 90 + 60 * check]
                }
            };
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&v);
        }
    }
    RasterImage::new(w, h, 3, px, 1.0).unwrap()
}

const GOLDEN_FIXTURE_HASH: u64 = 0x59f292bbb71525cb;

fn c9_preprocess() -> Outcome {
    let cfg = PreprocessConfig {
        feature_dim: 32,
        seed: 9,
        ..PreprocessConfig::default()
    };
    let white = vec![255u8; 256 * 256 * 3];
    let flat = vec![150u8; 256 * 256 * 3];
    let white_ok = classify_patch(&white, &cfg) == PatchVerdict::White;
    let flat_ok = classify_patch(&flat, &cfg) == PatchVerdict::Blurry;

    let meta = SlideMeta {
        bag_id: "fixture-é".into(),
        patient_id: "p".into(),
        label: 1,
    };
    let img = fixture_image();
    let run = || -> Result<(Vec<u8>, FeatureBag, ccan::preprocess::QcReport), String> {
        let (bag, qc) = process_image(&img, &meta, &cfg).map_err(|e| e.to_string())?;
        let bag = bag.ok_or("fixture produced no bag")?;
        Ok((encode_bag(&bag).map_err(|e| e.to_string())?, bag, qc))
    };
    let (a, bag, qc) = run()?;
    let (b, _, _) = run()?;
    let hash = fnv1a(&a);
    let round = decode_bag(&a).map_err(|e| e.to_string())? == bag;
    let qc_ok = (qc.total, qc.white_rejected, qc.blur_rejected, qc.kept) == (6, 1, 1, 4);
    check(
        white_ok && flat_ok && a == b && hash == GOLDEN_FIXTURE_HASH && round && qc_ok,
        format!(
            "white rejected {white_ok}, flat blur-rejected {flat_ok}, QC {}/{}/{}/{}, identical bytes {}, hash {hash:#018x}, round trip {round}",
            qc.total, qc.white_rejected, qc.blur_rejected, qc.kept, a == b
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ccan"))
        .args(args)
        .current_dir(dir)
        .env_remove("CCAN_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("ccan {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn c10_reproducibility() -> Outcome {
    let config = "\
seed = 7
model.J = 2
model.M = 8
model.D_l = 16
model.D_f = 16
model.p_do = 0.5
synth.D_f = 16
synth.n_bags = 40
synth.max_tokens = 30
train.epochs = 3
train.batch_size = 4
train.lr_max = 0.001
";
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("run.txt"), config).map_err(|e| e.to_string())?;
        for cmd in ["synth", "split", "train"] {
            cli(dir.path(), &[cmd, "--config", "run.txt", "--run.name", "r"])?;
        }
        let run = dir.path().join("runs").join("r");
        let read = |f: &str| std::fs::read(run.join(f)).map_err(|e| e.to_string());
        outputs.push((read("history.csv")?, read("checkpoint.ccan")?));
    }
    let same_history = outputs[0].0 == outputs[1].0;
    let same_ckpt = outputs[0].1 == outputs[1].1;
    check(
        same_history && same_ckpt,
        format!(
            "history identical {same_history} ({} bytes), checkpoint identical {same_ckpt} ({} bytes)",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, r: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n:>2} {name:<26} PASS  {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name:<26} FAIL  {d} [{secs:.1}s]");
            }
        }
    };
    let t = Instant::now();
    report(1, "gradient correctness", t, c1_gradients());
    let t = Instant::now();
    report(2, "attention invariants", t, c2_attention_invariants());
    let t = Instant::now();
    report(3, "permutation invariance", t, c3_permutation());
    let t = Instant::now();
    report(4, "linear scaling", t, c4_scaling());
    let t = Instant::now();
    let easy = train_easy();
    match &easy {
        Ok((_, aucs)) => report(5, "learnability", t, c5_learnability(aucs)),
        Err(e) => report(5, "learnability", t, Err(e.clone())),
    }
    let t = Instant::now();
    report(6, "data-efficiency sweep", t, c6_sweep());
    let t = Instant::now();
    match &easy {
        Ok((models, _)) => report(7, "witness attention", t, c7_witness_attention(models)),
        Err(e) => report(7, "witness attention", t, Err(e.clone())),
    }
    let t = Instant::now();
    report(8, "metric oracle", t, c8_metrics());
    let t = Instant::now();
    report(9, "preprocessing pinning", t, c9_preprocess());
    let t = Instant::now();
    report(10, "reproducibility", t, c10_reproducibility());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
