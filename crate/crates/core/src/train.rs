//! Loss, training loop with validation-AUC model selection, and the
//! training-fraction sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bag::FeatureBag;
use crate::baseline::{BaselineConfig, BaselineModel};
use crate::data::{subsample_fraction, Dataset, Fold, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::auc_for_outputs;
use crate::model::{targets_for, CcanConfig, CcanModel, Heads, MilModel, Mode};
use crate::optim::{adamw_step, cosine_lr, AdamWParams, AdamWState};
use crate::params::ParamStore;
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Real;

pub const DEFAULT_FRACTIONS: [f64; 7] = [0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Bags per optimizer step (gradient accumulation).
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = AdamWParams::default();
        TrainConfig {
            epochs: 100,
            batch_size: 30,
            lr_max: 5e-6,
            lr_min: 0.0,
            weight_decay: hp.weight_decay,
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 <= train.lr_min <= train.lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW betas must lie in [0, 1) and eps must be > 0".into()));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("train.fractions must be a nonempty list in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean over classes of the binary cross-entropy, probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(probs: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    sum / probs.len() as f64
}

/// Sum (not mean) of the per-head losses.
pub fn total_loss<T: Real>(g: &mut Graph<T>, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::Usage("total_loss of zero terms".into()))?;
    rest.iter().try_fold(first, |acc, &l| g.add(acc, l))
}

pub fn bag_loss<T: Real>(g: &mut Graph<T>, heads: &Heads, label: u8, num_classes: usize) -> Result<Var> {
    let targets = targets_for(label, num_classes);
    let losses = heads
        .per_head
        .iter()
        .map(|&p| g.bce(p, &targets))
        .collect::<Result<Vec<_>>>()?;
    total_loss(g, &losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean summed loss per training bag.
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 before any epoch ran.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub test_auc_at_best: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_auc,best\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.epoch,
                e.train_loss,
                e.val_auc,
                u8::from(e.epoch == self.best_epoch)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Parameters at the best validation epoch.
    pub best_params: ParamStore<f32>,
}

/// Eval-mode averaged probabilities, one row per bag.
pub fn predict_all<M: MilModel<f32> + ?Sized>(model: &M, bags: &[&FeatureBag]) -> Result<Vec<Vec<f64>>> {
    bags.par_iter().map(|b| model.predict(b)).collect()
}

pub fn evaluate_auc<M: MilModel<f32> + ?Sized>(model: &M, bags: &[&FeatureBag]) -> Result<f64> {
    let probs = predict_all(model, bags)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    auc_for_outputs(&probs, &labels, model.num_classes())
}

/// Trains in place. Each epoch visits the training bags in a seeded order;
/// gradients of `batch_size` consecutive bags are averaged into one AdamW
/// step under a cosine schedule spanning all steps. After every epoch the
/// validation AUC is measured and the parameters of the best epoch kept.
/// On return the model holds the best parameters.
pub fn train<M: MilModel<f32> + ?Sized>(
    model: &mut M,
    train_bags: &[&FeatureBag],
    val_bags: &[&FeatureBag],
    test_bags: &[&FeatureBag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::Data("training needs nonempty train and validation sets".into()));
    }
    let hp = cfg.adamw();
    let steps_per_epoch = train_bags.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut order_rng = rng_for(cfg.seed, "train-order");
    let mut drop_rng = rng_for(cfg.seed, "token-dropout");
    let mut state = AdamWState::new(model.params());
    let num_classes = model.num_classes();
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut history = TrainHistory {
        best_val_auc: f64::NEG_INFINITY,
        ..TrainHistory::default()
    };
    let mut best = model.params().clone();
    let mut step = 0u64;

    model.params_mut().zero_grads();
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut order_rng);
        let mut loss_sum = 0.0;
        for (chunk_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            for &i in chunk {
                let bag = train_bags[i];
                let mut g = Graph::new();
                let heads = model.heads(&mut g, bag, Mode::Train(&mut drop_rng))?;
                let loss = bag_loss(&mut g, &heads, bag.label, num_classes)?;
                loss_sum += g.value(loss).data()[0].as_f64();
                g.backward(loss)?;
                g.accumulate_param_grads(model.params_mut());
            }
            let inv = 1.0 / chunk.len() as f32;
            for p in model.params_mut().iter_mut() {
                for x in &mut p.grad {
                    *x *= inv;
                }
            }
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
            adamw_step(model.params_mut(), &mut state, lr, &hp);
            model.params_mut().zero_grads();
            step += 1;
            debug_assert_eq!(step, (epoch as u64 - 1) * steps_per_epoch + chunk_no as u64 + 1);
        }
        let val_auc = evaluate_auc(&*model, val_bags)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_bags.len() as f64,
            val_auc,
        });
        if val_auc > history.best_val_auc {
            history.best_val_auc = val_auc;
            history.best_epoch = epoch;
            history.test_auc_at_best = if test_bags.is_empty() {
                None
            } else {
                Some(evaluate_auc(&*model, test_bags)?)
            };
            best = model.params().clone();
        }
    }
    *model.params_mut() = best.clone();
    Ok(TrainOutcome {
        history,
        best_params: best,
    })
}

/// Looks bag ids up in the dataset.
pub fn resolve<'a>(ds: &'a Dataset, ids: &[String]) -> Result<Vec<&'a FeatureBag>> {
    let index: HashMap<&str, usize> = ds.index_of();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .map(|&i| &ds.bags[i])
                .ok_or_else(|| Error::Data(format!("bag {id:?} is not in the dataset")))
        })
        .collect()
}

/// A model family to train in the sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Ccan(CcanConfig),
    Baseline(BaselineConfig),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ccan(_) => "ccan",
            ModelSpec::Baseline(b) => b.kind.name(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> ModelSpec {
        match self {
            ModelSpec::Ccan(c) => ModelSpec::Ccan(CcanConfig { seed, ..c.clone() }),
            ModelSpec::Baseline(b) => ModelSpec::Baseline(BaselineConfig { seed, ..b.clone() }),
        }
    }

    pub fn build(&self) -> Result<Box<dyn MilModel<f32>>> {
        Ok(match self {
            ModelSpec::Ccan(c) => Box::new(CcanModel::<f32>::new(c.clone())?),
            ModelSpec::Baseline(b) => Box::new(BaselineModel::<f32>::new(b.clone())?),
        })
    }
}

/// Trains one model on one fold, optionally on a fraction of its training
/// bags. Returns the trained model (best parameters) and its outcome.
pub fn train_fold(
    ds: &Dataset,
    fold: &Fold,
    spec: &ModelSpec,
    fraction: f64,
    subsample_seed: u64,
    cfg: &TrainConfig,
) -> Result<(Box<dyn MilModel<f32>>, TrainOutcome)> {
    let ids = subsample_fraction(&fold.train, fraction, subsample_seed)?;
    let train_bags = resolve(ds, &ids)?;
    let val_bags = resolve(ds, &fold.val)?;
    let test_bags = resolve(ds, &fold.test)?;
    let mut model = spec.build()?;
    let outcome = train(model.as_mut(), &train_bags, &val_bags, &test_bags, cfg)?;
    Ok((model, outcome))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fold: usize,
    pub fraction: f64,
    pub model: String,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub test_auc: f64,
}

pub const SWEEP_HEADER: &str = "fold,fraction,model,best_epoch,val_auc,test_auc";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.fold, r.fraction, r.model, r.best_epoch, r.val_auc, r.test_auc
        );
    }
    s
}

/// Every fold × fraction × model cell trained independently, in parallel on
/// up to `jobs` threads. Rows come back in (fold, fraction, model) order.
/// Within a fold, model initialization and the subsampling shuffle are shared
/// across fractions, so larger fractions see a superset of the bags.
pub fn data_efficiency_sweep(
    ds: &Dataset,
    plan: &SplitPlan,
    folds: &[usize],
    specs: &[ModelSpec],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    let mut cells = Vec::new();
    for &f in folds {
        let fold = plan.fold(f)?;
        for &fraction in &cfg.fractions {
            for spec in specs {
                cells.push((f, fold, fraction, spec));
            }
        }
    }
    let run = |&(f, fold, fraction, spec): &(usize, &Fold, f64, &ModelSpec)| -> Result<SweepRow> {
        let fold_seed = derive_seed(cfg.seed, &format!("fold{f}"));
        let spec = spec.with_seed(derive_seed(fold_seed, spec.name()));
        let cell_cfg = TrainConfig {
            seed: derive_seed(fold_seed, "train"),
            ..cfg.clone()
        };
        let (_, outcome) = train_fold(ds, fold, &spec, fraction, fold_seed, &cell_cfg)?;
        Ok(SweepRow {
            fold: f,
            fraction,
            model: spec.name().to_string(),
            best_epoch: outcome.history.best_epoch,
            val_auc: outcome.history.best_val_auc,
            test_auc: outcome.history.test_auc_at_best.unwrap_or(f64::NAN),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1.0], &[1.0]) < 1e-6);
        let expect = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.2], &[1.0, 0.0]) - expect).abs() < 1e-12);
        assert!((expect - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn total_loss_sums() {
        let mut g = Graph::<f64>::new();
        let parts: Vec<Var> = [0.5, 0.25]
            .iter()
            .map(|&v| g.constant(crate::tensor::Tensor::scalar(v)))
            .collect();
        let t = total_loss(&mut g, &parts).unwrap();
        assert_eq!(g.value(t).data()[0], 0.75);
        let one = total_loss(&mut g, &parts[..1]).unwrap();
        assert_eq!(g.value(one).data()[0], 0.5);
        let six: Vec<Var> = (0..6)
            .map(|_| g.constant(crate::tensor::Tensor::scalar(std::f64::consts::LN_2)))
            .collect();
        let t = total_loss(&mut g, &six).unwrap();
        assert!((g.value(t).data()[0] - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn config_rules() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().fractions, DEFAULT_FRACTIONS.to_vec());
        let zero = TrainConfig {
            lr_max: 0.0,
            ..TrainConfig::default()
        };
        zero.validate().unwrap();
        let bad = TrainConfig {
            lr_min: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
