//! The cascaded cross-attention network.
//!
//! Stage `j` (1-based) holds `M / C^(j-1)` learned latents. It distils its
//! context (the projected input tokens for stage 1, the previous stage's
//! latents afterwards) through `Z` repeats of one cross-attention block and
//! `S` self-attention blocks, then adds the average-pooled previous latents.
//! Those latents are the stage output. A class token is appended to a copy,
//! which attends once more to the original input tokens and passes through a
//! final self-attention block; the class token's embedding goes through the
//! shared head. The model prediction is the mean of the per-stage
//! probabilities.

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention_block, self_attention_block, AttentionConfig, AttentionRecord, BlockParams,
    LayerNormParams, Linear, RecordTag, ScaleMode, INIT_STD,
};
use crate::autograd::{Graph, Var};
use crate::bag::FeatureBag;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::posenc::{attach_encodings, FrequencyLadder};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcanConfig {
    /// Number of stages `J`.
    pub stages: usize,
    /// Latents in the first stage `M`.
    pub latents: usize,
    /// Per-stage latent compression `C`.
    pub compression: usize,
    /// Latent width `D_l`.
    pub latent_dim: usize,
    /// Input feature width `D_f`.
    pub feature_dim: usize,
    /// Cross+self repeats per stage `Z`.
    pub repeats: usize,
    /// Self-attention layers after each cross-attention `S`.
    pub self_layers: usize,
    /// Fraction of input tokens dropped while training.
    pub token_dropout: f64,
    pub num_classes: usize,
    /// Positional-encoding frequency count `I`.
    pub frequencies: usize,
    pub f_max: f64,
    pub scale_mode: ScaleMode,
    pub heads: usize,
    pub append_raw_coords: bool,
    pub seed: u64,
}

impl Default for CcanConfig {
    fn default() -> Self {
        CcanConfig {
            stages: 6,
            latents: 512,
            compression: 2,
            latent_dim: 512,
            feature_dim: 2048,
            repeats: 1,
            self_layers: 2,
            token_dropout: 0.9,
            num_classes: 2,
            frequencies: 6,
            f_max: 10.0,
            scale_mode: ScaleMode::Queries,
            heads: 1,
            append_raw_coords: false,
            seed: 0,
        }
    }
}

impl CcanConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.stages == 0 {
            return cfg("model.J must be at least 1".into());
        }
        if self.compression == 0 {
            return cfg("model.C must be at least 1".into());
        }
        if self.latents == 0 || self.latent_dim == 0 || self.feature_dim == 0 {
            return cfg("model.M, model.D_l and model.D_f must be positive".into());
        }
        let divisor = (self.compression as u64)
            .checked_pow((self.stages - 1) as u32)
            .filter(|&d| d <= self.latents as u64);
        match divisor {
            Some(d) if (self.latents as u64).is_multiple_of(d) => {}
            _ => {
                return cfg(format!(
                    "model.M = {} is not divisible by C^(J-1) = {}^{}",
                    self.latents,
                    self.compression,
                    self.stages - 1
                ))
            }
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return cfg(format!("model.p_do must lie in [0, 1), got {}", self.token_dropout));
        }
        if self.repeats == 0 {
            return cfg("model.Z must be at least 1".into());
        }
        if self.num_classes < 2 {
            return cfg("model.num_classes must be at least 2".into());
        }
        if self.heads == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return cfg(format!(
                "model.heads = {} must divide model.D_l = {}",
                self.heads, self.latent_dim
            ));
        }
        FrequencyLadder::new(self.frequencies, self.f_max)?;
        Ok(())
    }

    /// `[M, M/C, M/C², …]`, one entry per stage.
    pub fn stage_latents(&self) -> Vec<usize> {
        let mut m = self.latents;
        (0..self.stages)
            .map(|_| {
                let cur = m;
                m /= self.compression;
                cur
            })
            .collect()
    }

    /// Width of an input token after the positional encoding is attached.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + 4 * self.frequencies + if self.append_raw_coords { 2 } else { 0 }
    }

    /// One sigmoid for binary tasks, one per class otherwise.
    pub fn output_dim(&self) -> usize {
        output_dim(self.num_classes)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            scale_mode: self.scale_mode,
            heads: self.heads,
        }
    }

    pub fn ladder(&self) -> Result<FrequencyLadder> {
        FrequencyLadder::new(self.frequencies, self.f_max)
    }
}

pub fn output_dim(num_classes: usize) -> usize {
    if num_classes == 2 {
        1
    } else {
        num_classes
    }
}

/// BCE targets for a class label: `[label]` for binary tasks, one-hot otherwise.
pub fn targets_for(label: u8, num_classes: usize) -> Vec<f64> {
    if num_classes == 2 {
        vec![f64::from(label.min(1))]
    } else {
        (0..num_classes)
            .map(|c| if c == label as usize { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Forward-pass mode. Training mode draws the token-dropout mask.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Number of tokens that survive dropout: `max(1, round(n·(1−p)))`.
pub fn kept_count(n: usize, p_do: f64) -> usize {
    ((n as f64 * (1.0 - p_do)).round() as usize).clamp(1, n.max(1))
}

/// Indices of the tokens kept by input-token dropout, ascending.
pub fn dropout_indices<R: Rng + ?Sized>(n: usize, p_do: f64, rng: &mut R) -> Vec<usize> {
    let k = kept_count(n, p_do);
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Drops a random `p_do` fraction of rows while training; identity in eval.
/// Surviving rows are not rescaled.
pub fn token_dropout<T: Real>(
    tokens: &Tensor<T>,
    p_do: f64,
    mode: &mut Mode<'_>,
) -> (Tensor<T>, Vec<usize>) {
    let n = tokens.rows();
    let kept = match mode {
        Mode::Train(rng) if n > 0 => dropout_indices(n, p_do, &mut **rng),
        _ => (0..n).collect(),
    };
    (tokens.select_rows(&kept), kept)
}

/// Averages each run of `c` consecutive rows.
pub fn pooled_skip<T: Real>(prev: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (m, d) = (prev.rows(), prev.cols());
    if c == 0 || m % c != 0 {
        return Err(Error::shape("pooled_skip", prev.shape(), &[c]));
    }
    let mut out = Tensor::zeros(&[m / c, d]);
    let inv = T::one() / T::of(c as f64);
    for r in 0..m {
        let dst = &mut out.data_mut()[(r / c) * d..(r / c + 1) * d];
        for (o, &v) in dst.iter_mut().zip(prev.row(r)) {
            *o += v * inv;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RepeatParams {
    pub cross: BlockParams,
    pub selfs: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub latents: ParamId,
    pub class_token: ParamId,
    pub repeats: Vec<RepeatParams>,
    pub final_cross: BlockParams,
    pub final_self: BlockParams,
}

/// Shared prediction MLP applied to every stage's class token.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub norm: LayerNormParams,
    pub hidden: Linear,
    pub out: Linear,
}

impl HeadParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        HeadParams {
            norm: LayerNormParams::new(store, "head.norm", d),
            hidden: Linear::new(store, "head.fc1", d, d, true, rng),
            out: Linear::new(store, "head.fc2", d, outputs, true, rng),
        }
    }

    /// Class probabilities (sigmoid per output) for a `1 × D_l` embedding.
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.apply(g, store, x)?;
        let h = self.hidden.apply(g, store, h)?;
        let h = g.gelu(h);
        let logits = self.out.apply(g, store, h)?;
        Ok(g.sigmoid(logits))
    }

    pub fn macs(&self, d: usize, outputs: usize) -> u64 {
        (d * d + d * outputs) as u64
    }
}

/// Graph handles produced by one stage.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub latents_out: Var,
    pub class_embedding: Var,
    pub probs: Var,
    pub records: Vec<AttentionRecord>,
}

/// Graph handles of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub stages: Vec<StageVars>,
    /// Mean of the per-stage probabilities.
    pub probs: Var,
    /// Input token indices that survived dropout.
    pub kept: Vec<usize>,
    pub n_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub latents_out: Tensor<f64>,
    pub class_embedding: Vec<f64>,
    pub probs: Vec<f64>,
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub stages: Vec<StageOutput>,
    pub probs: Vec<f64>,
    pub kept: Vec<usize>,
    pub n_tokens: usize,
}

/// Per-head probability vectors of any bag classifier. CCAN has one head per
/// stage; pooling baselines have one.
#[derive(Clone, Debug)]
pub struct Heads {
    pub per_head: Vec<Var>,
    pub averaged: Var,
}

/// Common surface of the trainable bag classifiers.
pub trait MilModel<T: Real>: Send + Sync {
    fn kind(&self) -> &'static str;
    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn heads(&self, g: &mut Graph<T>, bag: &FeatureBag, mode: Mode<'_>) -> Result<Heads>;

    /// Eval-mode averaged probabilities.
    fn predict(&self, bag: &FeatureBag) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let h = self.heads(&mut g, bag, Mode::Eval)?;
        Ok(g.value(h.averaged).to_f64_vec())
    }
}

#[derive(Clone, Debug)]
pub struct CcanModel<T: Real> {
    config: CcanConfig,
    ladder: FrequencyLadder,
    params: ParamStore<T>,
    pub input_proj: Linear,
    pub stages: Vec<StageParams>,
    pub head: HeadParams,
}

impl<T: Real> CcanModel<T> {
    /// Builds a model with parameters drawn from `config.seed`.
    pub fn new(config: CcanConfig) -> Result<Self> {
        let seed = config.seed;
        Self::init(config, seed)
    }

    pub fn init(config: CcanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ladder = config.ladder()?;
        let mut rng = rng_for(seed, "model-init");
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let input_proj = Linear::new(&mut store, "input_proj", config.input_dim(), d, true, &mut rng);
        let mut stages = Vec::with_capacity(config.stages);
        for (j, m) in config.stage_latents().into_iter().enumerate() {
            let p = format!("stage{}", j + 1);
            let latents = store.add(
                format!("{p}.latents"),
                Tensor::randn(&[m, d], INIT_STD, &mut rng),
            );
            let class_token = store.add(
                format!("{p}.class_token"),
                Tensor::randn(&[1, d], INIT_STD, &mut rng),
            );
            let repeats = (0..config.repeats)
                .map(|z| RepeatParams {
                    cross: BlockParams::cross(&mut store, &format!("{p}.r{z}.cross"), d, d, &mut rng),
                    selfs: (0..config.self_layers)
                        .map(|s| {
                            BlockParams::self_attention(
                                &mut store,
                                &format!("{p}.r{z}.self{s}"),
                                d,
                                &mut rng,
                            )
                        })
                        .collect(),
                })
                .collect();
            let final_cross = BlockParams::cross(&mut store, &format!("{p}.final_cross"), d, d, &mut rng);
            let final_self =
                BlockParams::self_attention(&mut store, &format!("{p}.final_self"), d, &mut rng);
            stages.push(StageParams {
                latents,
                class_token,
                repeats,
                final_cross,
                final_self,
            });
        }
        let head = HeadParams::new(&mut store, d, config.output_dim(), &mut rng);
        Ok(CcanModel {
            config,
            ladder,
            params: store,
            input_proj,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &CcanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Real>(&self) -> CcanModel<U> {
        CcanModel {
            config: self.config.clone(),
            ladder: self.ladder.clone(),
            params: self.params.cast(),
            input_proj: self.input_proj,
            stages: self.stages.clone(),
            head: self.head.clone(),
        }
    }

    /// Positional encodings attached, dropout applied, projected to `D_l`.
    /// Returns the context handle and the kept indices.
    pub fn embed_inputs(
        &self,
        g: &mut Graph<T>,
        bag: &FeatureBag,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<usize>)> {
        if bag.is_empty() {
            return Err(Error::Data(format!("bag {:?} has no tokens", bag.bag_id)));
        }
        if bag.dim() != self.config.feature_dim {
            return Err(Error::Data(format!(
                "bag {:?} has feature width {}, model expects {}",
                bag.bag_id,
                bag.dim(),
                self.config.feature_dim
            )));
        }
        let (kept_tokens, kept) = token_dropout(&bag.tokens, self.config.token_dropout, mode);
        let coords: Vec<_> = kept.iter().map(|&i| bag.coords[i]).collect();
        let tokens: Tensor<T> = kept_tokens.cast();
        let encoded = attach_encodings(&tokens, &coords, &self.ladder, self.config.append_raw_coords)?;
        let x = g.constant(encoded);
        let ctx = self.input_proj.apply(g, &self.params, x)?;
        Ok((ctx, kept))
    }

    /// Runs stage `j` (0-based). `prev` is the previous stage's output
    /// latents (`None` for the first stage); `inputs` is the projected input
    /// token set.
    pub fn stage_forward(
        &self,
        g: &mut Graph<T>,
        j: usize,
        prev: Option<Var>,
        inputs: Var,
        record: bool,
    ) -> Result<StageVars> {
        let sp = self
            .stages
            .get(j)
            .ok_or_else(|| Error::Usage(format!("stage {j} out of range")))?;
        if (j == 0) != prev.is_none() {
            return Err(Error::Usage(
                "the first stage reads the inputs; later stages need the previous latents".into(),
            ));
        }
        let att = self.config.attention();
        let store = &self.params;
        let mut records = Vec::new();
        let mut layer = 0;
        let keep = |rec: AttentionRecord, records: &mut Vec<AttentionRecord>| {
            if record {
                records.push(rec);
            }
        };
        let tag = |layer: usize| RecordTag {
            stage_index: j,
            layer_index: layer,
        };

        let context = prev.unwrap_or(inputs);
        let mut x = g.param(store, sp.latents);
        for rep in &sp.repeats {
            let (y, rec) = cross_attention_block(g, store, &rep.cross, x, context, &att, tag(layer))?;
            keep(rec, &mut records);
            layer += 1;
            x = y;
            for s in &rep.selfs {
                let (y, rec) = self_attention_block(g, store, s, x, &att, tag(layer))?;
                keep(rec, &mut records);
                layer += 1;
                x = y;
            }
        }
        if let Some(p) = prev {
            let pooled = g.pool_rows(p, self.config.compression)?;
            x = g.add(x, pooled)?;
        }
        let latents_out = x;

        let m = g.value(x).rows();
        let cls = g.param(store, sp.class_token);
        let z = g.concat_rows(&[x, cls])?;
        let (z, rec) = cross_attention_block(g, store, &sp.final_cross, z, inputs, &att, tag(layer))?;
        keep(rec, &mut records);
        layer += 1;
        let (z, rec) = self_attention_block(g, store, &sp.final_self, z, &att, tag(layer))?;
        keep(rec, &mut records);
        let class_embedding = g.slice_rows(z, m, m + 1)?;
        let probs = self.head.apply(g, store, class_embedding)?;
        Ok(StageVars {
            latents_out,
            class_embedding,
            probs,
            records,
        })
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bag: &FeatureBag,
        mut mode: Mode<'_>,
        record: bool,
    ) -> Result<ForwardVars> {
        let (inputs, kept) = self.embed_inputs(g, bag, &mut mode)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut prev = None;
        for j in 0..self.stages.len() {
            let s = self.stage_forward(g, j, prev, inputs, record)?;
            prev = Some(s.latents_out);
            stages.push(s);
        }
        let mut sum = stages[0].probs;
        for s in &stages[1..] {
            sum = g.add(sum, s.probs)?;
        }
        let probs = g.scale(sum, 1.0 / stages.len() as f64);
        Ok(ForwardVars {
            stages,
            probs,
            kept,
            n_tokens: bag.len(),
        })
    }

    /// Full forward pass with attention records, detached from any graph.
    pub fn forward(&self, bag: &FeatureBag, mode: Mode<'_>) -> Result<ModelOutput> {
        let mut g = Graph::inference();
        let fv = self.forward_graph(&mut g, bag, mode, true)?;
        Ok(ModelOutput {
            stages: fv
                .stages
                .into_iter()
                .map(|s| StageOutput {
                    latents_out: g.value(s.latents_out).cast(),
                    class_embedding: g.value(s.class_embedding).to_f64_vec(),
                    probs: g.value(s.probs).to_f64_vec(),
                    records: s.records,
                })
                .collect(),
            probs: g.value(fv.probs).to_f64_vec(),
            kept: fv.kept,
            n_tokens: fv.n_tokens,
        })
    }

    /// Sum over stages of the per-stage binary cross-entropy.
    pub fn loss(&self, g: &mut Graph<T>, fv: &ForwardVars, label: u8) -> Result<Var> {
        let targets = targets_for(label, self.config.num_classes);
        let losses = fv
            .stages
            .iter()
            .map(|s| g.bce(s.probs, &targets))
            .collect::<Result<Vec<_>>>()?;
        crate::train::total_loss(g, &losses)
    }
}

impl<T: Real> MilModel<T> for CcanModel<T> {
    fn kind(&self) -> &'static str {
        "ccan"
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn heads(&self, g: &mut Graph<T>, bag: &FeatureBag, mode: Mode<'_>) -> Result<Heads> {
        let fv = self.forward_graph(g, bag, mode, false)?;
        Ok(Heads {
            per_head: fv.stages.iter().map(|s| s.probs).collect(),
            averaged: fv.probs,
        })
    }
}
