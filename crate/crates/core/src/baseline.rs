//! Comparison aggregators: mean and max pooling over raw feature tokens, and
//! a single full self-attention block whose cost is quadratic in the bag size.

use serde::{Deserialize, Serialize};

use crate::attention::{self_attention_block, AttentionConfig, BlockParams, Linear, RecordTag};
use crate::autograd::{Graph, Var};
use crate::bag::FeatureBag;
use crate::error::{Error, Result};
use crate::model::{output_dim, HeadParams, Heads, MilModel, Mode};
use crate::params::ParamStore;
use crate::posenc::{attach_encodings, FrequencyLadder};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    MeanPool,
    MaxPool,
    FullSelfAttention,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::MeanPool => "mean-pool",
            BaselineKind::MaxPool => "max-pool",
            BaselineKind::FullSelfAttention => "full-self-attention",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pool" => Ok(BaselineKind::MeanPool),
            "max-pool" => Ok(BaselineKind::MaxPool),
            "full-self-attention" => Ok(BaselineKind::FullSelfAttention),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub feature_dim: usize,
    /// Width of the projected tokens for the attention baseline.
    pub latent_dim: usize,
    pub num_classes: usize,
    pub frequencies: usize,
    pub f_max: f64,
    pub attention: AttentionSettings,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSettings {
    pub scale_mode: crate::attention::ScaleMode,
    pub heads: usize,
}

impl From<AttentionSettings> for AttentionConfig {
    fn from(a: AttentionSettings) -> Self {
        AttentionConfig {
            scale_mode: a.scale_mode,
            heads: a.heads,
        }
    }
}

impl BaselineConfig {
    /// A baseline sized like the given CCAN configuration.
    pub fn like(kind: BaselineKind, c: &crate::model::CcanConfig) -> Self {
        BaselineConfig {
            kind,
            feature_dim: c.feature_dim,
            latent_dim: c.latent_dim,
            num_classes: c.num_classes,
            frequencies: c.frequencies,
            f_max: c.f_max,
            attention: AttentionSettings {
                scale_mode: c.scale_mode,
                heads: c.heads,
            },
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Pool(Linear),
    Attention {
        ladder: FrequencyLadder,
        proj: Linear,
        block: BlockParams,
        head: HeadParams,
    },
}

#[derive(Clone, Debug)]
pub struct BaselineModel<T: Real> {
    config: BaselineConfig,
    params: ParamStore<T>,
    body: Body,
}

impl<T: Real> BaselineModel<T> {
    pub fn new(config: BaselineConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.latent_dim == 0 || config.num_classes < 2 {
            return Err(Error::Config("baseline widths must be positive and num_classes >= 2".into()));
        }
        let mut rng = rng_for(config.seed, config.kind.name());
        let mut store = ParamStore::new();
        let out = output_dim(config.num_classes);
        let body = match config.kind {
            BaselineKind::MeanPool | BaselineKind::MaxPool => {
                Body::Pool(Linear::new(&mut store, "head", config.feature_dim, out, true, &mut rng))
            }
            BaselineKind::FullSelfAttention => {
                let ladder = FrequencyLadder::new(config.frequencies, config.f_max)?;
                let d_in = config.feature_dim + ladder.width(false);
                let proj = Linear::new(&mut store, "input_proj", d_in, config.latent_dim, true, &mut rng);
                let block = BlockParams::self_attention(&mut store, "self", config.latent_dim, &mut rng);
                let head = HeadParams::new(&mut store, config.latent_dim, out, &mut rng);
                Body::Attention {
                    ladder,
                    proj,
                    block,
                    head,
                }
            }
        };
        Ok(BaselineModel {
            config,
            params: store,
            body,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    /// Averaged-probability handle for one bag.
    pub fn forward_graph(&self, g: &mut Graph<T>, bag: &FeatureBag) -> Result<Var> {
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
        let store = &self.params;
        match &self.body {
            Body::Pool(head) => {
                let x = g.constant(bag.tokens.cast::<T>());
                let pooled = match self.config.kind {
                    BaselineKind::MaxPool => g.max_rows(x)?,
                    _ => g.mean_rows(x)?,
                };
                let logits = head.apply(g, store, pooled)?;
                Ok(g.sigmoid(logits))
            }
            Body::Attention {
                ladder,
                proj,
                block,
                head,
            } => {
                let tokens: Tensor<T> = bag.tokens.cast();
                let x = g.constant(attach_encodings(&tokens, &bag.coords, ladder, false)?);
                let x = proj.apply(g, store, x)?;
                let att = self.config.attention.into();
                let (x, _) = self_attention_block(g, store, block, x, &att, RecordTag::default())?;
                let pooled = g.mean_rows(x)?;
                head.apply(g, store, pooled)
            }
        }
    }

    /// Closed-form multiply-accumulate count of one forward pass over `n`
    /// tokens.
    pub fn count_macs(&self, n: usize) -> u64 {
        let out = output_dim(self.config.num_classes) as u64;
        match &self.body {
            Body::Pool(_) => self.config.feature_dim as u64 * out,
            Body::Attention { ladder, block, head, .. } => {
                let d_in = (self.config.feature_dim + ladder.width(false)) as u64;
                let d = self.config.latent_dim as u64;
                n as u64 * d_in * d + block.macs(n, n) + head.macs(d as usize, out as usize)
            }
        }
    }

    /// The `QKᵀ` and `AV` products alone: `2·n²·D_l`.
    pub fn attention_term_macs(&self, n: usize) -> u64 {
        match self.body {
            Body::Attention { .. } => 2 * (n as u64).pow(2) * self.config.latent_dim as u64,
            Body::Pool(_) => 0,
        }
    }
}

impl<T: Real> MilModel<T> for BaselineModel<T> {
    fn kind(&self) -> &'static str {
        self.config.kind.name()
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

    fn heads(&self, g: &mut Graph<T>, bag: &FeatureBag, _mode: Mode<'_>) -> Result<Heads> {
        let p = self.forward_graph(g, bag)?;
        Ok(Heads {
            per_head: vec![p],
            averaged: p,
        })
    }
}
