//! Scaled dot-product attention and the pre-norm cross-/self-attention blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Hidden width of the block MLP relative to the latent width.
pub const MLP_EXPANSION: usize = 4;

/// Divisor applied to attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// `√(number of query rows)`.
    #[default]
    Queries,
    /// `√(head width)`.
    HeadDim,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "queries" => Ok(ScaleMode::Queries),
            "head-dim" => Ok(ScaleMode::HeadDim),
            other => Err(Error::Config(format!(
                "unknown scale mode {other:?} (expected queries or head-dim)"
            ))),
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleMode::Queries => "queries",
            ScaleMode::HeadDim => "head-dim",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Cross,
    SelfAttention,
}

/// Row-stochastic attention weights captured during a forward pass.
/// Multi-head blocks record the mean over heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub matrix: Tensor<f64>,
    pub kind: AttentionKind,
    pub stage_index: usize,
    pub layer_index: usize,
}

impl AttentionRecord {
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.matrix.rows())
            .map(|r| (self.matrix.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub scale_mode: ScaleMode,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            scale_mode: ScaleMode::Queries,
            heads: 1,
        }
    }
}

impl AttentionConfig {
    /// Logit divisor for `queries` query rows and the given head width.
    /// Multi-head attention always scales per head width.
    pub fn scale(&self, queries: usize, head_dim: usize) -> f64 {
        match (self.scale_mode, self.heads) {
            (ScaleMode::Queries, 1) => (queries.max(1) as f64).sqrt(),
            _ => (head_dim.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[1, dim], T::one())),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{prefix}.weight"),
            Tensor::randn(&[d_in, d_out], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, d_out])));
        Linear { weight, bias }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Learned maps of one attention block: query/key/value projections into
/// the latent width, output projection, two layer norms (three for
/// cross-attention, which also normalizes its context) and a GELU MLP.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub kind: AttentionKind,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub norm_query: LayerNormParams,
    pub norm_context: Option<LayerNormParams>,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_mlp: LayerNormParams,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl BlockParams {
    pub fn cross<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        latent_dim: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, AttentionKind::Cross, latent_dim, context_dim, rng)
    }

    pub fn self_attention<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, prefix, AttentionKind::SelfAttention, latent_dim, latent_dim, rng)
    }

    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: AttentionKind,
        d: usize,
        dc: usize,
        rng: &mut R,
    ) -> Self {
        let norm_query = LayerNormParams::new(store, &format!("{prefix}.norm_q"), d);
        let norm_context = (kind == AttentionKind::Cross)
            .then(|| LayerNormParams::new(store, &format!("{prefix}.norm_kv"), dc));
        let query = Linear::new(store, &format!("{prefix}.q"), d, d, false, rng);
        let key = Linear::new(store, &format!("{prefix}.k"), dc, d, false, rng);
        let value = Linear::new(store, &format!("{prefix}.v"), dc, d, false, rng);
        let out = Linear::new(store, &format!("{prefix}.o"), d, d, true, rng);
        let norm_mlp = LayerNormParams::new(store, &format!("{prefix}.norm_mlp"), d);
        let hidden = MLP_EXPANSION * d;
        let mlp_in = Linear::new(store, &format!("{prefix}.mlp1"), d, hidden, true, rng);
        let mlp_out = Linear::new(store, &format!("{prefix}.mlp2"), hidden, d, true, rng);
        BlockParams {
            kind,
            latent_dim: d,
            context_dim: dc,
            norm_query,
            norm_context,
            query,
            key,
            value,
            out,
            norm_mlp,
            mlp_in,
            mlp_out,
        }
    }

    /// Multiply-accumulates of one application with `m` queries over `n`
    /// context rows (self-attention: `n == m`).
    pub fn macs(&self, m: usize, n: usize) -> u64 {
        let (m, n) = (m as u64, n as u64);
        let d = self.latent_dim as u64;
        let dc = self.context_dim as u64;
        let h = (MLP_EXPANSION as u64) * d;
        let q = m * d * d;
        let kv = 2 * n * dc * d;
        let attn = 2 * m * n * d;
        let out = m * d * d;
        let mlp = 2 * m * d * h;
        q + kv + attn + out + mlp
    }
}

/// Output of [`scaled_attention`]: the attended values and the weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / scale) V`.
pub fn scaled_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
) -> Result<Attended> {
    if !(scale > 0.0) {
        return Err(Error::Usage(format!("attention scale must be > 0, got {scale}")));
    }
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / scale);
    let weights = g.softmax(logits, 1)?;
    let out = g.matmul(weights, v)?;
    Ok(Attended { out, weights })
}

fn multi_head<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Tensor<f64>)> {
    let (m, d) = (g.value(q).rows(), g.value(q).cols());
    let heads = cfg.heads.max(1);
    if d % heads != 0 {
        return Err(Error::Config(format!("latent width {d} not divisible by {heads} heads")));
    }
    let hd = d / heads;
    let scale = cfg.scale(m, hd);
    if heads == 1 {
        let att = scaled_attention(g, q, k, v, scale)?;
        let w = g.value(att.weights).cast();
        return Ok((att.out, w));
    }
    let mut outs = Vec::with_capacity(heads);
    let mut mean: Option<Tensor<f64>> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q, h * hd, (h + 1) * hd)?;
        let kh = g.slice_cols(k, h * hd, (h + 1) * hd)?;
        let vh = g.slice_cols(v, h * hd, (h + 1) * hd)?;
        let att = scaled_attention(g, qh, kh, vh, scale)?;
        outs.push(att.out);
        let w: Tensor<f64> = g.value(att.weights).cast();
        mean = Some(match mean {
            None => w,
            Some(mut acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(w.data()) {
                    *a += b;
                }
                acc
            }
        });
    }
    let mut mean = mean.expect("at least one head");
    for a in mean.data_mut() {
        *a /= heads as f64;
    }
    Ok((g.concat_cols(&outs)?, mean))
}

fn residual_mlp<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    x: Var,
) -> Result<Var> {
    let h = p.norm_mlp.apply(g, store, x)?;
    let h = p.mlp_in.apply(g, store, h)?;
    let h = g.gelu(h);
    let h = p.mlp_out.apply(g, store, h)?;
    g.add(x, h)
}

/// Where a block sits in the model, stamped onto its attention record.
#[derive(Clone, Copy, Debug, Default)]
pub struct RecordTag {
    pub stage_index: usize,
    pub layer_index: usize,
}

/// Latents attend to a context set: `x + O(attn(Q(x), K(c), V(c)))`, then a
/// residual MLP. Returns the updated latents and the `m × n` weights.
pub fn cross_attention_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    latents: Var,
    context: Var,
    cfg: &AttentionConfig,
    tag: RecordTag,
) -> Result<(Var, AttentionRecord)> {
    if g.value(context).rows() == 0 {
        return Err(Error::Data("cross-attention over an empty context".into()));
    }
    let norm_context = p
        .norm_context
        .ok_or_else(|| Error::Usage("cross_attention_block given self-attention params".into()))?;
    let xq = p.norm_query.apply(g, store, latents)?;
    let xc = norm_context.apply(g, store, context)?;
    let q = p.query.apply(g, store, xq)?;
    let k = p.key.apply(g, store, xc)?;
    let v = p.value.apply(g, store, xc)?;
    let (att, weights) = multi_head(g, q, k, v, cfg)?;
    let o = p.out.apply(g, store, att)?;
    let x = g.add(latents, o)?;
    let x = residual_mlp(g, store, p, x)?;
    Ok((
        x,
        AttentionRecord {
            matrix: weights,
            kind: AttentionKind::Cross,
            stage_index: tag.stage_index,
            layer_index: tag.layer_index,
        },
    ))
}

/// Pre-norm transformer block over `m` tokens; the record is `m × m`.
pub fn self_attention_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    tokens: Var,
    cfg: &AttentionConfig,
    tag: RecordTag,
) -> Result<(Var, AttentionRecord)> {
    if g.value(tokens).rows() == 0 {
        return Err(Error::Data("self-attention over zero tokens".into()));
    }
    let x = p.norm_query.apply(g, store, tokens)?;
    let q = p.query.apply(g, store, x)?;
    let k = p.key.apply(g, store, x)?;
    let v = p.value.apply(g, store, x)?;
    let (att, weights) = multi_head(g, q, k, v, cfg)?;
    let o = p.out.apply(g, store, att)?;
    let x = g.add(tokens, o)?;
    let x = residual_mlp(g, store, p, x)?;
    Ok((
        x,
        AttentionRecord {
            matrix: weights,
            kind: AttentionKind::SelfAttention,
            stage_index: tag.stage_index,
            layer_index: tag.layer_index,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_with, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_key_attention_copies_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
        let v = g.constant(Tensor::from_f64(&[1, 2], &[4.0, 5.0]).unwrap());
        let a = scaled_attention(&mut g, q, k, v, 1.0).unwrap();
        assert_eq!(g.value(a.weights).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.value(a.out).data(), &[4.0, 5.0, 4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[2, 2]));
        let k = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 6.0]).unwrap());
        let a = scaled_attention(&mut g, q, k, v, 2.0).unwrap();
        for &w in g.value(a.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        for &o in g.value(a.out).data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_key_closed_form() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap());
        let a = scaled_attention(&mut g, q, k, v, 1.0).unwrap();
        let sigma4 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((g.value(a.weights).data()[0] - sigma4).abs() < 1e-12);
        assert!((g.value(a.out).data()[0] - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn attention_rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let k = g.constant(Tensor::zeros(&[2, 3]));
        assert!(scaled_attention(&mut g, q, k, k, 1.0).is_err());
        let k = g.constant(Tensor::zeros(&[2, 2]));
        assert!(scaled_attention(&mut g, q, k, k, 0.0).is_err());
    }

    fn zero_param(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }

    #[test]
    fn zero_output_projection_leaves_only_mlp_path() {
        let mut r = rng(1);
        let mut store = ParamStore::<f64>::new();
        let p = BlockParams::cross(&mut store, "c", 8, 5, &mut r);
        zero_param(&mut store, p.out.weight);
        let cfg = AttentionConfig::default();

        let mut g = Graph::inference();
        let lat = g.constant(Tensor::randn(&[4, 8], 1.0, &mut r));
        let ctx = g.constant(Tensor::randn(&[6, 5], 1.0, &mut r));
        let (out, _) =
            cross_attention_block(&mut g, &store, &p, lat, ctx, &cfg, RecordTag::default()).unwrap();
        let expect = residual_mlp(&mut g, &store, &p, lat).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn cross_block_record_shape_and_permutation_invariance() {
        let mut r = rng(2);
        let mut store = ParamStore::<f32>::new();
        let p = BlockParams::cross(&mut store, "c", 16, 16, &mut r);
        let cfg = AttentionConfig::default();
        let lat_t = Tensor::<f32>::randn(&[8, 16], 1.0, &mut r);
        let ctx_t = Tensor::<f32>::randn(&[100, 16], 1.0, &mut r);
        let mut perm: Vec<usize> = (0..100).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);

        let mut g = Graph::inference();
        let lat = g.constant(lat_t.clone());
        let ctx = g.constant(ctx_t.clone());
        let (a, rec) =
            cross_attention_block(&mut g, &store, &p, lat, ctx, &cfg, RecordTag::default()).unwrap();
        assert_eq!(rec.matrix.shape(), &[8, 100]);
        assert!(rec.max_row_sum_error() < 1e-5);

        let ctx_p = g.constant(ctx_t.select_rows(&perm));
        let (b, _) =
            cross_attention_block(&mut g, &store, &p, lat, ctx_p, &cfg, RecordTag::default())
                .unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-5);
    }

    #[test]
    fn cross_block_rejects_empty_context() {
        let mut r = rng(3);
        let mut store = ParamStore::<f32>::new();
        let p = BlockParams::cross(&mut store, "c", 4, 4, &mut r);
        let mut g = Graph::inference();
        let lat = g.constant(Tensor::zeros(&[2, 4]));
        let ctx = g.constant(Tensor::zeros(&[0, 4]));
        let res = cross_attention_block(
            &mut g,
            &store,
            &p,
            lat,
            ctx,
            &AttentionConfig::default(),
            RecordTag::default(),
        );
        assert!(matches!(res, Err(Error::Data(_))));
    }

    #[test]
    fn self_block_single_token_and_row_sums() {
        let mut r = rng(4);
        let mut store = ParamStore::<f32>::new();
        let p = BlockParams::self_attention(&mut store, "s", 8, &mut r);
        let cfg = AttentionConfig::default();
        let mut g = Graph::inference();
        let one = g.constant(Tensor::randn(&[1, 8], 1.0, &mut r));
        let (_, rec) = self_attention_block(&mut g, &store, &p, one, &cfg, RecordTag::default()).unwrap();
        assert_eq!(rec.matrix.data(), &[1.0]);

        let many = g.constant(Tensor::randn(&[9, 8], 3.0, &mut r));
        let (_, rec) = self_attention_block(&mut g, &store, &p, many, &cfg, RecordTag::default()).unwrap();
        assert_eq!(rec.matrix.shape(), &[9, 9]);
        assert!(rec.max_row_sum_error() < 1e-5);
    }

    #[test]
    fn multi_head_records_stay_stochastic() {
        let mut r = rng(5);
        let mut store = ParamStore::<f64>::new();
        let p = BlockParams::cross(&mut store, "c", 8, 8, &mut r);
        let cfg = AttentionConfig {
            scale_mode: ScaleMode::Queries,
            heads: 2,
        };
        let mut g = Graph::inference();
        let lat = g.constant(Tensor::randn(&[3, 8], 1.0, &mut r));
        let ctx = g.constant(Tensor::randn(&[7, 8], 1.0, &mut r));
        let (out, rec) =
            cross_attention_block(&mut g, &store, &p, lat, ctx, &cfg, RecordTag::default()).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 8]);
        assert!(rec.max_row_sum_error() < 1e-12);
        assert_eq!(cfg.scale(3, 4), 2.0);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for (seed, kind) in [(10, AttentionKind::Cross), (11, AttentionKind::SelfAttention)] {
            let mut r = rng(seed);
            let mut store = ParamStore::<f64>::new();
            let p = match kind {
                AttentionKind::Cross => BlockParams::cross(&mut store, "b", 6, 5, &mut r),
                AttentionKind::SelfAttention => BlockParams::self_attention(&mut store, "b", 6, &mut r),
            };
            // Larger weights than the init scale so every path carries signal.
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut r)).unwrap();
            }
            let lat = store.add("latents", Tensor::randn(&[4, 6], 1.0, &mut r));
            let ctx = store.add("context", Tensor::randn(&[7, 5], 1.0, &mut r));
            let mix = Tensor::<f64>::randn(&[4, 6], 1.0, &mut r);
            let cfg = AttentionConfig::default();
            let f = |s: &ParamStore<f64>, g: &mut Graph<f64>| {
                let l = g.param(s, lat);
                let (y, _) = match kind {
                    AttentionKind::Cross => {
                        let c = g.param(s, ctx);
                        cross_attention_block(g, s, &p, l, c, &cfg, RecordTag::default())?
                    }
                    AttentionKind::SelfAttention => {
                        self_attention_block(g, s, &p, l, &cfg, RecordTag::default())?
                    }
                };
                let w = g.constant(mix.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            };
            let report = grad_check_with(f, &mut store, GradCheckOptions::new(1e-3)).unwrap();
            assert!(report.max_rel_err < 1e-3, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn macs_match_instrumented_graph() {
        let mut r = rng(6);
        let mut store = ParamStore::<f32>::new();
        let c = BlockParams::cross(&mut store, "c", 8, 12, &mut r);
        let s = BlockParams::self_attention(&mut store, "s", 8, &mut r);
        let cfg = AttentionConfig::default();
        let mut g = Graph::inference();
        let lat = g.constant(Tensor::randn(&[5, 8], 1.0, &mut r));
        let ctx = g.constant(Tensor::randn(&[33, 12], 1.0, &mut r));
        let (x, _) = cross_attention_block(&mut g, &store, &c, lat, ctx, &cfg, RecordTag::default()).unwrap();
        assert_eq!(g.macs(), c.macs(5, 33));
        let before = g.macs();
        self_attention_block(&mut g, &store, &s, x, &cfg, RecordTag::default()).unwrap();
        assert_eq!(g.macs() - before, s.macs(5, 5));
    }
}
