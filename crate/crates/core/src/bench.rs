//! Multiply-accumulate accounting and the token-count scaling benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MLP_EXPANSION;
use crate::autograd::Graph;
use crate::bag::FeatureBag;
use crate::baseline::{BaselineConfig, BaselineKind, BaselineModel};
use crate::error::{Error, Result};
use crate::model::{CcanConfig, CcanModel, MilModel, Mode};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// MACs of one attention block split by role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// Query, key, value and output projections, plus any input projection.
    pub projections: u64,
    /// `Q Kᵀ`
    pub scores: u64,
    /// `A V`
    pub weighted_values: u64,
    pub mlp: u64,
    pub head: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.weighted_values + self.mlp + self.head
    }

    fn add(&mut self, o: MacCount) {
        self.projections += o.projections;
        self.scores += o.scores;
        self.weighted_values += o.weighted_values;
        self.mlp += o.mlp;
        self.head += o.head;
    }
}

/// `m` queries of width `d` attending over `n` context rows of width `dc`.
pub fn block_macs(m: u64, n: u64, d: u64, dc: u64) -> MacCount {
    MacCount {
        projections: m * d * d + 2 * n * dc * d + m * d * d,
        scores: m * n * d,
        weighted_values: m * n * d,
        mlp: 2 * m * d * (MLP_EXPANSION as u64 * d),
        head: 0,
    }
}

/// Closed-form count for one CCAN forward pass over `n` tokens.
pub fn count_macs_breakdown(c: &CcanConfig, n: usize) -> MacCount {
    let n = n as u64;
    let d = c.latent_dim as u64;
    let out = c.output_dim() as u64;
    let mut total = MacCount {
        projections: n * c.input_dim() as u64 * d,
        ..MacCount::default()
    };
    let mut context = n;
    for m in c.stage_latents() {
        let m = m as u64;
        for _ in 0..c.repeats {
            total.add(block_macs(m, context, d, d));
            for _ in 0..c.self_layers {
                total.add(block_macs(m, m, d, d));
            }
        }
        total.add(block_macs(m + 1, n, d, d));
        total.add(block_macs(m + 1, m + 1, d, d));
        total.head += d * d + d * out;
        context = m;
    }
    total
}

pub fn count_macs(c: &CcanConfig, n: usize) -> u64 {
    count_macs_breakdown(c, n).total()
}

/// Synthetic bag of `n` standard-normal tokens on the smallest square grid
/// that holds them, filled in raster order.
pub fn random_bag(n: usize, feature_dim: usize, seed: u64) -> Result<FeatureBag> {
    let side = ((n as f64).sqrt().ceil() as u32).max(1);
    let positions: Vec<(u32, u32)> = (0..n as u32).map(|i| (i / side, i % side)).collect();
    let mut rng = rng_for(seed, "bench-bag");
    let data: Vec<f32> = (0..n * feature_dim)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    FeatureBag::new(
        format!("bench{n}"),
        "bench",
        0,
        (side, side),
        &positions,
        Tensor::new(vec![n, feature_dim], data)?,
    )
}

/// MACs counted by the graph during an eval-mode forward pass.
pub fn instrumented_macs(model: &CcanModel<f32>, bag: &FeatureBag) -> Result<u64> {
    let mut g = Graph::inference();
    model.forward_graph(&mut g, bag, Mode::Eval, false)?;
    Ok(g.macs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Usage("linear fit needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - (slope * a + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub model: String,
    pub n: usize,
    /// Median over the timed repeats.
    pub wall_time_ms: f64,
    pub macs: u64,
    /// Bytes held by the forward graph plus parameters.
    pub peak_bytes: u64,
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub ccan_time_fit: LinearFit,
    pub ccan_mac_fit: LinearFit,
    /// Baseline attention-term MACs at the largest N over those at half of
    /// it, when both sizes were measured.
    pub baseline_attention_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub ns: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    pub include_baseline: bool,
    /// Sizes whose estimated graph exceeds this many bytes are reported as
    /// failed instead of run.
    pub max_bytes: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            ns: vec![250, 500, 1000, 2000, 4000],
            repeats: 7,
            warmups: 2,
            include_baseline: true,
            max_bytes: 4 << 30,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

fn time_forward<F: FnMut() -> Result<(u64, u64)>>(
    opts: &BenchOptions,
    mut f: F,
) -> Result<(f64, u64, u64)> {
    for _ in 0..opts.warmups {
        f()?;
    }
    let mut times = Vec::with_capacity(opts.repeats);
    let mut last = (0, 0);
    for _ in 0..opts.repeats {
        let t = Instant::now();
        last = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(times), last.0, last.1))
}

/// Eval-mode forward passes of CCAN and the full self-attention baseline
/// on synthetic bags of each size.
pub fn bench_scaling(config: &CcanConfig, opts: &BenchOptions) -> Result<ScalingReport> {
    if opts.repeats < 5 {
        return Err(Error::Config(format!("bench.repeats must be >= 5, got {}", opts.repeats)));
    }
    if opts.ns.is_empty() || opts.ns.windows(2).any(|w| w[0] >= w[1]) || opts.ns[0] == 0 {
        return Err(Error::Config("bench.ns must be positive and strictly increasing".into()));
    }
    let model = CcanModel::<f32>::new(config.clone())?;
    let param_bytes = (model.params().numel() * 4) as u64;
    let baseline = BaselineModel::<f32>::new(BaselineConfig::like(BaselineKind::FullSelfAttention, config))?;
    let base_param_bytes = (baseline.params().numel() * 4) as u64;
    let mut rows = Vec::new();
    for &n in &opts.ns {
        let bag = random_bag(n, config.feature_dim, config.seed ^ n as u64)?;
        let (ms, macs, bytes) = time_forward(opts, || {
            let mut g = Graph::inference();
            model.forward_graph(&mut g, &bag, Mode::Eval, false)?;
            Ok((g.macs(), g.live_bytes() as u64))
        })?;
        rows.push(ScalingRow {
            model: "ccan".into(),
            n,
            wall_time_ms: ms,
            macs,
            peak_bytes: bytes + param_bytes,
            failed: None,
        });
        if opts.include_baseline {
            // Two n×n score matrices dominate the baseline's graph.
            let estimate = 2 * 4 * (n as u64).pow(2);
            if estimate > opts.max_bytes {
                rows.push(ScalingRow {
                    model: "full-self-attention".into(),
                    n,
                    wall_time_ms: f64::NAN,
                    macs: baseline.count_macs(n),
                    peak_bytes: estimate,
                    failed: Some(format!("estimated {estimate} bytes exceeds the limit")),
                });
                continue;
            }
            let (ms, macs, bytes) = time_forward(opts, || {
                let mut g = Graph::inference();
                baseline.forward_graph(&mut g, &bag)?;
                Ok((g.macs(), g.live_bytes() as u64))
            })?;
            rows.push(ScalingRow {
                model: "full-self-attention".into(),
                n,
                wall_time_ms: ms,
                macs,
                peak_bytes: bytes + base_param_bytes,
                failed: None,
            });
        }
    }
    let ccan: Vec<&ScalingRow> = rows.iter().filter(|r| r.model == "ccan").collect();
    let xs: Vec<f64> = ccan.iter().map(|r| r.n as f64).collect();
    let ts: Vec<f64> = ccan.iter().map(|r| r.wall_time_ms).collect();
    let ms: Vec<f64> = ccan.iter().map(|r| r.macs as f64).collect();
    let (ccan_time_fit, ccan_mac_fit) = if xs.len() >= 2 {
        (linear_fit(&xs, &ts)?, linear_fit(&xs, &ms)?)
    } else {
        let nan = LinearFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
        };
        (nan, nan)
    };
    let largest = *opts.ns.last().unwrap();
    let baseline_attention_ratio = (opts.include_baseline
        && largest.is_multiple_of(2)
        && opts.ns.contains(&(largest / 2)))
    .then(|| baseline.attention_term_macs(largest) as f64 / baseline.attention_term_macs(largest / 2) as f64);
    Ok(ScalingReport {
        rows,
        ccan_time_fit,
        ccan_mac_fit,
        baseline_attention_ratio,
    })
}

pub const SCALING_HEADER: &str = "model,n,wall_time_ms,macs,peak_bytes,status";

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SCALING_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.3},{},{},{}",
                r.model,
                r.n,
                r.wall_time_ms,
                r.macs,
                r.peak_bytes,
                r.failed.as_deref().unwrap_or("ok")
            );
        }
        s
    }

    /// Wall-time ratio between two measured CCAN sizes.
    pub fn ccan_time_ratio(&self, hi: usize, lo: usize) -> Option<f64> {
        let t = |n| {
            self.rows
                .iter()
                .find(|r| r.model == "ccan" && r.n == n && r.failed.is_none())
                .map(|r| r.wall_time_ms)
        };
        Some(t(hi)? / t(lo)?)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} N={:<6} {:>10.2} ms  {:>14} MACs  {:>12} bytes{}",
                r.model,
                r.n,
                r.wall_time_ms,
                r.macs,
                r.peak_bytes,
                r.failed.as_ref().map(|f| format!("  FAILED: {f}")).unwrap_or_default()
            );
        }
        let _ = writeln!(
            s,
            "ccan MACs vs N: slope {:.1}, intercept {:.1}, R² {:.6}",
            self.ccan_mac_fit.slope, self.ccan_mac_fit.intercept, self.ccan_mac_fit.r2
        );
        let _ = writeln!(
            s,
            "ccan time vs N: slope {:.5} ms/token, R² {:.4}",
            self.ccan_time_fit.slope, self.ccan_time_fit.r2
        );
        if let Some(r) = self.baseline_attention_ratio {
            let _ = writeln!(s, "full self-attention attention-term MACs at 2N / N: {r:.3}");
        }
        s
    }
}
