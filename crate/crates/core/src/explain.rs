//! Attention rollout per stage, aggregation over stages, top-k patches and
//! file exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionKind, AttentionRecord};
use crate::bag::FeatureBag;
use crate::error::{Error, Result};
use crate::model::{CcanModel, Mode, ModelOutput, StageOutput};
use crate::posenc::GridCoord;
use crate::tensor::{Real, Tensor};

/// `rownorm(0.5·A + 0.5·I)`: attention mixed with the residual path.
pub fn residual_mix(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("residual_mix", a.shape(), &[n, n]));
    }
    let mut out = a.clone();
    for r in 0..n {
        let row = &mut out.data_mut()[r * n..(r + 1) * n];
        for v in row.iter_mut() {
            *v *= 0.5;
        }
        row[r] += 0.5;
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// Class-token relevance over the kept input tokens for one stage.
///
/// The self-attention records after the stage's last cross-attention are
/// residual-mixed and chained; the class-token row (the last row) of that
/// product is multiplied into the final cross-attention matrix.
pub fn rollout_records(records: &[AttentionRecord]) -> Result<Vec<f64>> {
    let last_cross = records
        .iter()
        .rposition(|r| r.kind == AttentionKind::Cross)
        .ok_or_else(|| Error::Usage("stage has no recorded cross-attention".into()))?;
    let cross = &records[last_cross].matrix;
    let q = cross.rows();
    // Row vector e_cls, pushed back through the later layers.
    let mut row = vec![0.0; q];
    row[q - 1] = 1.0;
    for rec in records[last_cross + 1..].iter().rev() {
        if rec.kind != AttentionKind::SelfAttention || rec.matrix.rows() != q {
            return Err(Error::Usage(format!(
                "record after the final cross-attention has shape {:?}",
                rec.matrix.shape()
            )));
        }
        let mixed = residual_mix(&rec.matrix)?;
        let mut next = vec![0.0; q];
        for (i, &w) in row.iter().enumerate() {
            for (n, &a) in next.iter_mut().zip(mixed.row(i)) {
                *n += w * a;
            }
        }
        row = next;
    }
    let mut scores = vec![0.0; cross.cols()];
    for (i, &w) in row.iter().enumerate() {
        for (s, &a) in scores.iter_mut().zip(cross.row(i)) {
            *s += w * a;
        }
    }
    Ok(scores)
}

pub fn rollout_stage(stage: &StageOutput) -> Result<Vec<f64>> {
    rollout_records(&stage.records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    MinMax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Vec<f64>,
    /// False for tokens absent from the forward pass; they score 0.
    pub kept: Vec<bool>,
    pub coords: Vec<GridCoord>,
    pub rows_total: u32,
    pub cols_total: u32,
    pub normalization: Normalization,
}

/// Min-max scaling to `[0, 1]`. A constant vector maps to zeros.
pub fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Mean of the per-stage rollouts in original token order, without
/// normalization.
pub fn mean_rollout(stage_scores: &[Vec<f64>], kept: &[usize], n_tokens: usize) -> Result<Vec<f64>> {
    if stage_scores.is_empty() {
        return Err(Error::Usage("no stage scores to aggregate".into()));
    }
    let mut raw = vec![0.0; n_tokens];
    for s in stage_scores {
        if s.len() != kept.len() {
            return Err(Error::Usage(format!(
                "stage scores of length {} for {} kept tokens",
                s.len(),
                kept.len()
            )));
        }
        for (&v, &i) in s.iter().zip(kept) {
            raw[i] += v;
        }
    }
    let j = stage_scores.len() as f64;
    for v in &mut raw {
        *v /= j;
    }
    Ok(raw)
}

/// Mean rollout over stages, placed on the bag grid and min-max normalized.
pub fn aggregate_rollout(out: &ModelOutput, bag: &FeatureBag) -> Result<AttentionMap> {
    if out.n_tokens != bag.len() {
        return Err(Error::Usage(format!(
            "model output covers {} tokens, bag has {}",
            out.n_tokens,
            bag.len()
        )));
    }
    let per_stage = out
        .stages
        .iter()
        .map(rollout_stage)
        .collect::<Result<Vec<_>>>()?;
    let raw = mean_rollout(&per_stage, &out.kept, out.n_tokens)?;
    let mut kept = vec![false; out.n_tokens];
    for &i in &out.kept {
        kept[i] = true;
    }
    Ok(AttentionMap {
        scores: minmax(&raw),
        kept,
        coords: bag.coords.clone(),
        rows_total: bag.rows_total,
        cols_total: bag.cols_total,
        normalization: Normalization::MinMax,
    })
}

/// Eval-mode forward followed by [`aggregate_rollout`].
pub fn explain_bag<T: Real>(model: &CcanModel<T>, bag: &FeatureBag) -> Result<AttentionMap> {
    let out = model.forward(bag, Mode::Eval)?;
    aggregate_rollout(&out, bag)
}

/// The `k` lowest- and `k` highest-scoring token indices, each list ordered
/// from the extreme inward; equal scores keep ascending index order.
pub fn top_k_patches(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if k > scores.len() {
        return Err(Error::Usage(format!("k = {k} exceeds the {} tokens", scores.len())));
    }
    let mut asc: Vec<usize> = (0..scores.len()).collect();
    asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut desc: Vec<usize> = (0..scores.len()).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    asc.truncate(k);
    desc.truncate(k);
    Ok((asc, desc))
}

/// Grayscale raster at grid resolution, `round(score·255)` per occupied
/// cell and 0 elsewhere.
pub fn heatmap_pixels(map: &AttentionMap) -> Vec<u8> {
    let (rows, cols) = (map.rows_total as usize, map.cols_total as usize);
    let mut px = vec![0u8; rows * cols];
    for (c, &s) in map.coords.iter().zip(&map.scores) {
        px[c.row as usize * cols + c.col as usize] = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    px
}

pub fn heatmap_csv(map: &AttentionMap) -> String {
    let mut s = String::from("row,col,score\n");
    for (c, v) in map.coords.iter().zip(&map.scores) {
        let _ = writeln!(s, "{},{},{}", c.row, c.col, v);
    }
    s
}

/// Writes `<prefix>.csv` and `<prefix>.pgm` (binary P5). Returns both paths.
pub fn export_heatmap(map: &AttentionMap, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let csv = prefix.with_extension("csv");
    let pgm = prefix.with_extension("pgm");
    fs::write(&csv, heatmap_csv(map)).map_err(|e| Error::io(&csv, e))?;
    let mut bytes = format!("P5\n{} {}\n255\n", map.cols_total, map.rows_total).into_bytes();
    bytes.extend(heatmap_pixels(map));
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
    Ok((csv, pgm))
}

/// CSV of `bag_id,stage,e0,…` with one eval-mode class embedding per bag and
/// stage (stages numbered from 1).
pub fn class_embeddings_csv<T: Real>(model: &CcanModel<T>, bags: &[&FeatureBag]) -> Result<String> {
    let d = model.config().latent_dim;
    let mut s = String::from("bag_id,stage");
    for i in 0..d {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for bag in bags {
        let out = model.forward(bag, Mode::Eval)?;
        for (j, st) in out.stages.iter().enumerate() {
            let _ = write!(s, "{},{}", bag.bag_id, j + 1);
            for v in &st.class_embedding {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn export_class_embeddings<T: Real>(
    model: &CcanModel<T>,
    bags: &[&FeatureBag],
    path: &Path,
) -> Result<()> {
    let s = class_embeddings_csv(model, bags)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
