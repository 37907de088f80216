//! Slide preprocessing: fixed-size tessellation in microns, white and blur
//! rejection, resizing, and a deterministic stand-in feature extractor that
//! turns kept patches into a bag.

mod canny;
mod image;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::canny::{canny_edge_fraction, canny_edges, CannyParams};
pub use self::image::{decode_pnm, encode_pnm, read_pnm, resize_bilinear, write_pnm, RasterImage};
use crate::bag::FeatureBag;
use crate::data::encode_bag;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const PATCH_PIXELS: usize = 256;
pub const PATCH_MICRONS: f64 = 256.0;
pub const WHITE_THRESHOLD: f64 = 224.0;
pub const BLUR_THRESHOLD: f64 = 0.02;
/// Side of the pooled thumbnail fed to the stub extractor.
const THUMB: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grayscale {
    /// `0.299 R + 0.587 G + 0.114 B`
    #[default]
    Bt601,
    ChannelMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub patch_microns: f64,
    pub white_threshold: f64,
    pub blur_threshold: f64,
    pub grayscale: Grayscale,
    pub canny: CannyParams,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            patch_microns: PATCH_MICRONS,
            white_threshold: WHITE_THRESHOLD,
            blur_threshold: BLUR_THRESHOLD,
            grayscale: Grayscale::Bt601,
            canny: CannyParams::default(),
            feature_dim: 2048,
            seed: 0,
        }
    }
}

/// A 256×256 RGB patch and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub pixels: Vec<u8>,
    pub row: u32,
    pub col: u32,
    /// Source rectangle `(x, y, side)` in image pixels.
    pub source: (usize, usize, usize),
}

/// Non-overlapping square patches of `patch_microns` from the top-left
/// corner, each resized to 256×256. Partial patches at the right and bottom
/// edges are dropped. Returns the patches and the grid extent `(rows, cols)`.
pub fn tessellate(img: &RasterImage, patch_microns: f64) -> Result<(Vec<PatchRecord>, (u32, u32))> {
    let side = (patch_microns / img.microns_per_pixel).round() as usize;
    if side == 0 {
        return Err(Error::Data("patch side rounds to 0 pixels".into()));
    }
    let (rows, cols) = (img.height / side, img.width / side);
    if rows == 0 || cols == 0 {
        return Err(Error::Data(format!(
            "{}x{} image is smaller than one {side}-pixel patch",
            img.width, img.height
        )));
    }
    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    let patches = cells
        .par_iter()
        .map(|&(r, c)| {
            let (x, y) = (c * side, r * side);
            let crop = img.crop_rgb(x, y, side);
            PatchRecord {
                pixels: resize_bilinear(&crop, side, side, 3, PATCH_PIXELS, PATCH_PIXELS),
                row: r as u32,
                col: c as u32,
                source: (x, y, side),
            }
        })
        .collect();
    Ok((patches, (rows as u32, cols as u32)))
}

pub fn grayscale(rgb: &[u8], mode: Grayscale) -> Vec<f64> {
    rgb.chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            match mode {
                Grayscale::Bt601 => 0.299 * r + 0.587 * g + 0.114 * b,
                Grayscale::ChannelMean => (r + g + b) / 3.0,
            }
        })
        .collect()
}

pub fn mean_gray(rgb: &[u8], mode: Grayscale) -> f64 {
    let g = grayscale(rgb, mode);
    g.iter().sum::<f64>() / g.len() as f64
}

/// True when the mean grayscale value is strictly above 224.
pub fn is_white(rgb: &[u8]) -> bool {
    mean_gray(rgb, Grayscale::Bt601) > WHITE_THRESHOLD
}

/// Edge fraction of a square RGB patch with the default detector.
pub fn patch_edge_fraction(rgb: &[u8], side: usize) -> f64 {
    let g = grayscale(rgb, Grayscale::Bt601);
    canny_edge_fraction(&g, side, side, &CannyParams::default())
}

/// True when fewer than 2% of the pixels lie on an edge.
pub fn is_blurry_fraction(fraction: f64) -> bool {
    fraction < BLUR_THRESHOLD
}

pub fn is_blurry(rgb: &[u8], side: usize) -> bool {
    is_blurry_fraction(patch_edge_fraction(rgb, side))
}

/// Fixed random projection from a pooled 16×16×3 thumbnail to `D_f`
/// features, squashed by `tanh`.
#[derive(Clone, Debug)]
pub struct StubExtractor {
    feature_dim: usize,
    /// `768 × D_f`, row-major.
    projection: Vec<f32>,
}

impl StubExtractor {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let inputs = THUMB * THUMB * 3;
        let mut rng = rng_for(seed, "stub-projection");
        let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("valid std");
        let projection = (0..inputs * feature_dim)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        StubExtractor {
            feature_dim,
            projection,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Features of one 256×256 RGB patch.
    pub fn extract(&self, rgb: &[u8]) -> Vec<f32> {
        let block = PATCH_PIXELS / THUMB;
        let mut thumb = vec![0.0f32; THUMB * THUMB * 3];
        for y in 0..PATCH_PIXELS {
            for x in 0..PATCH_PIXELS {
                let t = ((y / block) * THUMB + x / block) * 3;
                for c in 0..3 {
                    thumb[t + c] += rgb[(y * PATCH_PIXELS + x) * 3 + c] as f32;
                }
            }
        }
        let norm = 1.0 / (255.0 * (block * block) as f32);
        for v in &mut thumb {
            *v = *v * norm - 0.5;
        }
        let mut out = vec![0.0f32; self.feature_dim];
        for (i, &v) in thumb.iter().enumerate() {
            let row = &self.projection[i * self.feature_dim..(i + 1) * self.feature_dim];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
        for o in &mut out {
            *o = o.tanh();
        }
        out
    }
}

pub fn stub_features(rgb: &[u8], feature_dim: usize, seed: u64) -> Vec<f32> {
    StubExtractor::new(feature_dim, seed).extract(rgb)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcReport {
    pub bag_id: String,
    pub total: usize,
    pub white_rejected: usize,
    pub blur_rejected: usize,
    pub kept: usize,
}

pub const QC_HEADER: &str = "bag_id,total,white_rejected,blur_rejected,kept";

impl QcReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.bag_id, self.total, self.white_rejected, self.blur_rejected, self.kept
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchVerdict {
    White,
    Blurry,
    Kept,
}

pub fn classify_patch(rgb: &[u8], cfg: &PreprocessConfig) -> PatchVerdict {
    let gray = grayscale(rgb, cfg.grayscale);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    if mean > cfg.white_threshold {
        return PatchVerdict::White;
    }
    let frac = canny_edge_fraction(&gray, PATCH_PIXELS, PATCH_PIXELS, &cfg.canny);
    if frac < cfg.blur_threshold {
        PatchVerdict::Blurry
    } else {
        PatchVerdict::Kept
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideMeta {
    pub bag_id: String,
    pub patient_id: String,
    pub label: u8,
}

/// Tessellates, filters and featurizes one slide. The QC report is returned
/// even when no patch survives, in which case the bag is `None`.
pub fn process_image(
    img: &RasterImage,
    meta: &SlideMeta,
    cfg: &PreprocessConfig,
) -> Result<(Option<FeatureBag>, QcReport)> {
    let (patches, grid) = tessellate(img, cfg.patch_microns)?;
    let verdicts: Vec<PatchVerdict> = patches.par_iter().map(|p| classify_patch(&p.pixels, cfg)).collect();
    let count = |v: PatchVerdict| verdicts.iter().filter(|&&x| x == v).count();
    let qc = QcReport {
        bag_id: meta.bag_id.clone(),
        total: patches.len(),
        white_rejected: count(PatchVerdict::White),
        blur_rejected: count(PatchVerdict::Blurry),
        kept: count(PatchVerdict::Kept),
    };
    let kept: Vec<&PatchRecord> = patches
        .iter()
        .zip(&verdicts)
        .filter(|(_, &v)| v == PatchVerdict::Kept)
        .map(|(p, _)| p)
        .collect();
    if kept.is_empty() {
        return Ok((None, qc));
    }
    let extractor = StubExtractor::new(cfg.feature_dim, cfg.seed);
    let feats: Vec<Vec<f32>> = kept.par_iter().map(|p| extractor.extract(&p.pixels)).collect();
    let positions: Vec<(u32, u32)> = kept.iter().map(|p| (p.row, p.col)).collect();
    let tokens = Tensor::new(vec![kept.len(), cfg.feature_dim], feats.concat())?;
    let bag = FeatureBag::new(
        meta.bag_id.clone(),
        meta.patient_id.clone(),
        meta.label,
        grid,
        &positions,
        tokens,
    )?;
    Ok((Some(bag), qc))
}

/// Full pipeline for one slide: writes the bag file and returns QC counts.
/// A slide with no surviving patch is a data error.
pub fn run_pipeline(
    img: &RasterImage,
    meta: &SlideMeta,
    out_path: &Path,
    cfg: &PreprocessConfig,
) -> Result<QcReport> {
    let (bag, qc) = process_image(img, meta, cfg)?;
    let bag = bag.ok_or_else(|| {
        Error::Data(format!(
            "{}: no patch survived filtering ({} total, {} white, {} blurry)",
            meta.bag_id, qc.total, qc.white_rejected, qc.blur_rejected
        ))
    })?;
    let bytes = encode_bag(&bag)?;
    fs::write(out_path, bytes).map_err(|e| Error::io(out_path, e))?;
    Ok(qc)
}

/// Sidecar metadata: `key = value` lines with `#` comments. Required keys
/// are `microns_per_pixel`, `label`, `bag_id` and `patient_id`.
pub fn parse_sidecar(text: &str) -> Result<(f64, SlideMeta)> {
    let mut kv: HashMap<String, String> = HashMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sidecar line {}: expected key = value", no + 1)))?;
        let k = k.trim().to_string();
        if !matches!(k.as_str(), "microns_per_pixel" | "label" | "bag_id" | "patient_id") {
            return Err(Error::Config(format!("sidecar: unknown key {k:?}")));
        }
        kv.insert(k, v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("sidecar: missing key {k:?}")))
    };
    let mpp: f64 = get("microns_per_pixel")?
        .parse()
        .map_err(|_| Error::Config("sidecar: microns_per_pixel is not a number".into()))?;
    let label: u8 = get("label")?
        .parse()
        .map_err(|_| Error::Config("sidecar: label is not a class index".into()))?;
    Ok((
        mpp,
        SlideMeta {
            bag_id: get("bag_id")?,
            patient_id: get("patient_id")?,
            label,
        },
    ))
}
