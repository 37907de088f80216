//! Bag files, synthetic datasets, patient-grouped splits and training-fraction
//! subsampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bag::FeatureBag;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const BAG_MAGIC: &[u8; 4] = b"CCFB";
pub const BAG_VERSION: u16 = 1;

/// Serializes a bag into the CCFB layout.
///
/// Ids are prefixed by a one-byte length, so each id is limited to 255 bytes
/// of UTF-8.
pub fn encode_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    bag.validate()?;
    let (n, d) = (bag.len(), bag.dim());
    let mut out = Vec::with_capacity(32 + bag.bag_id.len() + bag.patient_id.len() + 8 * n + 4 * n * d);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    for v in [n, d, bag.rows_total as usize, bag.cols_total as usize] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("extent {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(bag.label);
    for id in [&bag.bag_id, &bag.patient_id] {
        let len = u8::try_from(id.len())
            .map_err(|_| Error::Data(format!("id {id:?} is longer than 255 bytes")))?;
        out.push(len);
        out.extend_from_slice(id.as_bytes());
    }
    for c in &bag.coords {
        out.extend_from_slice(&c.row.to_le_bytes());
        out.extend_from_slice(&c.col.to_le_bytes());
    }
    for v in bag.tokens.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.buf.len() as u64,
                msg: format!("truncated while reading {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u8(what)? as usize;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode_bag(buf: &[u8]) -> Result<FeatureBag> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != BAG_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected CCFB".into(),
        });
    }
    let version = c.u16("version")?;
    if version != BAG_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported bag version {version}"),
        });
    }
    let n = c.u32("token count")? as usize;
    let d = c.u32("feature width")? as usize;
    let rows_total = c.u32("grid rows")?;
    let cols_total = c.u32("grid cols")?;
    let label = c.u8("label")?;
    let bag_id = c.string("bag id")?;
    let patient_id = c.string("patient id")?;
    let need = n
        .checked_mul(8)
        .and_then(|a| n.checked_mul(d)?.checked_mul(4)?.checked_add(a));
    match need {
        Some(need) if buf.len() - c.pos >= need => {}
        _ => {
            return Err(Error::Format {
                offset: buf.len() as u64,
                msg: format!("truncated: header announces {n} tokens of width {d}"),
            })
        }
    }
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push((c.u32("row")?, c.u32("col")?));
    }
    let raw = c.take(4 * n * d, "features")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - c.pos),
        });
    }
    let tokens = Tensor::new(vec![n, d], data)?;
    let header_end = c.pos as u64;
    FeatureBag::new(bag_id, patient_id, label, (rows_total, cols_total), &positions, tokens).map_err(
        |e| Error::Format {
            offset: header_end,
            msg: e.to_string(),
        },
    )
}

pub fn write_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_bags: usize,
    /// Inclusive token-count range.
    pub tokens_per_bag: (usize, usize),
    pub feature_dim: usize,
    pub witness_shift: f64,
    /// Inclusive witness-count range for positive bags.
    pub witness_count: (usize, usize),
    pub grid: (u32, u32),
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_bags: 200,
            tokens_per_bag: (20, 60),
            feature_dim: 64,
            witness_shift: 4.0,
            witness_count: (1, 5),
            grid: (16, 16),
            num_classes: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tokens_per_bag;
        if self.n_bags == 0 || lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "synthetic dataset needs n_bags >= 1 and 1 <= min tokens <= max tokens, got {} bags, {lo}..{hi}",
                self.n_bags
            )));
        }
        let cells = self.grid.0 as u64 * self.grid.1 as u64;
        if (hi as u64) > cells {
            return Err(Error::Config(format!(
                "grid {}x{} has {cells} cells, fewer than the {hi} tokens a bag may need",
                self.grid.0, self.grid.1
            )));
        }
        let (wlo, whi) = self.witness_count;
        if wlo == 0 || wlo > whi || whi > lo {
            return Err(Error::Config(format!(
                "witness count range {wlo}..{whi} must be nonempty, positive and fit in {lo} tokens"
            )));
        }
        if self.feature_dim == 0 || self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config("synthetic feature_dim must be >= 1 and num_classes in 2..=255".into()));
        }
        if !(self.witness_shift >= 0.0) {
            return Err(Error::Config("witness_shift must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub bags: Vec<FeatureBag>,
    /// Per bag, which tokens carry the class signal. Empty for real data.
    pub witnesses: Vec<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.bags
            .iter()
            .enumerate()
            .map(|(i, b)| (b.bag_id.as_str(), i))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.bags.iter().map(|b| b.label as usize + 1).max().unwrap_or(0).max(2)
    }
}

fn unit_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Background tokens are standard normal. Bags of class `c ≥ 1` carry a few
/// witness tokens drawn from `N(μ_c, I)` with `‖μ_c‖ = witness_shift`; class
/// 0 bags carry none. Patients own 1–3 consecutive bags and share a label.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut dir_rng = rng_for(cfg.seed, "synth-directions");
    let means: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|_| {
            unit_direction(d, &mut dir_rng)
                .into_iter()
                .map(|x| x * cfg.witness_shift as f32)
                .collect()
        })
        .collect();
    let mut rng = rng_for(cfg.seed, "synth-bags");
    let (rows, cols) = cfg.grid;
    let cells = (rows * cols) as usize;

    let mut bags = Vec::with_capacity(cfg.n_bags);
    let mut witnesses = Vec::with_capacity(cfg.n_bags);
    let mut patient = 0usize;
    let mut left_for_patient = 0usize;
    for b in 0..cfg.n_bags {
        if left_for_patient == 0 {
            if b > 0 {
                patient += 1;
            }
            left_for_patient = rng.random_range(1..=3);
        }
        left_for_patient -= 1;
        let label = (patient % cfg.num_classes) as u8;
        let n = rng.random_range(cfg.tokens_per_bag.0..=cfg.tokens_per_bag.1);
        let cells_idx = rand::seq::index::sample(&mut rng, cells, n).into_vec();
        let positions: Vec<(u32, u32)> = cells_idx
            .iter()
            .map(|&i| ((i as u32) / cols, (i as u32) % cols))
            .collect();
        let mut data: Vec<f32> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut mask = vec![false; n];
        if label > 0 {
            let k = rng.random_range(cfg.witness_count.0..=cfg.witness_count.1);
            for t in rand::seq::index::sample(&mut rng, n, k) {
                mask[t] = true;
                for (x, m) in data[t * d..(t + 1) * d].iter_mut().zip(&means[label as usize]) {
                    *x += m;
                }
            }
        }
        let tokens = Tensor::new(vec![n, d], data)?;
        bags.push(FeatureBag::new(
            format!("bag{b:04}"),
            format!("patient{patient:04}"),
            label,
            (rows, cols),
            &positions,
            tokens,
        )?);
        witnesses.push(mask);
    }
    Ok(Dataset { bags, witnesses })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bag_id: String,
    pub patient_id: String,
    pub label: u8,
    pub path: String,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const WITNESS_FILE: &str = "witnesses.csv";

/// Writes `bags/<bag_id>.ccfb`, `manifest.csv` and, for synthetic data,
/// `witnesses.csv` (bag_id, token index) under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| csv_err(&mpath, e))?;
    for bag in &ds.bags {
        let rel = format!("bags/{}.ccfb", bag.bag_id);
        write_bag(bag, &dir.join(&rel))?;
        w.serialize(ManifestEntry {
            bag_id: bag.bag_id.clone(),
            patient_id: bag.patient_id.clone(),
            label: bag.label,
            path: rel,
        })
        .map_err(|e| csv_err(&mpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&mpath, e))?;
    if !ds.witnesses.is_empty() {
        let wpath = dir.join(WITNESS_FILE);
        let mut w = csv::Writer::from_path(&wpath).map_err(|e| csv_err(&wpath, e))?;
        w.write_record(["bag_id", "token_index"]).map_err(|e| csv_err(&wpath, e))?;
        for (bag, mask) in ds.bags.iter().zip(&ds.witnesses) {
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                w.write_record([bag.bag_id.as_str(), &i.to_string()])
                    .map_err(|e| csv_err(&wpath, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&wpath, e))?;
    }
    Ok(())
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Loads every bag listed in `dir/manifest.csv`, checking the manifest
/// against each file's header.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    let mut bags = Vec::with_capacity(entries.len());
    for e in entries {
        let path: PathBuf = dir.join(&e.path);
        let bag = read_bag(&path)?;
        if bag.bag_id != e.bag_id || bag.patient_id != e.patient_id || bag.label != e.label {
            return Err(Error::Data(format!(
                "{}: manifest row ({}, {}, {}) disagrees with the file header",
                path.display(),
                e.bag_id,
                e.patient_id,
                e.label
            )));
        }
        bags.push(bag);
    }
    let wpath = dir.join(WITNESS_FILE);
    let mut witnesses = Vec::new();
    if wpath.exists() {
        witnesses = bags.iter().map(|b| vec![false; b.len()]).collect();
        let index: HashMap<String, usize> =
            bags.iter().enumerate().map(|(i, b)| (b.bag_id.clone(), i)).collect();
        let mut r = csv::Reader::from_path(&wpath).map_err(|e| csv_err(&wpath, e))?;
        for row in r.deserialize::<(String, usize)>() {
            let (id, t) = row.map_err(|e| csv_err(&wpath, e))?;
            let b = *index
                .get(&id)
                .ok_or_else(|| Error::Data(format!("{}: unknown bag {id:?}", wpath.display())))?;
            let slot = witnesses[b]
                .get_mut(t)
                .ok_or_else(|| Error::Data(format!("{}: token {t} out of range for {id}", wpath.display())))?;
            *slot = true;
        }
    }
    Ok(Dataset { bags, witnesses })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Bags grouped by patient, patients in order of first appearance.
fn patients(bags: &[FeatureBag]) -> Vec<(String, u8, Vec<String>)> {
    let mut order: Vec<(String, u8, Vec<String>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for b in bags {
        match pos.get(b.patient_id.as_str()) {
            Some(&i) => order[i].2.push(b.bag_id.clone()),
            None => {
                pos.insert(&b.patient_id, order.len());
                order.push((b.patient_id.clone(), b.label, vec![b.bag_id.clone()]));
            }
        }
    }
    order
}

/// Patient-grouped k-fold cross-validation. Patients are shuffled and dealt
/// round-robin into `k` test groups, label by label, so every test group
/// sees each class when enough patients exist. Within a fold the non-test
/// patients are split into validation (about `val_fraction` of their bags,
/// again per label) and training.
pub fn patient_grouped_kfold(
    bags: &[FeatureBag],
    k: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    let pats = patients(bags);
    if k < 2 || k > pats.len() {
        return Err(Error::Config(format!(
            "split.k = {k} needs 2 <= k <= patient count ({})",
            pats.len()
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("split.val_fraction must lie in [0, 1), got {val_fraction}")));
    }
    let mut rng = rng_for(seed, "split");
    let mut by_label: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, p) in pats.iter().enumerate() {
        by_label.entry(p.1).or_default().push(i);
    }
    for group in by_label.values_mut() {
        group.shuffle(&mut rng);
    }
    let mut test_group = vec![0usize; pats.len()];
    let mut next = 0;
    for group in by_label.values() {
        for &p in group {
            test_group[p] = next % k;
            next += 1;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut fold = Fold::default();
        let mut val_patient = vec![false; pats.len()];
        for group in by_label.values() {
            let rest: Vec<usize> = group.iter().copied().filter(|&p| test_group[p] != f).collect();
            let rest_bags: usize = rest.iter().map(|&p| pats[p].2.len()).sum();
            let target = (val_fraction * rest_bags as f64).round() as usize;
            let mut taken = 0;
            // Walk from the back so validation patients differ across folds
            // while the dealing order stays fixed.
            for &p in rest.iter().rev() {
                let size = pats[p].2.len();
                if taken >= target || rest.len() < 2 {
                    break;
                }
                if taken > 0 && taken + size > target + size / 2 {
                    continue;
                }
                val_patient[p] = true;
                taken += size;
            }
        }
        for (p, (_, _, ids)) in pats.iter().enumerate() {
            let dst = if test_group[p] == f {
                &mut fold.test
            } else if val_patient[p] {
                &mut fold.val
            } else {
                &mut fold.train
            };
            dst.extend(ids.iter().cloned());
        }
        folds.push(fold);
    }
    Ok(SplitPlan { k, seed, folds })
}

impl SplitPlan {
    pub fn fold(&self, f: usize) -> Result<&Fold> {
        self.folds
            .get(f)
            .ok_or_else(|| Error::Config(format!("split.fold = {f} but the plan has {} folds", self.k)))
    }

    /// CSV rows `fold,bag_id,set`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["fold", "bag_id", "set"]).map_err(|e| csv_err(path, e))?;
        for (f, fold) in self.folds.iter().enumerate() {
            for (set, ids) in [("train", &fold.train), ("val", &fold.val), ("test", &fold.test)] {
                for id in ids {
                    w.write_record([f.to_string().as_str(), id, set]).map_err(|e| csv_err(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<SplitPlan> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut folds: Vec<Fold> = Vec::new();
        for row in r.deserialize::<(usize, String, String)>() {
            let (f, id, set) = row.map_err(|e| csv_err(path, e))?;
            if folds.len() <= f {
                folds.resize(f + 1, Fold::default());
            }
            match set.as_str() {
                "train" => folds[f].train.push(id),
                "val" => folds[f].val.push(id),
                "test" => folds[f].test.push(id),
                other => {
                    return Err(Error::Data(format!("{}: unknown set {other:?}", path.display())))
                }
            }
        }
        Ok(SplitPlan {
            k: folds.len(),
            seed,
            folds,
        })
    }
}

fn take_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction must lie in (0, 1], got {fraction}")));
    }
    // Guard against products like 0.07 * 100 = 7.000000000000001.
    Ok(((fraction * n as f64 - 1e-9).ceil() as usize).clamp(n.min(1), n))
}

/// `ceil(fraction·n)` ids taken as a prefix of one seeded shuffle, so
/// subsets for growing fractions are nested. `fraction = 1` returns the ids
/// unchanged.
pub fn subsample_fraction(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    let k = take_count(ids.len(), fraction)?;
    if k == ids.len() {
        return Ok(ids.to_vec());
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng_for(seed, "subsample"));
    shuffled.truncate(k);
    Ok(shuffled)
}

/// Patient-atomic variant: whole patients are taken in seeded order until at
/// least `ceil(fraction·n)` bags are covered.
pub fn subsample_fraction_by_patient(
    bags: &[&FeatureBag],
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    let k = take_count(bags.len(), fraction)?;
    let mut groups: Vec<(String, Vec<String>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for b in bags {
        match pos.get(b.patient_id.as_str()) {
            Some(&i) => groups[i].1.push(b.bag_id.clone()),
            None => {
                pos.insert(&b.patient_id, groups.len());
                groups.push((b.patient_id.clone(), vec![b.bag_id.clone()]));
            }
        }
    }
    if k == bags.len() {
        return Ok(bags.iter().map(|b| b.bag_id.clone()).collect());
    }
    groups.shuffle(&mut rng_for(seed, "subsample-patients"));
    let mut out = Vec::new();
    for (_, ids) in groups {
        if out.len() >= k {
            break;
        }
        out.extend(ids);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bag() -> FeatureBag {
        FeatureBag::new(
            "b",
            "p",
            1,
            (2, 2),
            &[(1, 0)],
            Tensor::from_f64(&[1, 2], &[0.5, -2.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn bag_size_follows_layout() {
        let bytes = encode_bag(&tiny_bag()).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4 * 4 + 1 + (2 + 1 + 1) + 8 + 8);
        assert_eq!(decode_bag(&bytes).unwrap(), tiny_bag());
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = encode_bag(&tiny_bag()).unwrap();
        for cut in [0, 3, 5, 20, bytes.len() - 1] {
            assert!(matches!(decode_bag(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_bag(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_bag(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_labelled_by_patient() {
        let cfg = SyntheticConfig {
            n_bags: 30,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.bags, b.bags);
        let mut label_of: HashMap<&str, u8> = HashMap::new();
        for (bag, mask) in a.bags.iter().zip(&a.witnesses) {
            assert_eq!(*label_of.entry(&bag.patient_id).or_insert(bag.label), bag.label);
            let w = mask.iter().filter(|&&m| m).count();
            if bag.label == 0 {
                assert_eq!(w, 0);
            } else {
                assert!((1..=5).contains(&w));
            }
        }
        let per_patient = patients(&a.bags);
        assert!(per_patient.iter().all(|p| (1..=3).contains(&p.2.len())));
    }

    #[test]
    fn synthetic_rejects_small_grid() {
        let cfg = SyntheticConfig {
            grid: (4, 4),
            tokens_per_bag: (10, 20),
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    fn one_bag_patients(n: usize) -> Vec<FeatureBag> {
        (0..n)
            .map(|i| {
                FeatureBag::new(
                    format!("b{i}"),
                    format!("p{i}"),
                    (i % 2) as u8,
                    (1, 1),
                    &[(0, 0)],
                    Tensor::zeros(&[1, 1]),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn kfold_with_single_bag_patients() {
        let bags = one_bag_patients(8);
        let plan = patient_grouped_kfold(&bags, 4, 0.2, 1).unwrap();
        let mut all_test: Vec<String> = Vec::new();
        for f in &plan.folds {
            assert_eq!(f.test.len(), 2);
            all_test.extend(f.test.iter().cloned());
        }
        all_test.sort();
        let mut ids: Vec<String> = bags.iter().map(|b| b.bag_id.clone()).collect();
        ids.sort();
        assert_eq!(all_test, ids);
        assert!(matches!(
            patient_grouped_kfold(&bags, 9, 0.2, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fractions() {
        let ids: Vec<String> = (0..561).map(|i| format!("b{i}")).collect();
        assert_eq!(subsample_fraction(&ids, 0.02, 3).unwrap().len(), 12);
        assert_eq!(subsample_fraction(&ids, 1.0, 3).unwrap(), ids);
        let small = subsample_fraction(&ids, 0.02, 3).unwrap();
        let big = subsample_fraction(&ids, 0.05, 3).unwrap();
        assert!(small.iter().all(|s| big.contains(s)));
        assert!(subsample_fraction(&ids, 0.0, 3).is_err());
        let ten: Vec<String> = (0..100).map(|i| format!("b{i}")).collect();
        assert_eq!(subsample_fraction(&ten, 0.07, 0).unwrap().len(), 7);
    }
}
