use std::collections::{HashMap, HashSet};

use ccan::bag::FeatureBag;
use ccan::data::{
    decode_bag, encode_bag, generate_synthetic, load_dataset, patient_grouped_kfold, save_dataset, subsample_fraction,
    SplitPlan, SyntheticConfig,
};
use ccan::tensor::Tensor;
use ccan::Error;
use proptest::prelude::*;

fn bag(id: &str, patient: &str, n: usize, d: usize) -> FeatureBag {
    let positions: Vec<(u32, u32)> = (0..n as u32).map(|i| (i / 4, i % 4)).collect();
    let data: Vec<f32> = (0..n * d).map(|i| i as f32 * 0.25 - 1.0).collect();
    FeatureBag::new(id, patient, 1, (n as u32 / 4 + 1, 4), &positions, Tensor::new(vec![n, d], data).unwrap())
        .unwrap()
}

#[test]
fn layout_matches_hand_assembled_bytes() {
    let b = FeatureBag::new(
        "é",
        "p",
        1,
        (3, 2),
        &[(2, 1)],
        Tensor::new(vec![1, 2], vec![1.0f32, -2.0]).unwrap(),
    )
    .unwrap();
    let mut want = b"CCFB".to_vec();
    want.extend(1u16.to_le_bytes());
    for v in [1u32, 2, 3, 2] {
        want.extend(v.to_le_bytes());
    }
    want.push(1);
    want.extend([2, 0xC3, 0xA9]);
    want.extend([1, b'p']);
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(encode_bag(&b).unwrap(), want);
}

#[test]
fn truncation_and_bad_magic_are_format_errors() {
    let bytes = encode_bag(&bag("x", "y", 5, 3)).unwrap();
    for cut in [0, 3, 10, 24, bytes.len() - 1] {
        match decode_bag(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= bytes.len()),
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_bag(&bad), Err(Error::Format { offset: 0, .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(decode_bag(&trailing).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ccfb_round_trip(
        id in "[a-zà-ÿ日本語🙂_-]{1,20}",
        patient in "\\PC{0,12}",
        n in 1usize..20,
        d in 1usize..6,
        label in any::<u8>(),
        values in proptest::collection::vec(any::<f32>(), 120),
    ) {
        let positions: Vec<(u32, u32)> = (0..n as u32).map(|i| (i % 5, i / 5)).collect();
        let data: Vec<f32> = (0..n * d).map(|i| values[i % values.len()]).collect();
        prop_assume!(data.iter().all(|v| v.is_finite()));
        let b = FeatureBag::new(id, patient, label, (5, 4), &positions, Tensor::new(vec![n, d], data).unwrap()).unwrap();
        let bytes = encode_bag(&b).unwrap();
        let back = decode_bag(&bytes).unwrap();
        prop_assert_eq!(back, b);
    }

    #[test]
    fn splits_keep_patients_whole(seed in any::<u64>(), k in 2usize..6, n_bags in 30usize..90) {
        let ds = generate_synthetic(&SyntheticConfig {
            n_bags,
            tokens_per_bag: (5, 8),
            feature_dim: 2,
            seed,
            ..SyntheticConfig::default()
        }).unwrap();
        let plan = patient_grouped_kfold(&ds.bags, k, 0.2, seed).unwrap();
        let patient: HashMap<&str, &str> = ds.bags.iter().map(|b| (b.bag_id.as_str(), b.patient_id.as_str())).collect();
        let mut tested = HashSet::new();
        for fold in &plan.folds {
            let mut seen = HashSet::new();
            let sets = [&fold.train, &fold.val, &fold.test];
            for (s, ids) in sets.iter().enumerate() {
                let pats: HashSet<&str> = ids.iter().map(|i| patient[i.as_str()]).collect();
                for (t, other) in sets.iter().enumerate().skip(s + 1) {
                    let op: HashSet<&str> = other.iter().map(|i| patient[i.as_str()]).collect();
                    prop_assert!(pats.is_disjoint(&op), "sets {s} and {t} share a patient");
                }
                for id in ids.iter() {
                    prop_assert!(seen.insert(id.clone()), "bag {id} appears twice in a fold");
                }
            }
            prop_assert_eq!(seen.len(), ds.len());
            for id in &fold.test {
                prop_assert!(tested.insert(id.clone()), "bag {id} is tested in two folds");
            }
        }
        prop_assert_eq!(tested.len(), ds.len());
    }

    #[test]
    fn subsamples_are_nested(seed in any::<u64>(), n in 1usize..200) {
        let ids: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
        let mut prev: HashSet<String> = HashSet::new();
        for f in [0.02, 0.05, 0.10, 0.25, 0.50, 0.75, 1.00] {
            let s = subsample_fraction(&ids, f, seed).unwrap();
            let expect = ((f * n as f64) - 1e-9).ceil().max(1.0) as usize;
            prop_assert_eq!(s.len(), expect.min(n));
            let cur: HashSet<String> = s.into_iter().collect();
            prop_assert!(prev.is_subset(&cur));
            prev = cur;
        }
        prop_assert_eq!(prev.len(), n);
    }
}

#[test]
fn dataset_and_plan_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticConfig {
        n_bags: 24,
        tokens_per_bag: (5, 8),
        feature_dim: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.bags, ds.bags);
    assert_eq!(back.witnesses, ds.witnesses);

    let plan = patient_grouped_kfold(&ds.bags, 3, 0.2, 4).unwrap();
    let path = dir.path().join("splits.csv");
    plan.write_csv(&path).unwrap();
    assert_eq!(SplitPlan::read_csv(&path, 4).unwrap(), plan);
}

#[test]
fn manifest_disagreement_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SyntheticConfig {
        n_bags: 4,
        tokens_per_bag: (5, 6),
        feature_dim: 2,
        ..SyntheticConfig::default()
    })
    .unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let m = dir.path().join("manifest.csv");
    let text = std::fs::read_to_string(&m).unwrap().replacen("patient0000", "someone", 1);
    std::fs::write(&m, text).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
}

#[test]
fn plan_csv_quotes_awkward_ids() {
    let dir = tempfile::tempdir().unwrap();
    let plan = SplitPlan {
        k: 1,
        seed: 0,
        folds: vec![ccan::data::Fold {
            train: vec!["a,b".into(), "q\"uote".into()],
            val: vec!["日本".into()],
            test: vec!["plain".into()],
        }],
    };
    let path = dir.path().join("s.csv");
    plan.write_csv(&path).unwrap();
    assert_eq!(SplitPlan::read_csv(&path, 0).unwrap(), plan);
}
