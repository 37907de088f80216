use ccan::metrics::{auc_binary, auc_for_outputs, auc_macro_ovr};
use proptest::prelude::*;

fn brute(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u8..10).prop_map(|v| v as f64 / 10.0), n),
            proptest::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn binary_matches_pairwise_count((scores, mut labels) in labelled()) {
        labels[0] = true;
        labels[1] = false;
        let fast = auc_binary(&scores, &labels).unwrap();
        prop_assert!((fast - brute(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_monotone_maps((scores, mut labels) in labelled()) {
        labels[0] = true;
        labels[1] = false;
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc_binary(&scores, &labels).unwrap(), auc_binary(&mapped, &labels).unwrap());
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let a = auc_binary(&scores, &labels).unwrap();
        let b = auc_binary(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn worked_example() {
    assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(auc_binary(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
}

#[test]
fn single_class_is_an_error() {
    assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());
    assert!(auc_macro_ovr(&[vec![0.2, 0.8], vec![0.4, 0.6]], &[1, 1], 2).is_err());
}

#[test]
fn macro_average_of_one_vs_rest() {
    let scores = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.1, 0.8, 0.1],
        vec![0.3, 0.3, 0.4],
        vec![0.5, 0.1, 0.4],
        vec![0.2, 0.2, 0.6],
    ];
    let labels = [0usize, 1, 2, 0, 1];
    let mut want = 0.0;
    for c in 0..3 {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        want += brute(&s, &l);
    }
    want /= 3.0;
    assert!((auc_macro_ovr(&scores, &labels, 3).unwrap() - want).abs() < 1e-12);
}

#[test]
fn single_output_models_score_the_positive_class() {
    let probs = vec![vec![0.1], vec![0.4], vec![0.35], vec![0.8]];
    assert_eq!(auc_for_outputs(&probs, &[0, 0, 1, 1], 2).unwrap(), 0.75);
}
