use std::sync::Arc;

use sme_autodiff::Tensor;
use sme_core::memory::{Harvest, MemoryBank, MemoryPolicy};

fn harvest(rows: usize) -> Harvest {
    Harvest {
        queries: Tensor::from_fn([rows, 1], |i| i as f64),
        sources: (0..rows as u64).collect(),
        inputs: (0..rows as u32).map(|i| Arc::from(vec![i])).collect(),
    }
}

fn row(v: f64) -> Tensor {
    Tensor::new([1, 1], vec![v]).unwrap()
}

/// Inclusion counts of each of `n` offered items over `trials` reservoirs of
/// capacity `cap`, the first `built` items coming from the initial harvest.
fn inclusion_counts(n: usize, cap: usize, built: usize, trials: u64) -> Vec<u64> {
    let mut counts = vec![0u64; n];
    for t in 0..trials {
        let mut bank = if built == 0 {
            MemoryBank::empty(1, cap, MemoryPolicy::Reservoir, t).unwrap()
        } else {
            MemoryBank::from_harvest(&harvest(built), cap, MemoryPolicy::Reservoir, t).unwrap().0
        };
        for i in built..n {
            bank.update(&row(i as f64), i as u64, &[i as u32]).unwrap();
        }
        assert_eq!(bank.len(), cap);
        for &s in bank.sources() {
            counts[s as usize] += 1;
        }
    }
    counts
}

fn check_uniform(counts: &[u64], cap: usize, trials: u64) {
    let n = counts.len();
    let p = cap as f64 / n as f64;
    let mean = trials as f64 * p;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    // Early and late halves, each a sum of n/2 item counts.
    for half in [&counts[..n / 2], &counts[n / 2..]] {
        let got: u64 = half.iter().sum();
        let m = mean * half.len() as f64;
        // Counts inside one reservoir are negatively correlated, so the
        // independent-sum deviation is an upper bound.
        let s = sd * (half.len() as f64).sqrt();
        assert!((got as f64 - m).abs() < 3.0 * s, "half total {got}, expected {m} ± {s}");
    }
    // Scaled squared deviations: each count has variance T·p·(1 − p), so the
    // statistic has mean n and sd about √(2n).
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - mean).powi(2) / mean).sum::<f64>() * (1.0 / (1.0 - p));
    let df = n as f64;
    assert!((chi2 - df).abs() < 3.0 * (2.0 * df).sqrt(), "chi2 {chi2} with {df} dof");
}

#[test]
fn reservoir_keeps_every_offered_query_with_equal_probability() {
    let (n, cap, trials) = (50, 10, 10_000);
    check_uniform(&inclusion_counts(n, cap, 0, trials), cap, trials);
}

#[test]
fn reservoir_after_harvest_subsample_stays_uniform() {
    let (n, cap, trials) = (50, 10, 10_000);
    check_uniform(&inclusion_counts(n, cap, 30, trials), cap, trials);
}

#[test]
fn fixed_memory_never_changes() {
    let (mut bank, short) = MemoryBank::from_harvest(&harvest(20), 5, MemoryPolicy::Fixed, 1).unwrap();
    assert!(!short);
    let before = bank.clone();
    for i in 0..100 {
        bank.update(&row(i as f64), 1000 + i, &[1]).unwrap();
    }
    assert_eq!(bank, before);
}

#[test]
fn small_harvest_is_used_whole_and_flagged() {
    let (bank, short) = MemoryBank::from_harvest(&harvest(4), 10, MemoryPolicy::Reservoir, 0).unwrap();
    assert!(short);
    assert_eq!(bank.len(), 4);
    assert_eq!(bank.sources(), &[0, 1, 2, 3]);
}

#[test]
fn rows_keep_their_source_and_input() {
    let (bank, _) = MemoryBank::from_harvest(&harvest(40), 12, MemoryPolicy::Reservoir, 3).unwrap();
    for (i, &s) in bank.sources().iter().enumerate() {
        assert_eq!(bank.queries().get2(i, 0), s as f64);
        assert_eq!(&*bank.inputs()[i], &[s as u32]);
    }
}

#[test]
fn excluding_an_input_drops_exactly_its_rows() {
    let mut h = harvest(6);
    h.inputs[4] = Arc::from(vec![1u32]);
    let (bank, _) = MemoryBank::from_harvest(&h, 6, MemoryPolicy::Fixed, 0).unwrap();
    let kept = bank.queries_excluding(&[1]);
    assert_eq!(kept.data(), &[0.0, 2.0, 3.0, 5.0]);
    assert_eq!(bank.queries_excluding(&[77]).shape(), &[6, 1]);
}

#[test]
fn width_mismatch_and_zero_capacity_are_errors() {
    let mut bank = MemoryBank::empty(2, 3, MemoryPolicy::Reservoir, 0).unwrap();
    assert!(bank.update(&row(1.0), 0, &[0]).is_err());
    assert!(MemoryBank::empty(2, 0, MemoryPolicy::Reservoir, 0).is_err());
    assert!("lru".parse::<MemoryPolicy>().is_err());
    assert_eq!("reservoir".parse::<MemoryPolicy>().unwrap(), MemoryPolicy::Reservoir);
}
