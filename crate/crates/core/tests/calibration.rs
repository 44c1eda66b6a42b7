mod common;

use common::{exact_bin, exact_ece, to_f64};
use lenreg_core::calibration::{bin_index, ece, PredictionSample};
use lenreg_core::rng::{self, Stream};
use rand::RngExt;

fn sample(confidence: f64, correct: bool) -> PredictionSample {
    PredictionSample {
        confidence,
        correct,
        input_length: 10,
    }
}

/// Confidences drawn uniformly, from bin edges, and from their float neighbours.
fn random_set(rng: &mut rng::StreamRng, m: usize) -> Vec<PredictionSample> {
    let n = rng.random_range(1..=200);
    (0..n)
        .map(|_| {
            let edge = rng.random_range(0..=m) as f64 / m as f64;
            let c = match rng.random_range(0..5) {
                0 => edge,
                1 => f64::from_bits(edge.to_bits().saturating_sub(1)),
                2 => f64::from_bits(edge.to_bits() + 1).min(1.0),
                _ => rng.random_range(0.0..=1.0),
            };
            sample(c, rng.random_range(0.0..1.0) < c)
        })
        .collect()
}

#[test]
fn matches_exact_rational_oracle() {
    let mut rng = rng::stream(11, Stream::Eval, 0);
    for _ in 0..300 {
        let m = rng.random_range(1..=25);
        let samples = random_set(&mut rng, m);
        let report = ece(&samples, m).unwrap();
        let (counts, exact) = exact_ece(&samples, m);
        for s in &samples {
            assert_eq!(bin_index(s.confidence, m), exact_bin(s.confidence, m), "{} / {m}", s.confidence);
        }
        assert_eq!(report.bins.iter().map(|b| b.count).collect::<Vec<_>>(), counts);
        assert!((report.ece - to_f64(&exact)).abs() <= 1e-12);
    }
}

#[test]
fn permutation_invariant() {
    let mut rng = rng::stream(12, Stream::Eval, 0);
    let samples = random_set(&mut rng, 10);
    let mut reversed = samples.clone();
    reversed.reverse();
    let a = ece(&samples, 10).unwrap();
    let b = ece(&reversed, 10).unwrap();
    assert_eq!(
        a.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
        b.bins.iter().map(|b| b.count).collect::<Vec<_>>()
    );
    assert!((a.ece - b.ece).abs() < 1e-12);
}

#[test]
fn bin_terms_add_up_across_disjoint_bins() {
    // samples confined to different bins contribute independently, weighted by size
    let low: Vec<_> = (0..30).map(|i| sample(0.05 + i as f64 * 1e-3, i % 4 == 0)).collect();
    let high: Vec<_> = (0..70).map(|i| sample(0.91 + i as f64 * 1e-3, i % 10 != 0)).collect();
    let all: Vec<_> = low.iter().chain(&high).copied().collect();
    let e_low = ece(&low, 10).unwrap().ece;
    let e_high = ece(&high, 10).unwrap().ece;
    let e_all = ece(&all, 10).unwrap().ece;
    assert!((e_all - (0.3 * e_low + 0.7 * e_high)).abs() < 1e-12);
}

#[test]
fn calibrated_generator_has_small_ece() {
    let mut rng = rng::stream(13, Stream::Eval, 0);
    let samples: Vec<_> = (0..100_000)
        .map(|_| {
            let c: f64 = rng.random_range(0.0..=1.0);
            sample(c, rng.random_range(0.0..1.0) < c)
        })
        .collect();
    let r = ece(&samples, 10).unwrap();
    assert!(r.ece <= 0.02, "{}", r.ece);
}

#[test]
fn constant_confidence_gives_accuracy_gap() {
    for (c, hits, n) in [(0.8, 60usize, 100usize), (0.3, 90, 100), (0.55, 11, 20)] {
        let samples: Vec<_> = (0..n).map(|i| sample(c, i < hits)).collect();
        let r = ece(&samples, 10).unwrap();
        let acc = hits as f64 / n as f64;
        assert!((r.ece - (acc - c).abs()).abs() < 1e-12, "{c}: {}", r.ece);
    }
}

#[test]
fn hand_worked_four_samples() {
    let samples = [sample(0.9, true), sample(0.9, false), sample(0.6, true), sample(0.6, false)];
    let r = ece(&samples, 2).unwrap();
    assert!((r.ece - 0.25).abs() < 1e-15);
    let (_, exact) = exact_ece(&samples, 2);
    assert!((to_f64(&exact) - 0.25).abs() < 1e-15);
}
