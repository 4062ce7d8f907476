//! Compares every metric against golden values produced by the independent
//! Python transcription in `tests/oracle/metric_oracle.py`.

use proptest::prelude::*;
use serde::Deserialize;
use unext_core::metrics::{self, EMode, MaskPair, MetricValues};

#[derive(Deserialize)]
struct Fixture {
    height: usize,
    width: usize,
    pairs: Vec<OraclePair>,
}

#[derive(Deserialize)]
struct OraclePair {
    index: usize,
    gt: Vec<Vec<u8>>,
    pred_u8: Vec<Vec<u8>>,
    metrics: MetricValues,
}

fn fixture() -> Fixture {
    let text = include_str!("fixtures/metric_oracle.json");
    serde_json::from_str(text).expect("fixture parses")
}

fn to_pair(f: &Fixture, p: &OraclePair) -> MaskPair<f64> {
    let pred: Vec<u8> = p.pred_u8.iter().flatten().copied().collect();
    let gt: Vec<u8> = p.gt.iter().flatten().map(|&g| g * 255).collect();
    MaskPair::from_gray(&pred, &gt, f.height, f.width).unwrap()
}

#[test]
fn all_metrics_match_oracle() {
    let f = fixture();
    assert_eq!(f.pairs.len(), 50);
    for p in &f.pairs {
        let (got, _) = metrics::evaluate_pair(&to_pair(&f, p));
        for (name, (g, e)) in MetricValues::NAMES.iter().zip(got.as_array().into_iter().zip(p.metrics.as_array())) {
            assert!((g - e).abs() <= 1e-6, "pair {} {name}: got {g}, oracle {e}", p.index);
        }
    }
}

#[test]
fn f32_predictions_agree_with_f64() {
    let f = fixture();
    for p in &f.pairs {
        let pred: Vec<u8> = p.pred_u8.iter().flatten().copied().collect();
        let gt: Vec<u8> = p.gt.iter().flatten().map(|&g| g * 255).collect();
        let pair32 = MaskPair::<f32>::from_gray(&pred, &gt, f.height, f.width).unwrap();
        let (a, _) = metrics::evaluate_pair(&pair32);
        for (x, y) in a.as_array().into_iter().zip(p.metrics.as_array()) {
            assert!((x - y).abs() <= 1e-5, "pair {}", p.index);
        }
    }
}

fn centered_square(n: usize, lo: usize, hi: usize) -> Vec<bool> {
    (0..n * n)
        .map(|i| (lo..hi).contains(&(i / n)) && (lo..hi).contains(&(i % n)))
        .collect()
}

#[test]
fn perfect_prediction_fixed_points() {
    let gt = centered_square(32, 8, 24);
    let pred: Vec<f64> = gt.iter().map(|&g| g as u8 as f64).collect();
    let pair = MaskPair::new(pred, gt, 32, 32).unwrap();
    let (m, degenerate) = metrics::evaluate_pair(&pair);
    assert!(!degenerate);
    assert_eq!(m.mae, 0.0);
    assert_eq!(m.miou, 1.0);
    assert_eq!(m.s_measure, 1.0);
    assert!((1.0 - m.e_mean) <= 1.0 / 256.0);
    assert_eq!(m.e_adaptive, 1.0);
    assert_eq!(m.f_weighted, 1.0);
    assert_eq!((m.f_adaptive, m.f_mean, m.f_max), (1.0, 1.0, 1.0));
}

#[test]
fn inverted_prediction_scores_near_zero() {
    let gt = centered_square(32, 8, 24);
    let pred: Vec<f64> = gt.iter().map(|&g| 1.0 - g as u8 as f64).collect();
    let pair = MaskPair::new(pred, gt, 32, 32).unwrap();
    assert!(metrics::f_weighted(&pair).value < 0.05);
    assert_eq!(metrics::e_measure(&pair, EMode::Adaptive), 0.0);
}

#[test]
fn degenerate_ground_truth_rules() {
    let zeros = MaskPair::new(vec![0.0f64; 16], vec![false; 16], 4, 4).unwrap();
    assert_eq!(metrics::s_measure(&zeros, 0.5), 1.0);
    let wf = metrics::f_weighted(&zeros);
    assert!(wf.degenerate && wf.value == 0.0);
    let ones = MaskPair::new(vec![0.25f64; 16], vec![true; 16], 4, 4).unwrap();
    assert_eq!(metrics::s_measure(&ones, 0.5), 0.25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn metric_laws_on_random_pairs(
        h in 1usize..12, w in 1usize..12, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let pred: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { rng.random_range(0..2) as f64 } else { rng.random() }).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let pair = MaskPair::new(pred.clone(), gt.clone(), h, w).unwrap();
        let (m, _) = metrics::evaluate_pair(&pair);
        for (name, v) in MetricValues::NAMES.iter().zip(m.as_array()) {
            prop_assert!((0.0..=1.0).contains(&v), "{name} = {v}");
        }
        prop_assert!(m.f_max >= m.f_mean && m.f_max >= m.f_adaptive);
        let comp = MaskPair::new(pred.iter().map(|p| 1.0 - p).collect(), gt.iter().map(|g| !g).collect(), h, w).unwrap();
        prop_assert!((metrics::mae(&comp) - m.mae).abs() < 1e-12);
    }
}
