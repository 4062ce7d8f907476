//! Acceptance criteria, one PASS/FAIL line each with the pinned tolerance
//! and the runtime budget. Runs under `cargo test` (custom harness); exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;
use unext_core::data::{synthesize, Sample, SynthSpec};
use unext_core::glue::pca_scores;
use unext_core::gradcheck::{self, GradcheckConfig};
use unext_core::loss::{pixel_weights, weighted_bce, weighted_iou};
use unext_core::metrics::{evaluate_pair, MaskPair, MetricValues};
use unext_core::model::{param_group, AuxMode, ModelConfig, SegModel};
use unext_core::nn::{Mode, Tape, Tensor};
use unext_core::optim::cosine_lr;
use unext_core::trainer::{evaluate_samples, LogRow, TrainConfig, Trainer};
use unext_core::{DType, Scalar};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn c1_half_resolution() -> Outcome {
    let mut seen = Vec::new();
    for (high, low, patch) in [(352, 352, 16), (1024, 448, 14)] {
        let mut cfg = ModelConfig::toy().with_resolution(high, low);
        cfg.plain.patch_size = patch;
        let mut model = SegModel::<f32>::new(&cfg).unwrap();
        let logits = model
            .logits(&Tensor::zeros(&[1, 3, high, high]), &Tensor::zeros(&[1, 3, low, low]), Mode::Eval)
            .unwrap();
        ensure!(
            logits.shape() == [1, 1, high / 2, high / 2],
            "high_res {high}: logits {:?}",
            logits.shape()
        );
        seen.push(format!("{high}->{}x{}", high / 2, high / 2));
    }
    Ok(format!("logits {} (exact)", seen.join(", ")))
}

fn c2_glue_widths() -> Outcome {
    let cfg = ModelConfig::default();
    ensure!(cfg.aux_dim() == Some(1024), "aux_dim {:?}", cfg.aux_dim());
    let mut model = SegModel::<f32>::shape_only(&cfg).unwrap();
    let mut tape = Tape::<f32>::symbolic();
    let high = tape.input(Tensor::symbolic(&[1, 3, 1024, 1024]), false);
    let low = tape.input(Tensor::symbolic(&[1, 3, 448, 448]), false);
    model.forward(&mut tape, high, Some(low), Mode::Train).unwrap();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for s in 1..=4 {
        let scope = format!("glue.stage{s}");
        let events: Vec<_> = tape.events().iter().filter(|e| e.scope == scope).collect();
        let cat: Vec<_> = events.iter().filter(|e| e.op == "concat").collect();
        ensure!(cat.len() == 1, "{scope}: {} concat events", cat.len());
        pre.push(cat[0].shape[1]);
        post.push(events.last().expect("stage has events").shape[1]);
    }
    ensure!(pre == [288, 576, 1152, 2304], "concat widths {pre:?}");
    ensure!(post == [128; 4], "compressed widths {post:?}");
    Ok(format!("concat {pre:?}, compressed {post:?} (exact, shape-only trace)"))
}

fn c3_dual_resolution_grid() -> Outcome {
    let mut rows = Vec::new();
    for (high, low, patch) in [(352, 352, 16), (1024, 224, 14), (1024, 672, 14), (1024, 448, 14)] {
        let mut cfg = ModelConfig::toy().with_resolution(high, low);
        cfg.plain.patch_size = patch;
        let mut model = SegModel::<f32>::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(high as u64 + low as u64);
        let h = Tensor::from_fn(&[1, 3, high, high], |_| rng.random_range(-2.0f32..2.0));
        let l = Tensor::from_fn(&[1, 3, low, low], |_| rng.random_range(-2.0f32..2.0));
        let mut tape = model.new_tape();
        let (hv, lv) = (tape.input(h, false), tape.input(l, false));
        let out = model.forward(&mut tape, hv, Some(lv), Mode::Eval).unwrap();
        let grid = low / patch;
        ensure!(tape.shape(out.aux.unwrap()) == [1, 32, grid, grid], "{high}/{low}: aux {:?}", tape.shape(out.aux.unwrap()));
        let pyr: Vec<usize> = out.pyramid.iter().map(|&v| tape.shape(v)[2]).collect();
        ensure!(pyr == [high / 4, high / 8, high / 16, high / 32], "{high}/{low}: pyramid {pyr:?}");
        ensure!(tape.shape(out.logits) == [1, 1, high / 2, high / 2], "{high}/{low}: logits");
        ensure!(tape.value(out.logits).all_finite(), "{high}/{low}: non-finite logits");
        rows.push(format!("{high}/{low}"));
    }
    Ok(format!("{} built and ran forward with exact shapes", rows.join(", ")))
}

fn overfit_samples() -> Vec<Sample> {
    synthesize(&SynthSpec::new(8, 64, 42)).unwrap().0
}

fn c4_freeze_contract() -> Outcome {
    let cfg = ModelConfig::toy();
    let init = SegModel::<f32>::new(&cfg).unwrap();
    let samples = overfit_samples();
    let tc = TrainConfig {
        lr0: 1e-3,
        epochs: 7,
        ..Default::default()
    };
    let mut t = Trainer::<f32>::new(&cfg, &tc).unwrap();
    let rows = t.run(&samples, Some(50), |_, _| Ok(())).unwrap();
    ensure!(rows.len() == 50, "{} steps", rows.len());
    let (mut frozen, mut learnable, mut changed) = (0, 0, 0);
    for (name, p) in t.model.params.iter() {
        let before = &init.params.get(name).unwrap().values;
        match param_group(name) {
            "hier-backbone" | "plain-backbone" => {
                frozen += 1;
                ensure!(!p.trainable && p.values.bit_eq(before), "frozen `{name}` changed");
            }
            _ => {
                learnable += 1;
                changed += usize::from(!p.values.bit_eq(before));
            }
        }
    }
    let frac = changed as f64 / learnable as f64;
    ensure!(frac >= 0.95, "only {changed}/{learnable} learnable tensors changed");
    Ok(format!(
        "50 steps: {frozen} frozen tensors bit-identical; {changed}/{learnable} learnable changed ({:.0}% >= 95%)",
        100.0 * frac
    ))
}

fn c5_gradcheck() -> Outcome {
    let cfg = GradcheckConfig::default();
    let report = gradcheck::run(&cfg, None).unwrap();
    let summary: Vec<String> = report
        .groups
        .iter()
        .map(|g| format!("{} {:.1e}", g.group, g.max_rel_error))
        .collect();
    ensure!(report.passed(), "max rel error above {:e}: {}", cfg.tolerance, summary.join(", "));
    Ok(format!("f64 central differences, rel err <= 1e-4: {}", summary.join(", ")))
}

fn map(h: usize, w: usize, v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![1, 1, h, w], v).unwrap()
}

fn c6_loss_exactness() -> Outcome {
    let ones = map(4, 4, vec![1.0; 16]);
    let iou = weighted_iou(&map(4, 4, vec![-1e4; 16]), &ones, &ones).unwrap();
    ensure!((iou - 16.0 / 17.0).abs() <= 1e-9, "weighted_iou {iou}");
    let gt = map(4, 4, (0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect());
    let w = pixel_weights(&gt).unwrap();
    let bce = weighted_bce(&map(4, 4, vec![0.0; 16]), &gt, &w).unwrap();
    ensure!((bce - std::f64::consts::LN_2).abs() <= 1e-9, "weighted_bce {bce}");
    for c in [0.0, 1.0] {
        let w = pixel_weights(&map(40, 40, vec![c; 1600])).unwrap();
        ensure!(w.data().iter().all(|&x| x == 1.0), "pixel_weights of constant {c} not 1");
    }
    Ok(format!("wIoU {iou:.12} vs 16/17, wBCE {bce:.12} vs ln2 (+-1e-9); constant-gt weights == 1"))
}

#[derive(Deserialize)]
struct Fixture {
    height: usize,
    width: usize,
    pairs: Vec<OraclePair>,
}

#[derive(Deserialize)]
struct OraclePair {
    gt: Vec<Vec<u8>>,
    pred_u8: Vec<Vec<u8>>,
    metrics: MetricValues,
}

fn c7_metric_oracle() -> Outcome {
    let f: Fixture = serde_json::from_str(include_str!("fixtures/metric_oracle.json")).unwrap();
    ensure!(f.pairs.len() == 50 && (f.height, f.width) == (16, 16), "fixture is not 50 16x16 pairs");
    let mut worst = 0.0f64;
    for (k, p) in f.pairs.iter().enumerate() {
        let pred: Vec<u8> = p.pred_u8.concat();
        let gt: Vec<u8> = p.gt.concat().iter().map(|&g| g * 255).collect();
        let pair = MaskPair::<f64>::from_gray(&pred, &gt, 16, 16).unwrap();
        let (got, _) = evaluate_pair(&pair);
        for (name, (g, e)) in MetricValues::NAMES.iter().zip(got.as_array().into_iter().zip(p.metrics.as_array())) {
            worst = worst.max((g - e).abs());
            ensure!((g - e).abs() <= 1e-6, "pair {k} {name}: {g} vs oracle {e}");
        }
    }
    let gt: Vec<bool> = (0..32 * 32).map(|i| (8..24).contains(&(i / 32)) && (8..24).contains(&(i % 32))).collect();
    let pred: Vec<f64> = gt.iter().map(|&g| f64::from(u8::from(g))).collect();
    let (m, degenerate) = evaluate_pair(&MaskPair::new(pred, gt, 32, 32).unwrap());
    ensure!(!degenerate, "perfect prediction flagged degenerate");
    ensure!(m.mae == 0.0 && m.miou == 1.0 && m.s_measure == 1.0, "mae/miou/s fixed point: {m:?}");
    ensure!(1.0 - m.e_mean <= 1.0 / 256.0 && m.e_adaptive == 1.0, "E fixed point: {m:?}");
    ensure!(m.f_weighted == 1.0 && (m.f_adaptive, m.f_mean, m.f_max) == (1.0, 1.0, 1.0), "F fixed point: {m:?}");
    Ok(format!("50 pairs x 9 metrics, max |diff| {worst:.1e} <= 1e-6; perfect-prediction fixed points hold"))
}

fn c8_cosine_endpoints() -> Outcome {
    let total = 1000;
    let (a, b, c) = (cosine_lr(0, total, 2e-4), cosine_lr(total / 2, total, 2e-4), cosine_lr(total, total, 2e-4));
    ensure!(a == 2.0e-4, "lr(0) = {a:e}");
    ensure!((b - 1.0e-4).abs() <= 1e-12, "lr(mid) = {b:e}");
    ensure!(c == 0.0, "lr(end) = {c:e}");
    Ok(format!("lr(0)={a:e} exact, lr(mid)={b:e} (+-1e-12), lr(end)={c:e} exact"))
}

/// Overfit settings: the whole set per step, 300 steps, flips on.
fn overfit(aux_mode: AuxMode) -> (f64, Vec<LogRow>) {
    let samples = overfit_samples();
    let cfg = ModelConfig {
        aux_mode,
        ..ModelConfig::toy()
    };
    let tc = TrainConfig {
        lr0: 3e-3,
        epochs: 300,
        batch: 8,
        ..Default::default()
    };
    let mut t = Trainer::<f32>::new(&cfg, &tc).unwrap();
    let rows = t.run(&samples, None, |_, _| Ok(())).unwrap();
    let recs = evaluate_samples(&mut t.model, &samples).unwrap();
    (recs.iter().map(|r| r.metrics.miou).sum::<f64>() / recs.len() as f64, rows)
}

/// Means of consecutive 20-step windows.
fn window_means(rows: &[LogRow]) -> Vec<f64> {
    rows.chunks_exact(20).map(|c| c.iter().map(|r| r.total).sum::<f64>() / 20.0).collect()
}

fn c9_overfit() -> Outcome {
    let (with_aux, rows) = overfit(AuxMode::Dinov2Shape);
    ensure!(rows.len() <= 300, "{} steps", rows.len());
    ensure!(with_aux >= 0.95, "aux mIoU {with_aux:.4} < 0.95");
    let means = window_means(&rows);
    let rises = means.windows(2).filter(|w| w[1] > w[0]).count();
    ensure!(rises == 0, "smoothed loss rose in {rises} of {} windows: {means:?}", means.len() - 1);
    let (without, _) = overfit(AuxMode::None);
    ensure!(without >= 0.90, "aux_mode none mIoU {without:.4} < 0.90");
    Ok(format!(
        "300 steps: mIoU {with_aux:.4} >= 0.95, aux_mode none {without:.4} >= 0.90; 20-step loss means non-increasing"
    ))
}

fn toy_run<T: Scalar>(dtype: DType) -> Vec<LogRow> {
    let tc = TrainConfig {
        lr0: 1e-3,
        seed: 5,
        dtype,
        ..Default::default()
    };
    let mut t = Trainer::<T>::new(&ModelConfig::toy(), &tc).unwrap();
    t.run(&overfit_samples(), None, |_, _| Ok(())).unwrap()
}

fn c10_determinism() -> Outcome {
    let (a, b) = (toy_run::<f64>(DType::F64), toy_run::<f64>(DType::F64));
    ensure!(a.len() == 160 && a.len() == b.len(), "{} vs {} rows", a.len(), b.len());
    let bits = |r: &LogRow| [r.lr, r.wbce, r.wiou, r.total].map(f64::to_bits);
    ensure!(a.iter().zip(&b).all(|(x, y)| bits(x) == bits(y)), "64-bit logs differ");
    let (c, d) = (toy_run::<f32>(DType::F32), toy_run::<f32>(DType::F32));
    let mut worst = 0.0f64;
    for (x, y) in c.iter().zip(&d) {
        for (p, q) in [(x.wbce, y.wbce), (x.wiou, y.wiou), (x.total, y.total)] {
            worst = worst.max((p - q).abs() / p.abs().max(q.abs()).max(f64::MIN_POSITIVE));
        }
    }
    ensure!(c.len() == d.len() && worst <= 1e-7, "32-bit max rel diff {worst:e}");
    Ok(format!("2 x 160-step toy runs (20 epochs): 64-bit logs bitwise equal; 32-bit max rel diff {worst:.1e} <= 1e-7"))
}

fn c11_pca() -> Outcome {
    let v = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5, -0.7, 0.9];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scales: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let rank1 = Tensor::<f64>::from_fn(&[1, 8, 8, 8], |i| scales[i % 64] * v[i / 64]);
    let (pca, _) = pca_scores(&rank1, 3).unwrap();
    let ratio = pca.explained_variance_ratio()[0];
    ensure!(ratio >= 0.999, "rank-1 explained variance {ratio}");
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let map = Tensor::<f64>::from_fn(&[1, 8, 8, 8], |i| rows[i % 64][i / 64]);
        let (pca, _) = pca_scores(&map, 8).unwrap();
        let x = DMatrix::from_fn(64, 8, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(64, 8, |i, j| x[(i, j)] - mean[j]);
        let mut dense: Vec<f64> = SymmetricEigen::new(centred.transpose() * &centred / 63.0).eigenvalues.iter().copied().collect();
        dense.sort_by(|a, b| b.total_cmp(a));
        for (e, o) in pca.eigenvalues.iter().zip(&dense) {
            worst = worst.max((e - o).abs());
        }
    }
    ensure!(worst <= 1e-5, "eigenvalue error {worst:e}");
    Ok(format!("rank-1 explained {:.5}% >= 99.9%; 8-channel eigenvalues max |diff| {worst:.1e} <= 1e-5", 100.0 * ratio))
}

fn main() {
    let criteria: [(&str, &str, u64, fn() -> Outcome); 11] = [
        ("1", "half-resolution output law", 10, c1_half_resolution),
        ("2", "glue channel arithmetic", 10, c2_glue_widths),
        ("3", "dual-resolution grid", 60, c3_dual_resolution_grid),
        ("4", "freeze contract", 120, c4_freeze_contract),
        ("5", "end-to-end gradient check", 300, c5_gradcheck),
        ("6", "loss exactness", 1, c6_loss_exactness),
        ("7", "metric oracle equivalence", 30, c7_metric_oracle),
        ("8", "cosine schedule endpoints", 1, c8_cosine_endpoints),
        ("9", "overfit sanity", 600, c9_overfit),
        ("10", "determinism", 600, c10_determinism),
        ("11", "PCA diagnostic", 5, c11_pca),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, title, budget, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > Duration::from_secs(budget) => Err(format!("{detail}; over the {budget}s budget")),
            other => other,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] criterion {id:>2} {title}: {detail} ({:.1}s, budget {budget}s)", elapsed.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

