//! Binary segmentation metrics: MAE, mIoU, S-measure, E-measure,
//! weighted F-measure and the F-measure curve, plus dataset aggregation.
//!
//! Threshold conventions (shared with the golden-value generator in
//! `tests/oracle/metric_oracle.py`):
//! - E-measure sweeps `t = k/255`, `k = 0..=255`, binarizing `pred >= t`.
//! - The F curve sweeps `t = (k+1)/256`, `k = 0..=255`, binarizing `pred >= t`.
//! - Adaptive thresholds start at `min(1, 2·mean(pred))`; for F it is then
//!   rounded up onto the curve grid, so `f_max >= f_adaptive` always holds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A prediction in `[0, 1]` and its binary ground truth, both row-major.
#[derive(Clone, Debug)]
pub struct MaskPair<T> {
    pred: Vec<T>,
    gt: Vec<bool>,
    height: usize,
    width: usize,
}

impl<T: Scalar> MaskPair<T> {
    /// Clamps `pred` into `[0, 1]`; non-finite predictions are rejected.
    pub fn new(pred: Vec<T>, gt: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if pred.len() != n || gt.len() != n || n == 0 {
            return Err(Error::Argument(format!(
                "mask pair of {height}x{width} needs {n} values, got pred {} and gt {}",
                pred.len(),
                gt.len()
            )));
        }
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("prediction contains non-finite values".into()));
        }
        let pred = pred.into_iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        Ok(Self {
            pred,
            gt,
            height,
            width,
        })
    }

    /// 8-bit maps: prediction scaled by 1/255, ground truth foreground at `>= 128`.
    pub fn from_gray(pred: &[u8], gt: &[u8], height: usize, width: usize) -> Result<Self> {
        let p = pred.iter().map(|&v| T::lit(v as f64) / T::lit(255.0)).collect();
        let g = gt.iter().map(|&v| v >= 128).collect();
        Self::new(p, g, height, width)
    }

    pub fn pred(&self) -> &[T] {
        &self.pred
    }

    pub fn gt(&self) -> &[bool] {
        &self.gt
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn len(&self) -> usize {
        self.gt.len()
    }

    fn fg_count(&self) -> usize {
        self.gt.iter().filter(|&&g| g).count()
    }

    fn pred_mean(&self) -> f64 {
        self.pred.iter().map(|v| v.as_f64()).sum::<f64>() / self.len() as f64
    }
}

pub fn mae<T: Scalar>(pair: &MaskPair<T>) -> f64 {
    let s: f64 = pair
        .pred
        .iter()
        .zip(&pair.gt)
        .map(|(p, &g)| (p.as_f64() - g as u8 as f64).abs())
        .sum();
    s / pair.len() as f64
}

/// IoU of `pred >= threshold` against the ground truth; 1 when both are empty.
pub fn miou<T: Scalar>(pair: &MaskPair<T>, threshold: f64) -> f64 {
    let t = T::lit(threshold);
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, &g) in pair.pred.iter().zip(&pair.gt) {
        let b = *p >= t;
        inter += (b && g) as usize;
        union += (b || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn s_object(vals: &[f64]) -> f64 {
    let (x, sigma) = mean_std(vals);
    2.0 * x / (x * x + 1.0 + sigma)
}

/// SSIM of one region, without stabilising constants.
fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let x = p.iter().sum::<f64>() / n as f64;
    let y = g.iter().sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (a, b) in p.iter().zip(g) {
            sx += (a - x) * (a - x);
            sy += (b - y) * (b - y);
            sxy += (a - x) * (b - y);
        }
        let d = (n - 1) as f64;
        (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Structure measure `α·S_object + (1 − α)·S_region`, floored at 0.
pub fn s_measure<T: Scalar>(pair: &MaskPair<T>, alpha: f64) -> f64 {
    let n = pair.len();
    let fg = pair.fg_count();
    let p: Vec<f64> = pair.pred.iter().map(|v| v.as_f64()).collect();
    if fg == 0 {
        return 1.0 - p.iter().sum::<f64>() / n as f64;
    }
    if fg == n {
        return p.iter().sum::<f64>() / n as f64;
    }
    let u = fg as f64 / n as f64;
    let fg_vals: Vec<f64> = p.iter().zip(&pair.gt).filter(|(_, &g)| g).map(|(&v, _)| v).collect();
    let bg_vals: Vec<f64> = p
        .iter()
        .zip(&pair.gt)
        .filter(|(_, &g)| !g)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    let object = u * s_object(&fg_vals) + (1.0 - u) * s_object(&bg_vals);

    let (h, w) = (pair.height, pair.width);
    let (mut sum_r, mut sum_c) = (0usize, 0usize);
    for (i, _) in pair.gt.iter().enumerate().filter(|(_, &g)| g) {
        sum_r += i / w;
        sum_c += i % w;
    }
    // split row/column: centroid rounded half-to-even, plus one
    let cy = (sum_r as f64 / fg as f64).round_ties_even() as usize + 1;
    let cx = (sum_c as f64 / fg as f64).round_ties_even() as usize + 1;
    let (cy, cx) = (cy.min(h), cx.min(w));
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut pb = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut gb = Vec::with_capacity(pb.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                pb.push(p[r * w + c]);
                gb.push(pair.gt[r * w + c] as u8 as f64);
            }
        }
        ssim(&pb, &gb)
    };
    let region = w1 * block(0, cy, 0, cx)
        + w2 * block(0, cy, cx, w)
        + w3 * block(cy, h, 0, cx)
        + w4 * block(cy, h, cx, w);
    (alpha * object + (1.0 - alpha) * region).max(0.0)
}

/// Counts of pixels passing each threshold of an increasing grid.
///
/// `fg[k]`/`bg[k]` = foreground/background pixels with `pred >= thresholds[k]`.
struct SweepCounts {
    fg: Vec<usize>,
    bg: Vec<usize>,
}

fn sweep<T: Scalar>(pair: &MaskPair<T>, thresholds: &[T], scale: f64, offset: isize) -> SweepCounts {
    let m = thresholds.len();
    let mut hist_fg = vec![0usize; m + 1];
    let mut hist_bg = vec![0usize; m + 1];
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        // largest k with thresholds[k] <= p, starting from an estimate and
        // corrected with exact comparisons in the scalar type
        let mut k = ((p.as_f64() * scale).floor() as isize + offset).clamp(-1, m as isize - 1);
        while k + 1 < m as isize && thresholds[(k + 1) as usize] <= p {
            k += 1;
        }
        while k >= 0 && thresholds[k as usize] > p {
            k -= 1;
        }
        let level = (k + 1) as usize;
        if g {
            hist_fg[level] += 1;
        } else {
            hist_bg[level] += 1;
        }
    }
    let mut fg = vec![0usize; m];
    let mut bg = vec![0usize; m];
    let (mut acc_f, mut acc_b) = (0, 0);
    for k in (0..m).rev() {
        acc_f += hist_fg[k + 1];
        acc_b += hist_bg[k + 1];
        fg[k] = acc_f;
        bg[k] = acc_b;
    }
    SweepCounts { fg, bg }
}

/// Mean enhanced-alignment score of a binary prediction given its counts.
fn enhanced_alignment(tp: usize, fp: usize, n_fg: usize, n: usize) -> f64 {
    if n_fg == 0 {
        return (n - fp) as f64 / n as f64;
    }
    if n_fg == n {
        return tp as f64 / n as f64;
    }
    let npos = tp + fp;
    let mb = npos as f64 / n as f64;
    let mg = n_fg as f64 / n as f64;
    let fn_ = n_fg - tp;
    let tn = n - n_fg - fp;
    let mut total = 0.0;
    for (count, b, g) in [(tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn_, 0.0, 1.0), (tn, 0.0, 0.0)] {
        if count == 0 {
            continue;
        }
        let (pp, pg) = (b - mb, g - mg);
        let xi = 2.0 * pp * pg / (pp * pp + pg * pg);
        total += count as f64 * (xi + 1.0) * (xi + 1.0) / 4.0;
    }
    total / n as f64
}

fn binary_counts<T: Scalar>(pair: &MaskPair<T>, t: T) -> (usize, usize) {
    let (mut tp, mut fp) = (0, 0);
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        if p >= t {
            if g {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EMode {
    Mean,
    Adaptive,
}

pub fn e_measure<T: Scalar>(pair: &MaskPair<T>, mode: EMode) -> f64 {
    let n = pair.len();
    let n_fg = pair.fg_count();
    match mode {
        EMode::Mean => {
            let thresholds: Vec<T> = (0..256).map(|k| T::lit(k as f64 / 255.0)).collect();
            let c = sweep(pair, &thresholds, 255.0, 0);
            let total: f64 = (0..256).map(|k| enhanced_alignment(c.fg[k], c.bg[k], n_fg, n)).sum();
            total / 256.0
        }
        EMode::Adaptive => {
            let t = T::lit((2.0 * pair.pred_mean()).min(1.0));
            let (tp, fp) = binary_counts(pair, t);
            enhanced_alignment(tp, fp, n_fg, n)
        }
    }
}

/// F-measure with the given `β²`; 0 whenever precision·recall is 0.
pub fn f_beta(tp: usize, npred: usize, ngt: usize, beta2: f64) -> f64 {
    let prec = if npred > 0 { tp as f64 / npred as f64 } else { 0.0 };
    let rec = if ngt > 0 { tp as f64 / ngt as f64 } else { 0.0 };
    let num = (1.0 + beta2) * prec * rec;
    if num == 0.0 {
        0.0
    } else {
        num / (beta2 * prec + rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FMeasures {
    pub adaptive: f64,
    pub mean: f64,
    pub max: f64,
    /// `(threshold, precision, recall, f)` for each of the 256 curve points.
    pub curve: Vec<(f64, f64, f64, f64)>,
}

pub const F_BETA2: f64 = 0.3;

pub fn f_measures<T: Scalar>(pair: &MaskPair<T>) -> FMeasures {
    let ngt = pair.fg_count();
    let grid: Vec<f64> = (0..256).map(|k| (k + 1) as f64 / 256.0).collect();
    let thresholds: Vec<T> = grid.iter().map(|&t| T::lit(t)).collect();
    let c = sweep(pair, &thresholds, 256.0, -1);
    let curve: Vec<_> = (0..256)
        .map(|k| {
            let (tp, npred) = (c.fg[k], c.fg[k] + c.bg[k]);
            let prec = if npred > 0 { tp as f64 / npred as f64 } else { 0.0 };
            let rec = if ngt > 0 { tp as f64 / ngt as f64 } else { 0.0 };
            (grid[k], prec, rec, f_beta(tp, npred, ngt, F_BETA2))
        })
        .collect();
    let mean = curve.iter().map(|c| c.3).sum::<f64>() / 256.0;
    let max = curve.iter().map(|c| c.3).fold(0.0, f64::max);
    let t = (2.0 * pair.pred_mean()).min(1.0);
    let t = ((256.0 * t).ceil() / 256.0).max(1.0 / 256.0);
    let (tp, fp) = binary_counts(pair, T::lit(t));
    FMeasures {
        adaptive: f_beta(tp, tp + fp, ngt, F_BETA2),
        mean,
        max,
        curve,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WeightedF {
    pub value: f64,
    /// Set when the ground truth has no foreground and the score is defined as 0.
    pub degenerate: bool,
}

/// Exact squared Euclidean distance to the nearest `true` cell
/// (separable lower-envelope transform); `f64::INFINITY` if there is none.
pub fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let mut f = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            f[r] = d[r * w + c];
        }
        envelope_1d(&f[..h], &mut out[..h]);
        for r in 0..h {
            d[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&d[r * w..(r + 1) * w]);
        envelope_1d(&f[..w], &mut out[..w]);
        d[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    d
}

fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = f.iter().position(|x| x.is_finite());
    let Some(first) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let parabola = |p: usize| f[p] + (p * p) as f64;
        let mut s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        while s <= z[k] {
            k -= 1;
            s = (parabola(q) - parabola(v[k])) / (2.0 * (q - v[k]) as f64);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

fn gaussian_7x7() -> [[f64; 7]; 7] {
    let sigma: f64 = 5.0;
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (y, x) = (dy as f64 - 3.0, dx as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Weighted F-measure (`β² = 1`): errors on background pixels are diffused
/// from the nearest foreground pixel through a 7×7 Gaussian (σ = 5) and
/// background errors are amplified by `2 − exp(ln 0.5 · d / 5)`.
pub fn f_weighted<T: Scalar>(pair: &MaskPair<T>) -> WeightedF {
    let (h, w) = (pair.height, pair.width);
    let g = &pair.gt;
    let n_fg = pair.fg_count();
    if n_fg == 0 {
        return WeightedF {
            value: 0.0,
            degenerate: true,
        };
    }
    let err: Vec<f64> = pair
        .pred
        .iter()
        .zip(g)
        .map(|(p, &gv)| (p.as_f64() - gv as u8 as f64).abs())
        .collect();
    let d2 = squared_distance_transform(g, h, w);

    // Only background pixels inside some foreground pixel's 7×7 window feed
    // the smoothed error used below; those lie within squared distance 18.
    let mut et = err.clone();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if g[i] || d2[i] > 18.0 {
                continue;
            }
            et[i] = err[nearest_foreground(g, h, w, r, c, d2[i] as i64)];
        }
    }
    let kern = gaussian_7x7();
    let mut ew = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !g[i] {
                let b = 2.0 - ((0.5f64).ln() / 5.0 * d2[i].sqrt()).exp();
                ew[i] = err[i] * b;
                continue;
            }
            let mut acc = 0.0;
            for (dy, row) in kern.iter().enumerate() {
                let rr = r as isize + dy as isize - 3;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for (dx, kv) in row.iter().enumerate() {
                    let cc = c as isize + dx as isize - 3;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kv * et[rr as usize * w + cc as usize];
                }
            }
            ew[i] = if acc < err[i] { acc } else { err[i] };
        }
    }
    let ew_fg: f64 = ew.iter().zip(g).filter(|(_, &gv)| gv).map(|(v, _)| v).sum();
    let fpw: f64 = ew.iter().zip(g).filter(|(_, &gv)| !gv).map(|(v, _)| v).sum();
    let tpw = n_fg as f64 - ew_fg;
    let rec = 1.0 - ew_fg / n_fg as f64;
    let prec = if tpw + fpw > 0.0 { tpw / (tpw + fpw) } else { 0.0 };
    let den = rec + prec;
    let value = if den == 0.0 { 0.0 } else { 2.0 * rec * prec / den };
    WeightedF {
        value,
        degenerate: false,
    }
}

/// Index of the foreground pixel at squared distance `d2` from `(r, c)`,
/// preferring the smallest `(row, col)` among ties.
fn nearest_foreground(g: &[bool], h: usize, w: usize, r: usize, c: usize, d2: i64) -> usize {
    let reach = (d2 as f64).sqrt() as i64;
    for dy in -reach..=reach {
        let rem = d2 - dy * dy;
        if rem < 0 {
            continue;
        }
        let dx = (rem as f64).sqrt().round() as i64;
        if dx * dx != rem {
            continue;
        }
        let rr = r as i64 + dy;
        if rr < 0 || rr >= h as i64 {
            continue;
        }
        for cc in [c as i64 - dx, c as i64 + dx] {
            if cc >= 0 && cc < w as i64 && g[rr as usize * w + cc as usize] {
                return rr as usize * w + cc as usize;
            }
        }
    }
    unreachable!("distance transform guarantees a foreground pixel at distance {d2}")
}

/// All nine per-image scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mae: f64,
    pub miou: f64,
    pub s_measure: f64,
    pub e_mean: f64,
    pub e_adaptive: f64,
    pub f_weighted: f64,
    pub f_adaptive: f64,
    pub f_mean: f64,
    pub f_max: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 9] = [
        "mae",
        "miou",
        "s_measure",
        "e_mean",
        "e_adaptive",
        "f_weighted",
        "f_adaptive",
        "f_mean",
        "f_max",
    ];

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.mae,
            self.miou,
            self.s_measure,
            self.e_mean,
            self.e_adaptive,
            self.f_weighted,
            self.f_adaptive,
            self.f_mean,
            self.f_max,
        ]
    }

    fn from_array(a: [f64; 9]) -> Self {
        Self {
            mae: a[0],
            miou: a[1],
            s_measure: a[2],
            e_mean: a[3],
            e_adaptive: a[4],
            f_weighted: a[5],
            f_adaptive: a[6],
            f_mean: a[7],
            f_max: a[8],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|&n| n == name).map(|i| self.as_array()[i])
    }
}

pub const MIOU_THRESHOLD: f64 = 0.5;
pub const S_ALPHA: f64 = 0.5;

/// Every metric for one pair; also reports whether weighted F was degenerate.
pub fn evaluate_pair<T: Scalar>(pair: &MaskPair<T>) -> (MetricValues, bool) {
    let f = f_measures(pair);
    let fw = f_weighted(pair);
    (
        MetricValues {
            mae: mae(pair),
            miou: miou(pair, MIOU_THRESHOLD),
            s_measure: s_measure(pair, S_ALPHA),
            e_mean: e_measure(pair, EMode::Mean),
            e_adaptive: e_measure(pair, EMode::Adaptive),
            f_weighted: fw.value,
            f_adaptive: f.adaptive,
            f_mean: f.mean,
            f_max: f.max,
        },
        fw.degenerate,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub name: String,
    pub metrics: MetricValues,
    pub f_weighted_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub images: Vec<ImageRecord>,
    pub mean: MetricValues,
    /// Files present in only one of the two directories.
    pub unmatched: Vec<String>,
}

impl MetricReport {
    /// Averages records in the order given (callers pass file-name order).
    pub fn from_records(dataset: impl Into<String>, images: Vec<ImageRecord>, unmatched: Vec<String>) -> Self {
        let mut acc = [0.0; 9];
        for rec in &images {
            for (a, v) in acc.iter_mut().zip(rec.metrics.as_array()) {
                *a += v;
            }
        }
        let n = images.len().max(1) as f64;
        Self {
            dataset: dataset.into(),
            mean: MetricValues::from_array(acc.map(|v| v / n)),
            images,
            unmatched,
        }
    }

    /// Table order: S, weighted F, mean E, MAE, then the optional extras.
    pub fn csv_header(extended: bool) -> String {
        let mut cols = vec!["dataset", "S", "Fw", "E", "MAE"];
        if extended {
            cols.extend(["mIoU", "Fadp", "Fmean", "Fmax", "Eadp"]);
        }
        cols.join(",")
    }

    pub fn csv_row(&self, extended: bool) -> String {
        let m = &self.mean;
        let mut vals = vec![m.s_measure, m.f_weighted, m.e_mean, m.mae];
        if extended {
            vals.extend([m.miou, m.f_adaptive, m.f_mean, m.f_max, m.e_adaptive]);
        }
        let mut row = self.dataset.clone();
        for v in vals {
            row.push_str(&format!(",{v:.3}"));
        }
        row
    }
}

fn list_masks(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn load_gray(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_luma8())
}

/// Evaluates every prediction against the ground-truth mask with the same
/// file stem. Per-image work runs on the current rayon pool; results are
/// aggregated in lexicographic name order.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, dataset: &str) -> Result<MetricReport> {
    let preds = list_masks(pred_dir)?;
    let gts = list_masks(gt_dir)?;
    let names: Vec<&String> = preds.keys().filter(|k| gts.contains_key(*k)).collect();
    let unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        log::warn!("{} file(s) without a counterpart were skipped", unmatched.len());
    }
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "no common mask names between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let records: Vec<Result<ImageRecord>> = names
        .par_iter()
        .map(|name| {
            let p = load_gray(&preds[*name])?;
            let g = load_gray(&gts[*name])?;
            if p.dimensions() != g.dimensions() {
                return Err(Error::Dataset(format!(
                    "{name}: prediction is {}x{} but ground truth is {}x{}",
                    p.height(),
                    p.width(),
                    g.height(),
                    g.width()
                )));
            }
            let (w, h) = g.dimensions();
            let pair = MaskPair::<f64>::from_gray(p.as_raw(), g.as_raw(), h as usize, w as usize)?;
            let (metrics, degenerate) = evaluate_pair(&pair);
            Ok(ImageRecord {
                name: (*name).clone(),
                metrics,
                f_weighted_degenerate: degenerate,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_records(dataset, records, unmatched))
}
