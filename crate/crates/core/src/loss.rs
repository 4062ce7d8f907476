//! Structure loss: pixel-weighted BCE plus pixel-weighted IoU, both driven by
//! a boundary-emphasising weight map.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{kernels, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Side of the averaging window used by [`pixel_weights`].
pub const WEIGHT_WINDOW: usize = 31;
/// Weight added per unit of local disagreement between a pixel and its
/// neighbourhood mean.
pub const WEIGHT_GAIN: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub wbce: f64,
    pub wiou: f64,
}

fn check_binary<T: Scalar>(gt: &Tensor<T>) -> Result<()> {
    let bad = gt
        .data()
        .iter()
        .filter(|&&v| v != T::zero() && v != T::one())
        .count();
    if bad > 0 {
        return Err(Error::Validation(format!(
            "ground truth must be binary, found {bad} value(s) outside {{0, 1}}"
        )));
    }
    Ok(())
}

fn check_same<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    a.dims4().map(|_| ())
}

/// `ω = 1 + 5·|avgpool(gt) − gt|` with a 31×31 window, stride 1 and padding
/// 15, every weight in `[1, 6]`.
///
/// The window mean is taken over in-bounds pixels only, so a constant mask
/// has weight exactly 1 up to the border.
pub fn pixel_weights<T: Scalar>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = gt.dims4()?;
    check_binary(gt)?;
    let r = WEIGHT_WINDOW / 2;
    let gain = T::lit(WEIGHT_GAIN);
    let mut out = Vec::with_capacity(gt.numel());
    // summed-area table with a zero border row/column
    let mut sat = vec![T::zero(); (h + 1) * (w + 1)];
    for plane in gt.data().chunks(h * w).take(n * c) {
        for y in 0..h {
            let mut row = T::zero();
            for x in 0..w {
                row = row + plane[y * w + x];
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                    - sat[y0 * (w + 1) + x1]
                    - sat[y1 * (w + 1) + x0];
                let g = plane[y * w + x];
                let area = T::from_count((y1 - y0) * (x1 - x0));
                out.push(T::one() + gain * (s / area - g).abs());
            }
        }
    }
    Tensor::new(gt.shape().to_vec(), out)
}

fn per_image<T: Scalar>(t: &Tensor<T>) -> impl Iterator<Item = &[T]> {
    let n = t.shape()[0];
    t.data().chunks(t.numel() / n.max(1))
}

/// `max(z,0) − z·g + ln(1 + e^{−|z|})`, the overflow-free form of BCE on logits.
fn bce<T: Scalar>(z: T, g: T) -> T {
    z.max(T::zero()) - z * g + (-z.abs()).exp().ln_1p()
}

/// Per-image `Σ ω·bce / Σ ω`, averaged over the batch.
pub fn weighted_bce<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    check_same("weighted_bce", logits, gt)?;
    check_same("weighted_bce", logits, weights)?;
    let n = logits.shape()[0];
    let mut total = T::zero();
    for ((z, g), w) in per_image(logits).zip(per_image(gt)).zip(per_image(weights)) {
        let mut num = T::zero();
        let mut den = T::zero();
        for i in 0..z.len() {
            num = num + w[i] * bce(z[i], g[i]);
            den = den + w[i];
        }
        total = total + num / den;
    }
    Ok(total / T::from_count(n))
}

/// Per-image `1 − (Σω·p·g + 1)/(Σω·(p + g − p·g) + 1)` with `p = σ(z)`,
/// averaged over the batch.
pub fn weighted_iou<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>, weights: &Tensor<T>) -> Result<T> {
    check_same("weighted_iou", logits, gt)?;
    check_same("weighted_iou", logits, weights)?;
    let n = logits.shape()[0];
    let mut total = T::zero();
    for ((z, g), w) in per_image(logits).zip(per_image(gt)).zip(per_image(weights)) {
        let (inter, union) = iou_sums(z, g, w);
        total = total + T::one() - (inter + T::one()) / (union + T::one());
    }
    Ok(total / T::from_count(n))
}

fn iou_sums<T: Scalar>(z: &[T], g: &[T], w: &[T]) -> (T, T) {
    let mut inter = T::zero();
    let mut union = T::zero();
    for i in 0..z.len() {
        let p = kernels::sigmoid(z[i]);
        inter = inter + w[i] * p * g[i];
        union = union + w[i] * (p + g[i] - p * g[i]);
    }
    (inter, union)
}

/// Loss value and its gradient with respect to every logit.
pub fn structure_loss<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>) -> Result<(LossBreakdown, Vec<T>)> {
    check_same("structure_loss", logits, gt)?;
    let weights = pixel_weights(gt)?;
    let n = logits.shape()[0];
    let inv_n = T::one() / T::from_count(n);
    let mut grad = Vec::with_capacity(logits.numel());
    let (mut wbce, mut wiou) = (T::zero(), T::zero());
    for ((z, g), w) in per_image(logits).zip(per_image(gt)).zip(per_image(&weights)) {
        let wsum: T = w.iter().copied().sum();
        let mut num = T::zero();
        for i in 0..z.len() {
            num = num + w[i] * bce(z[i], g[i]);
        }
        wbce = wbce + num / wsum;
        let (inter, union) = iou_sums(z, g, w);
        let (i1, u1) = (inter + T::one(), union + T::one());
        wiou = wiou + T::one() - i1 / u1;
        for i in 0..z.len() {
            let p = kernels::sigmoid(z[i]);
            let d_bce = w[i] * (p - g[i]) / wsum;
            // d/dp of −I/U with dI/dp = ω·g and dU/dp = ω·(1 − g)
            let d_iou_dp = -(w[i] * g[i] * u1 - i1 * w[i] * (T::one() - g[i])) / (u1 * u1);
            grad.push((d_bce + d_iou_dp * p * (T::one() - p)) * inv_n);
        }
    }
    let (wbce, wiou) = (wbce * inv_n, wiou * inv_n);
    Ok((
        LossBreakdown {
            total: (wbce + wiou).as_f64(),
            wbce: wbce.as_f64(),
            wiou: wiou.as_f64(),
        },
        grad,
    ))
}

/// Records the structure loss of the logits held in `logits` on the tape.
pub fn loss_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>) -> Result<(Var, LossBreakdown)> {
    let (breakdown, grad) = structure_loss(tape.value(logits), gt)?;
    let total = T::lit(breakdown.wbce) + T::lit(breakdown.wiou);
    let var = tape.scalar_with_grad(logits, total, grad)?;
    Ok((var, breakdown))
}
