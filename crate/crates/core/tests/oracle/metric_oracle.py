#!/usr/bin/env python3
"""Independent reference transcription of the binary-segmentation metrics.

Written directly from the canonical metric definitions (S-measure, E-measure,
weighted F-measure, F-measure curve) with plain per-pixel numpy and brute-force
loops. It shares no code with the Rust implementation; its only job is to
produce the frozen golden values in ../fixtures/metric_oracle.json.

Conventions pinned here and in the Rust crate (see metrics.rs):
  * pred is an 8-bit level k/255, gt is boolean.
  * E-measure thresholds k/255 for k = 0..255, binarize pred >= t.
  * F curve thresholds (k+1)/256 for k = 0..255, binarize pred >= t.
  * adaptive F threshold snapped up to the curve grid.
  * nearest-foreground ties in the distance transform go to the smallest
    (row, col).

Usage: python3 metric_oracle.py > ../fixtures/metric_oracle.json
"""

import json
import math
import sys

import numpy as np

H = W = 16
N_PAIRS = 50


def make_pair(i):
    rng = np.random.default_rng(1000 + i)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    if i == N_PAIRS - 2:
        gt = np.zeros((H, W), dtype=bool)
    elif i == N_PAIRS - 1:
        gt = np.ones((H, W), dtype=bool)
    else:
        gt = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(3, 13, size=2)
            ry, rx = rng.uniform(2, 6, size=2)
            gt |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        if not gt.any():
            gt[8, 8] = True
    kind = i % 5
    g = gt.astype(np.float64)
    if kind == 0:
        p = 0.7 * g + 0.15 + rng.normal(0, 0.2, size=(H, W))
    elif kind == 1:
        p = rng.uniform(0, 1, size=(H, W))
    elif kind == 2:
        p = np.roll(g, shift=(rng.integers(-2, 3), rng.integers(-2, 3)), axis=(0, 1))
        p = 0.9 * p + rng.uniform(0, 0.1, size=(H, W))
    elif kind == 3:
        p = g.copy()
    else:
        p = 0.5 * g + 0.5 * rng.beta(0.5, 0.5, size=(H, W))
    p = np.clip(p, 0.0, 1.0)
    pred_u8 = np.rint(p * 255).astype(np.int64)
    return gt, pred_u8


def mae(p, g):
    return float(np.mean(np.abs(p - g.astype(np.float64))))


def miou(p, g, thr=0.5):
    b = p >= thr
    union = np.count_nonzero(b | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(b & g) / union


def s_object(vals):
    x = float(np.mean(vals))
    if vals.size > 1:
        sigma = float(np.std(vals, ddof=1))
    else:
        sigma = 0.0
    return 2.0 * x / (x * x + 1.0 + sigma)


def ssim(pb, gb):
    n = pb.size
    if n == 0:
        return 0.0
    gb = gb.astype(np.float64)
    x = float(np.mean(pb))
    y = float(np.mean(gb))
    if n > 1:
        sx = float(np.sum((pb - x) ** 2)) / (n - 1)
        sy = float(np.sum((gb - y) ** 2)) / (n - 1)
        sxy = float(np.sum((pb - x) * (gb - y))) / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0.0:
        return alpha / beta
    if beta == 0.0:
        return 1.0
    return 0.0


def s_measure(p, g, alpha=0.5):
    y = float(np.mean(g))
    if y == 0.0:
        return 1.0 - float(np.mean(p))
    if y == 1.0:
        return float(np.mean(p))
    u = y
    obj = u * s_object(p[g]) + (1.0 - u) * s_object(1.0 - p[~g])
    rows, cols = np.nonzero(g)
    cy = int(np.round(rows.mean())) + 1
    cx = int(np.round(cols.mean())) + 1
    h, w = g.shape
    area = h * w
    w1 = cx * cy / area
    w2 = cy * (w - cx) / area
    w3 = (h - cy) * cx / area
    w4 = 1.0 - w1 - w2 - w3
    reg = (
        w1 * ssim(p[0:cy, 0:cx], g[0:cy, 0:cx])
        + w2 * ssim(p[0:cy, cx:w], g[0:cy, cx:w])
        + w3 * ssim(p[cy:h, 0:cx], g[cy:h, 0:cx])
        + w4 * ssim(p[cy:h, cx:w], g[cy:h, cx:w])
    )
    return max(0.0, alpha * obj + (1.0 - alpha) * reg)


def enhanced_alignment(b, g):
    n = g.size
    if not g.any():
        return float(np.count_nonzero(~b)) / n
    if g.all():
        return float(np.count_nonzero(b)) / n
    bf = b.astype(np.float64)
    gf = g.astype(np.float64)
    phi_p = bf - bf.mean()
    phi_g = gf - gf.mean()
    xi = 2.0 * phi_p * phi_g / (phi_p * phi_p + phi_g * phi_g)
    enh = (xi + 1.0) ** 2 / 4.0
    return float(np.mean(enh))


def e_measures(p, g):
    vals = [enhanced_alignment(p >= k / 255.0, g) for k in range(256)]
    t = min(1.0, 2.0 * float(np.mean(p)))
    return float(np.mean(vals)), enhanced_alignment(p >= t, g)


def f_beta(b, g, beta2=0.3):
    tp = np.count_nonzero(b & g)
    npred = np.count_nonzero(b)
    ngt = np.count_nonzero(g)
    prec = tp / npred if npred > 0 else 0.0
    rec = tp / ngt if ngt > 0 else 0.0
    num = (1.0 + beta2) * prec * rec
    if num == 0.0:
        return 0.0
    return num / (beta2 * prec + rec)


def f_measures(p, g):
    curve = [f_beta(p >= (k + 1) / 256.0, g) for k in range(256)]
    t = min(1.0, 2.0 * float(np.mean(p)))
    t = max(math.ceil(256.0 * t) / 256.0, 1.0 / 256.0)
    return f_beta(p >= t, g), float(np.mean(curve)), float(np.max(curve))


def gaussian_kernel(size=7, sigma=5.0):
    r = (size - 1) // 2
    k = np.zeros((size, size))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            k[dy + r, dx + r] = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    k[k < np.finfo(np.float64).eps * k.max()] = 0.0
    return k / k.sum()


def f_weighted(p, g, beta2=1.0):
    if not g.any():
        return 0.0
    h, w = g.shape
    gf = g.astype(np.float64)
    err = np.abs(p - gf)
    fg = [(r, c) for r in range(h) for c in range(w) if g[r, c]]
    dist = np.zeros((h, w))
    et = err.copy()
    for r in range(h):
        for c in range(w):
            if g[r, c]:
                continue
            best = None
            for fr, fc in fg:
                d2 = (fr - r) ** 2 + (fc - c) ** 2
                if best is None or d2 < best[0]:
                    best = (d2, fr, fc)
            dist[r, c] = math.sqrt(best[0])
            et[r, c] = err[best[1], best[2]]
    k = gaussian_kernel()
    ea = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for dy in range(-3, 4):
                for dx in range(-3, 4):
                    rr, cc = r + dy, c + dx
                    if 0 <= rr < h and 0 <= cc < w:
                        acc += k[dy + 3, dx + 3] * et[rr, cc]
            ea[r, c] = acc
    min_e_ea = np.where(g & (ea < err), ea, err)
    b = np.where(~g, 2.0 - np.exp(math.log(0.5) / 5.0 * dist), 1.0)
    ew = min_e_ea * b
    tpw = float(np.sum(gf)) - float(np.sum(ew[g]))
    fpw = float(np.sum(ew[~g]))
    rec = 1.0 - float(np.mean(ew[g]))
    prec = tpw / (tpw + fpw) if (tpw + fpw) > 0 else 0.0
    den = rec + beta2 * prec
    if den == 0.0:
        return 0.0
    return (1.0 + beta2) * rec * prec / den


def main():
    pairs = []
    for i in range(N_PAIRS):
        gt, pred_u8 = make_pair(i)
        p = pred_u8.astype(np.float64) / 255.0
        e_mean, e_adp = e_measures(p, gt)
        f_adp, f_mean, f_max = f_measures(p, gt)
        pairs.append(
            {
                "index": i,
                "gt": gt.astype(int).tolist(),
                "pred_u8": pred_u8.tolist(),
                "metrics": {
                    "mae": mae(p, gt),
                    "miou": miou(p, gt),
                    "s_measure": s_measure(p, gt),
                    "e_mean": e_mean,
                    "e_adaptive": e_adp,
                    "f_weighted": f_weighted(p, gt),
                    "f_adaptive": f_adp,
                    "f_mean": f_mean,
                    "f_max": f_max,
                },
            }
        )
    json.dump({"height": H, "width": W, "pairs": pairs}, sys.stdout, indent=1)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
