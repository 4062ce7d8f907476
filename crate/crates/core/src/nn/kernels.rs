//! Slice-level compute kernels shared by the tape ops and by non-differentiable
//! callers (image preprocessing, prediction post-processing).

use crate::scalar::Scalar;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// lands inside the image.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        // largest ox with ox*stride + kx - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.c_out * out_plane];
    for bi in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(bi * g.c_out + o) * out_plane..][..out_plane];
            if let Some(b) = b {
                dst.fill(b[o]);
            }
            for c in 0..g.c_in {
                let src = &x[(bi * g.c_in + c) * in_plane..][..in_plane];
                let wk = &w[(o * g.c_in + c) * g.k * g.k..][..g.k * g.k];
                if g.pointwise() {
                    axpy(dst, wk[0], src);
                    continue;
                }
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let orow = &mut dst[oy * g.ow..][..g.ow];
                            let irow = &src[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let off = lo + kx - g.pad;
                                axpy(&mut orow[lo..hi], wv, &irow[off..off + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    orow[ox] = orow[ox] + wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`, each only when requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let gb = want_b.then(|| {
        (0..g.c_out)
            .map(|o| {
                (0..g.n)
                    .map(|bi| {
                        grad_out[(bi * g.c_out + o) * out_plane..][..out_plane]
                            .iter()
                            .copied()
                            .sum::<T>()
                    })
                    .sum::<T>()
            })
            .collect()
    });
    if !want_x && !want_w {
        return (gx, gw, gb);
    }
    for bi in 0..g.n {
        for o in 0..g.c_out {
            let go = &grad_out[(bi * g.c_out + o) * out_plane..][..out_plane];
            for c in 0..g.c_in {
                let src = &x[(bi * g.c_in + c) * in_plane..][..in_plane];
                let kbase = (o * g.c_in + c) * g.k * g.k;
                if g.pointwise() {
                    if let Some(gw) = gw.as_mut() {
                        gw[kbase] = gw[kbase] + dot(go, src);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxp = &mut gx[(bi * g.c_in + c) * in_plane..][..in_plane];
                        axpy(gxp, w[kbase], go);
                    }
                    continue;
                }
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = kbase + ky * g.k + kx;
                        let wv = w[widx];
                        let (lo, hi) = g.col_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &go[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let off = lo + kx - g.pad;
                                if want_w {
                                    acc = acc + dot(&grow[lo..hi], &src[iy * g.w + off..][..hi - lo]);
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let gxr = &mut gx[(bi * g.c_in + c) * in_plane + iy * g.w + off..]
                                        [..hi - lo];
                                    axpy(gxr, wv, &grow[lo..hi]);
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    if want_w {
                                        acc = acc + grow[ox] * src[iy * g.w + ix];
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        let idx = (bi * g.c_in + c) * in_plane + iy * g.w + ix;
                                        gx[idx] = gx[idx] + wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-output-index source taps for one axis of a bilinear resize with
/// half-pixel centres (align-corners = false).
#[derive(Clone, Debug)]
pub struct AxisTaps<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub frac: Vec<T>,
}

pub fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> AxisTaps<T> {
    let scale = input as f64 / output as f64;
    let mut taps = AxisTaps {
        i0: Vec::with_capacity(output),
        i1: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        taps.i0.push(i0);
        taps.i1.push(i1);
        taps.frac.push(T::lit(src - i0 as f64));
    }
    taps
}

/// Resizes every `(h, w)` plane in `x` (`planes` of them, contiguous).
pub fn resize_bilinear_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    let one = T::one();
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let (r0, r1, fy) = (ty.i0[oy], ty.i1[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                let top = src[r0 * w + c0] * (one - fx) + src[r0 * w + c1] * fx;
                let bot = src[r1 * w + c0] * (one - fx) + src[r1 * w + c1] * fx;
                dst[oy * ow + ox] = top * (one - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_planes_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return grad_out.to_vec();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut gx = vec![T::zero(); planes * h * w];
    let one = T::one();
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gx[p * h * w..][..h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (ty.i0[oy], ty.i1[oy], ty.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (tx.i0[ox], tx.i1[ox], tx.frac[ox]);
                let gval = go[oy * ow + ox];
                let gt = gval * (one - fy);
                let gb = gval * fy;
                dst[r0 * w + c0] = dst[r0 * w + c0] + gt * (one - fx);
                dst[r0 * w + c1] = dst[r0 * w + c1] + gt * fx;
                dst[r1 * w + c0] = dst[r1 * w + c0] + gb * (one - fx);
                dst[r1 * w + c1] = dst[r1 * w + c1] + gb * fx;
            }
        }
    }
    gx
}

/// Nearest-neighbour resize with half-pixel centres; preserves the value set.
pub fn resize_nearest_planes<T: Copy>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let map = |d: usize, input: usize, output: usize| {
        (((d as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    let rows: Vec<usize> = (0..oh).map(|d| map(d, h, oh)).collect();
    let cols: Vec<usize> = (0..ow).map(|d| map(d, w, ow)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for &r in &rows {
            for &c in &cols {
                out.push(src[r * w + c]);
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
