//! Dense glue layer: aligns auxiliary features to each hierarchical stage,
//! resizes, concatenates and compresses every stage to a common width. Also
//! hosts the PCA projection used to visualise auxiliary features.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, Initializer, ParamRegistry, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GlueConfig {
    /// Width of the auxiliary features; `None` builds the compress-only path.
    pub aux_dim: Option<usize>,
    pub stage_channels: [usize; 4],
    pub fused_channels: usize,
}

/// Tensor names: `glue.alignN.{w,b}` (auxiliary → stage width) and
/// `glue.compressN.{w,b}`, N = 1..4.
#[derive(Clone, Debug)]
pub struct Glue {
    pub cfg: GlueConfig,
    align: Option<Vec<Conv2d>>,
    compress: Vec<Conv2d>,
}

/// Every intermediate of a glue pass, for tracing.
#[derive(Clone, Debug)]
pub struct GlueOutput {
    /// Auxiliary features after alignment and resizing, one per stage.
    pub aligned: Vec<Var>,
    /// Stage features concatenated with `aligned` (empty without auxiliary input).
    pub concat: Vec<Var>,
    pub fused: [Var; 4],
}

impl Glue {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, cfg: &GlueConfig) -> Result<Self> {
        if cfg.fused_channels == 0 || cfg.stage_channels.contains(&0) || cfg.aux_dim == Some(0) {
            return Err(Error::Config("glue widths must be positive".into()));
        }
        let align = match cfg.aux_dim {
            Some(a) => Some(
                (0..4)
                    .map(|i| Conv2d::new(init, &format!("glue.align{}", i + 1), ConvSpec::pointwise(a, cfg.stage_channels[i])))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let widen = if cfg.aux_dim.is_some() { 2 } else { 1 };
        let compress = (0..4)
            .map(|i| {
                Conv2d::new(
                    init,
                    &format!("glue.compress{}", i + 1),
                    ConvSpec::pointwise(widen * cfg.stage_channels[i], cfg.fused_channels).init(Init::Scaled(1.0)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            align,
            compress,
        })
    }

    pub fn compress_layer(&self, stage: usize) -> &Conv2d {
        &self.compress[stage]
    }

    pub fn align_layer(&self, stage: usize) -> Option<&Conv2d> {
        self.align.as_ref().map(|a| &a[stage])
    }

    /// Fuses the pyramid with `aux` (required iff the glue was built with an
    /// auxiliary width). Output spatial dims equal the pyramid's.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        pyramid: [Var; 4],
        aux: Option<Var>,
    ) -> Result<GlueOutput> {
        for (i, &p) in pyramid.iter().enumerate() {
            let c = tape.shape(p).get(1).copied();
            if c != Some(self.cfg.stage_channels[i]) {
                return Err(Error::Config(format!(
                    "glue stage {} expects {} channels, got shape {:?}",
                    i + 1,
                    self.cfg.stage_channels[i],
                    tape.shape(p)
                )));
            }
        }
        let mut out = GlueOutput {
            aligned: Vec::new(),
            concat: Vec::new(),
            fused: pyramid,
        };
        match (&self.align, aux) {
            (Some(align), Some(aux)) => {
                let a_dim = self.cfg.aux_dim.unwrap_or(0);
                if tape.shape(aux).get(1).copied() != Some(a_dim) {
                    return Err(Error::Config(format!(
                        "glue expects {a_dim} auxiliary channels, got shape {:?}",
                        tape.shape(aux)
                    )));
                }
                for i in 0..4 {
                    tape.push_scope(format!("glue.stage{}", i + 1));
                    let (h, w) = (tape.shape(pyramid[i])[2], tape.shape(pyramid[i])[3]);
                    let mut a = align[i].forward(tape, reg, aux)?;
                    if tape.shape(a)[2..] != [h, w] {
                        a = tape.resize_bilinear(a, h, w)?;
                    }
                    let cat = tape.concat_channels(pyramid[i], a)?;
                    out.fused[i] = self.compress[i].forward(tape, reg, cat)?;
                    out.aligned.push(a);
                    out.concat.push(cat);
                    tape.pop_scope();
                }
            }
            (None, None) => {
                for i in 0..4 {
                    tape.push_scope(format!("glue.stage{}", i + 1));
                    out.fused[i] = self.compress[i].forward(tape, reg, pyramid[i])?;
                    tape.pop_scope();
                }
            }
            (Some(_), None) => return Err(Error::Config("glue was built for auxiliary features but none were given".into())),
            (None, Some(_)) => return Err(Error::Config("glue was built without auxiliary features".into())),
        }
        Ok(out)
    }
}

pub const PCA_MAX_ITERS: usize = 100;
pub const PCA_TOL: f64 = 1e-7;

/// Principal components of a sample matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues matching `components`.
    pub eigenvalues: Vec<f64>,
    /// Trace of the covariance (total variance).
    pub total_variance: f64,
}

impl Pca {
    /// Top-`k` components of `samples` (`n` rows of `d` features, row-major)
    /// of the sample covariance (divisor `n − 1`).
    pub fn fit(samples: &[f64], n: usize, d: usize, k: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::Argument(format!("cannot take {k} components of {d} channels")));
        }
        if n < 2 || samples.len() != n * d {
            return Err(Error::Argument(format!("PCA needs at least 2 samples of {d} features")));
        }
        let mut mean = vec![0.0; d];
        for row in samples.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        let mut centred = vec![0.0; d];
        for row in samples.chunks(d) {
            for (c, (v, m)) in centred.iter_mut().zip(row.iter().zip(&mean)) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centred[i];
                if ci == 0.0 {
                    continue;
                }
                for (cv, cj) in cov[i * d..(i + 1) * d].iter_mut().zip(&centred) {
                    *cv += ci * cj;
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

        // Block power iteration: every step multiplies the basis by the
        // covariance and re-orthonormalises it strongest-first (deflation by
        // Gram–Schmidt); a Rayleigh–Ritz rotation then separates components
        // whose eigenvalues are too close for plain iteration to split.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut basis: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        orthonormalise(&mut basis);
        let scale = total_variance.max(f64::MIN_POSITIVE);
        for _ in 0..PCA_MAX_ITERS {
            let (rotated, values) = rayleigh_ritz(&cov, &basis, d);
            basis = rotated;
            let residual = basis
                .iter()
                .zip(&values)
                .map(|(v, l)| {
                    let cv = mat_vec(&cov, v, d);
                    cv.iter().zip(v).map(|(a, b)| (a - l * b).powi(2)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max);
            if residual / scale < PCA_TOL {
                break;
            }
            basis = basis.iter().map(|v| mat_vec(&cov, v, d)).collect();
            orthonormalise(&mut basis);
        }
        let (components, eigenvalues) = rayleigh_ritz(&cov, &basis, d);
        Ok(Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        })
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|e| if self.total_variance > 0.0 { e / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Coordinates of one sample along each component.
    pub fn project(&self, sample: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(sample.iter().zip(&self.mean)).map(|(ci, (x, m))| ci * (x - m)).sum())
            .collect()
    }
}

/// Modified Gram–Schmidt in place. A vector that collapses (the covariance
/// has lower rank than the basis) is replaced by the first coordinate axis
/// not yet spanned, so the basis stays orthonormal.
fn orthonormalise(basis: &mut [Vec<f64>]) {
    let d = basis.first().map_or(0, Vec::len);
    for i in 0..basis.len() {
        let mut axis = 0;
        loop {
            let (done, rest) = basis.split_at_mut(i);
            let v = &mut rest[0];
            for b in done.iter() {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
            if axis >= d {
                break;
            }
            v.iter_mut().enumerate().for_each(|(j, x)| *x = if j == axis { 1.0 } else { 0.0 });
            axis += 1;
        }
    }
}

/// Rotates an orthonormal basis onto the eigenvectors of the covariance
/// restricted to its span; returns the rotated basis and the Ritz values,
/// both in decreasing order.
fn rayleigh_ritz(cov: &[f64], basis: &[Vec<f64>], d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = basis.len();
    let cb: Vec<Vec<f64>> = basis.iter().map(|v| mat_vec(cov, v, d)).collect();
    let small = DMatrix::from_fn(k, k, |i, j| basis[i].iter().zip(&cb[j]).map(|(a, b)| a * b).sum::<f64>());
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rotated = order
        .iter()
        .map(|&c| {
            let mut v = vec![0.0; d];
            for (i, b) in basis.iter().enumerate() {
                let coef = eig.eigenvectors[(i, c)];
                v.iter_mut().zip(b).for_each(|(x, y)| *x += coef * y);
            }
            // fixed sign: largest-magnitude coordinate positive
            let pivot = v.iter().copied().fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    (rotated, order.iter().map(|&c| eig.eigenvalues[c]).collect())
}

fn mat_vec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    m.chunks(d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Treats every position of a `(1, c, h, w)` map as a sample, fits PCA and
/// returns `(pca, scores)` with `scores[j][pos]` the j-th coordinate.
pub fn pca_scores<T: Scalar>(aux: &Tensor<T>, k: usize) -> Result<(Pca, Vec<Vec<f64>>)> {
    let [n, c, h, w] = aux.dims4()?;
    if n != 1 {
        return Err(Error::Argument(format!("PCA projection takes a single map, got batch {n}")));
    }
    if k > c {
        return Err(Error::Argument(format!("cannot take {k} components of {c} channels")));
    }
    let hw = h * w;
    let data = aux.data();
    let mut samples = vec![0.0; hw * c];
    for ch in 0..c {
        for pos in 0..hw {
            samples[pos * c + ch] = data[ch * hw + pos].as_f64();
        }
    }
    let pca = Pca::fit(&samples, hw, c, k)?;
    let mut scores = vec![vec![0.0; hw]; k];
    for pos in 0..hw {
        for (j, s) in pca.project(&samples[pos * c..(pos + 1) * c]).into_iter().enumerate() {
            scores[j][pos] = s;
        }
    }
    Ok((pca, scores))
}

/// Projection of `aux` onto its top-`k` principal components as a
/// `(1, k, h, w)` map, each channel min–max scaled to `[0, 1]` (a constant
/// channel maps to 0).
pub fn pca_project<T: Scalar>(aux: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = aux.dims4()?;
    let (_, scores) = pca_scores(aux, k)?;
    let mut out = Vec::with_capacity(k * h * w);
    for s in &scores {
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        out.extend(s.iter().map(|&v| T::lit(if span > 0.0 { (v - lo) / span } else { 0.0 })));
    }
    Tensor::new(vec![1, k, h, w], out)
}

/// Top-3 PCA projection of `aux` as an RGB image, bilinearly upscaled from
/// the feature grid to `width × height`.
pub fn pca_rgb<T: Scalar>(aux: &Tensor<T>, width: u32, height: u32) -> Result<image::RgbImage> {
    let proj = pca_project(aux, 3)?;
    let [_, _, h, w] = proj.dims4()?;
    let planes: Vec<f64> = proj.data().iter().map(|v| v.as_f64()).collect();
    let (oh, ow) = (height as usize, width as usize);
    let up = crate::nn::kernels::resize_bilinear_planes(&planes, 3, h, w, oh, ow);
    let px = (0..oh * ow)
        .flat_map(|i| (0..3).map(move |c| c * oh * ow + i))
        .map(|j| (up[j].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(image::RgbImage::from_raw(width, height, px).expect("buffer matches dims"))
}
