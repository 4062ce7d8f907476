//! Reverse-mode automatic differentiation over a recorded op tape.

use super::kernels::{self, ConvGeom};
use super::param::{ParamId, ParamRegistry};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

/// One recorded operation, kept for shape tracing and op counting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpEvent {
    pub op: &'static str,
    pub scope: String,
    pub shape: Vec<usize>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Scale(Var, Var),
    Concat(Var, Var),
    Resize {
        x: Var,
        in_hw: (usize, usize),
    },
    Sum(Var),
    Mean(Var),
    /// Scalar computed outside the tape whose gradient w.r.t. its single
    /// input was produced alongside the value.
    ScalarWithGrad(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation; [`Tape::backward`] then writes gradients
/// into the trainable parameters of a [`ParamRegistry`].
///
/// A *symbolic* tape runs every op as shape inference only, so full-size
/// configurations can be validated without allocating activations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    symbolic: bool,
    scope: Vec<String>,
    events: Vec<OpEvent>,
}

/// Gradients w.r.t. tape inputs created with `requires_grad = true`.
pub struct InputGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> InputGrads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            symbolic: false,
            scope: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn symbolic() -> Self {
        Self {
            symbolic: true,
            ..Self::new()
        }
    }

    pub fn is_symbolic(&self) -> bool {
        self.symbolic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn events(&self) -> &[OpEvent] {
        &self.events
    }

    pub fn count_ops(&self, op: &str) -> usize {
        self.events.iter().filter(|e| e.op == op).count()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.events.push(OpEvent {
            op: name,
            scope: self.scope.join("."),
            shape: value.shape().to_vec(),
        });
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        self.nodes[v.0].value.dims4()
    }

    fn make(&self, shape: &[usize], data: impl FnOnce() -> Vec<T>) -> Tensor<T> {
        if self.symbolic {
            Tensor::symbolic(shape)
        } else {
            Tensor::new(shape.to_vec(), data()).expect("kernel output matches its shape")
        }
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let value = if self.symbolic && !value.is_symbolic() {
            Tensor::symbolic(value.shape())
        } else {
            value
        };
        self.push("input", value, Op::Input, requires_grad)
    }

    /// Places a copy of a registry parameter on the tape. Frozen parameters
    /// become constants.
    pub fn param(&mut self, reg: &ParamRegistry<T>, id: ParamId) -> Var {
        let p = reg.param(id);
        let value = if self.symbolic {
            Tensor::symbolic(p.values.shape())
        } else {
            p.values.clone()
        };
        self.push("param", value, Op::Param(id), p.trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.dims4(x)?;
        let ws = self.shape(w).to_vec();
        let shape_err = || Error::Shape {
            op: "conv2d",
            left: vec![n, c_in, h, wd],
            right: ws.clone(),
        };
        let (c_out, k) = match ws.as_slice() {
            &[co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => return Err(shape_err()),
        };
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    left: ws.clone(),
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_out_dim(h, k, stride, pad),
            kernels::conv_out_dim(wd, k, stride, pad),
        ) else {
            return Err(Error::Config(format!(
                "kernel {k} with padding {pad} does not fit input {h}x{wd}"
            )));
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let value = self.make(&[n, c_out, oh, ow], || {
            kernels::conv2d_forward(
                &geom,
                self.value(x).data(),
                self.value(w).data(),
                b.map(|b| self.value(b).data()),
            )
        });
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push("conv2d", value, Op::Conv { x, w, b, geom }, rg))
    }

    /// Batch normalisation over `(batch, height, width)` per channel.
    ///
    /// In train mode the batch statistics are used and `running_mean` /
    /// `running_var` are updated in place (unbiased variance, momentum 0.1);
    /// in eval mode the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    left: vec![n, c, h, w],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let m = n * h * w;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateVariance(m));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        if self.symbolic {
            let value = Tensor::symbolic(&[n, c, h, w]);
            let op = Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                train,
            };
            return Ok(self.push("batch_norm", value, op, rg));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::lit(BN_EPS);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];
        let momentum = T::lit(BN_MOMENTUM);
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = T::zero();
                for bi in 0..n {
                    sum = sum + xs[(bi * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                }
                let mean = sum / T::from_count(m);
                let mut sq = T::zero();
                for bi in 0..n {
                    for &v in &xs[(bi * c + ch) * plane..][..plane] {
                        let d = v - mean;
                        sq = sq + d * d;
                    }
                }
                let var = sq / T::from_count(m);
                let unbiased = sq / T::from_count(m - 1);
                let rm = &mut running_mean.data_mut()[ch];
                *rm = (T::one() - momentum) * *rm + momentum * mean;
                let rv = &mut running_var.data_mut()[ch];
                *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                (mean, var)
            } else {
                (running_mean.data()[ch], running_var.data()[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..n {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push("batch_norm", value, op, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.make(&shape, || {
            let xs = self.value(x).data();
            match kind {
                Activation::Relu => xs.iter().map(|&v| v.max(T::zero())).collect(),
                Activation::Gelu => xs.iter().map(|&v| kernels::gelu(v)).collect(),
                Activation::Sigmoid => xs.iter().map(|&v| kernels::sigmoid(v)).collect(),
            }
        });
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        };
        let rg = self.rg(x);
        self.push(name, value, Op::Act(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let shape = self.shape(a).to_vec();
        let value = self.make(&shape, || {
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&p, &q)| p + q)
                .collect()
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("add", value, Op::Add(a, b), rg))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape {
                op: "scale",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let shape = self.shape(x).to_vec();
        let value = self.make(&shape, || {
            let k = self.value(s).data()[0];
            self.value(x).data().iter().map(|&v| v * k).collect()
        });
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push("scale", value, Op::Scale(x, s), rg))
    }

    /// Channel-wise concatenation; `a` occupies the lower channel indices.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.dims4(a)?;
        let [nb, cb, hb, wb] = self.dims4(b)?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape {
                op: "concat_channels",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let plane = ha * wa;
        let value = self.make(&[na, ca + cb, ha, wa], || {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let mut out = Vec::with_capacity(na * (ca + cb) * plane);
            for bi in 0..na {
                out.extend_from_slice(&da[bi * ca * plane..][..ca * plane]);
                out.extend_from_slice(&db[bi * cb * plane..][..cb * plane]);
            }
            out
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push("concat", value, Op::Concat(a, b), rg))
    }

    /// Bilinear resize with half-pixel centres (align-corners = false).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(format!("resize target {out_h}x{out_w} must be positive")));
        }
        let [n, c, h, w] = self.dims4(x)?;
        let value = self.make(&[n, c, out_h, out_w], || {
            kernels::resize_bilinear_planes(self.value(x).data(), n * c, h, w, out_h, out_w)
        });
        let rg = self.rg(x);
        Ok(self.push("resize", value, Op::Resize { x, in_hw: (h, w) }, rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [_, _, h, w] = self.dims4(x)?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = self.make(&[1], || vec![self.value(x).data().iter().copied().sum()]);
        let rg = self.rg(x);
        self.push("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let value = self.make(&[1], || {
            vec![self.value(x).data().iter().copied().sum::<T>() / T::from_count(n.max(1))]
        });
        let rg = self.rg(x);
        self.push("mean", value, Op::Mean(x), rg)
    }

    /// Records a scalar computed by the caller together with its gradient
    /// with respect to `x`.
    pub fn scalar_with_grad(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if !self.symbolic && grad.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "scalar_with_grad",
                left: self.shape(x).to_vec(),
                right: vec![grad.len()],
            });
        }
        let value = self.make(&[1], || vec![value]);
        let rg = self.rg(x);
        Ok(self.push("loss", value, Op::ScalarWithGrad(x, grad), rg))
    }

    /// Back-propagates from the scalar `loss`, accumulating into the `grad`
    /// slot of every trainable parameter reached. Frozen parameters are never
    /// touched. Returns gradients of inputs recorded with `requires_grad`.
    pub fn backward(&self, loss: Var, reg: &mut ParamRegistry<T>) -> Result<InputGrads<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass was recorded".into()));
        }
        if self.symbolic {
            return Err(Error::State("backward is unavailable on a symbolic tape".into()));
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.all_finite() {
            return Err(Error::State("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut inputs: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    inputs[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    let p = reg.param_mut(*id);
                    if !p.trainable {
                        continue;
                    }
                    match p.grad.as_mut() {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                                *a = *a + *v;
                            }
                        }
                        None => p.grad = Some(Tensor::new(p.values.shape().to_vec(), g)?),
                    }
                }
                op => self.backprop_op(op, idx, &g, &mut grads),
            }
        }
        Ok(InputGrads { grads: inputs })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
            None => grads[v.0] = Some(g),
        }
    }

    fn backprop_op(&self, op: &Op<T>, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.dims4(*x).unwrap();
                let plane = h * w;
                let m = T::from_count(n * plane);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for bi in 0..n {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            dbeta[ch] = dbeta[ch] + g[i];
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        for bi in 0..n {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                gx[i] = if *train {
                                    k / m * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Act(x, kind) => {
                let xs = self.value(*x).data();
                let out = self.nodes[idx].value.data();
                let gx = match kind {
                    Activation::Relu => xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Activation::Gelu => xs.iter().zip(g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect(),
                    Activation::Sigmoid => out
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect(),
                };
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale(x, s) => {
                let k = self.value(*s).data()[0];
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * k).collect());
                }
                if self.rg(*s) {
                    let xs = self.value(*x).data();
                    let gs = xs.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, vec![gs]);
                }
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.dims4(*a).unwrap();
                let cb = self.dims4(*b).unwrap()[1];
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for bi in 0..n {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Resize { x, in_hw } => {
                let [n, c, oh, ow] = self.nodes[idx].value.dims4().unwrap();
                let gx = kernels::resize_bilinear_planes_backward(g, n * c, in_hw.0, in_hw.1, oh, ow);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::from_count(n.max(1)); n]);
            }
            Op::ScalarWithGrad(x, local) => {
                self.accumulate(grads, *x, local.iter().map(|&v| v * g[0]).collect());
            }
        }
    }
}
