use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::param::{BufferId, ParamId, ParamRegistry};
use super::tape::{Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He-style spread for a fan-in, `N(0, 2 / fan_in)`.
    He,
    /// `N(0, gain^2 / fan_in)`.
    Scaled(f64),
}

/// Registers parameters with seeded initial values.
///
/// Values are drawn in f64 and cast, so f32 and f64 models built from the
/// same seed start from the same (rounded) weights.
pub struct Initializer<'a, T> {
    pub reg: &'a mut ParamRegistry<T>,
    rng: ChaCha8Rng,
    symbolic: bool,
}

impl<'a, T: Scalar> Initializer<'a, T> {
    pub fn new(reg: &'a mut ParamRegistry<T>, seed: u64, symbolic: bool) -> Self {
        Self {
            reg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            symbolic,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        self.symbolic
    }

    pub fn tensor(&mut self, shape: &[usize], init: Init) -> Tensor<T> {
        if self.symbolic {
            return Tensor::symbolic(shape);
        }
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal(std) => self.normal(shape, std),
            Init::He => self.normal(shape, (2.0 / fan_in as f64).sqrt()),
            Init::Scaled(gain) => self.normal(shape, gain / (fan_in as f64).sqrt()),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
    }

    pub fn param(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        trainable: bool,
        decay: bool,
    ) -> Result<ParamId> {
        let values = self.tensor(shape, init);
        self.reg.register(name, values, trainable, decay)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<BufferId> {
        let values = self.tensor(shape, init);
        self.reg.register_buffer(name, values)
    }
}

/// Square-kernel 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub trainable: bool,
    pub init: Init,
}

impl ConvSpec {
    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            k: 1,
            stride: 1,
            pad: 0,
            bias: true,
            trainable: true,
            init: Init::He,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Registers `{name}.w` with shape `(c_out, c_in, k, k)` and, when
    /// requested, a zero-initialised `{name}.b`.
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, spec: ConvSpec) -> Result<Self> {
        let w = init.param(
            format!("{name}.w"),
            &[spec.c_out, spec.c_in, spec.k, spec.k],
            spec.init,
            spec.trainable,
            true,
        )?;
        let b = if spec.bias {
            Some(init.param(format!("{name}.b"), &[spec.c_out], Init::Zeros, spec.trainable, false)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            c_in: spec.c_in,
            c_out: spec.c_out,
            k: spec.k,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        let w = tape.param(reg, self.w);
        let b = self.b.map(|b| tape.param(reg, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalisation with affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, channels: usize, trainable: bool) -> Result<Self> {
        Ok(Self {
            gamma: init.param(format!("{name}.gamma"), &[channels], Init::Ones, trainable, false)?,
            beta: init.param(format!("{name}.beta"), &[channels], Init::Zeros, trainable, false)?,
            running_mean: init.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: init.buffer(format!("{name}.running_var"), &[channels], Init::Ones)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &mut ParamRegistry<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(reg, self.gamma);
        let beta = tape.param(reg, self.beta);
        let mut rm = reg.buffer(self.running_mean).clone();
        let mut rv = reg.buffer(self.running_var).clone();
        let out = tape.batch_norm(x, gamma, beta, &mut rm, &mut rv, mode)?;
        if mode == Mode::Train && !tape.is_symbolic() {
            *reg.buffer_mut(self.running_mean) = rm;
            *reg.buffer_mut(self.running_var) = rv;
        }
        Ok(out)
    }
}
