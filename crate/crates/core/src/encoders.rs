//! The two input branches: a hierarchical detail encoder with trainable
//! adapters in front of every frozen block, and a fully frozen plain
//! single-scale encoder. Both backbones are shape-faithful stand-ins built
//! from per-location MLP blocks with seeded random weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Init, Initializer, ParamRegistry, Tape, Var};
use crate::scalar::Scalar;

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const HIERA_L_CHANNELS: [usize; 4] = [144, 288, 576, 1152];
pub const DINOV2_L_DIM: usize = 1024;

/// Spread of the frozen blocks' output projections. Keeps the residual
/// stand-in blocks close to identity so activations stay in range at depth.
const FROZEN_OUT_GAIN: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierEncoderSpec {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub adapter_bottleneck: usize,
    pub backbone_frozen: bool,
}

impl Default for HierEncoderSpec {
    fn default() -> Self {
        Self::hiera_l_shape()
    }
}

impl HierEncoderSpec {
    pub fn hiera_l_shape() -> Self {
        Self {
            stage_channels: HIERA_L_CHANNELS,
            blocks_per_stage: 2,
            adapter_bottleneck: 32,
            backbone_frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage == 0 || self.adapter_bottleneck == 0 {
            return Err(Error::Config(
                "stage channels, blocks per stage and adapter bottleneck must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlainEncoderSpec {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub depth: usize,
}

impl Default for PlainEncoderSpec {
    fn default() -> Self {
        Self::dinov2_l_shape()
    }
}

impl PlainEncoderSpec {
    pub fn dinov2_l_shape() -> Self {
        Self {
            embed_dim: DINOV2_L_DIM,
            patch_size: 14,
            depth: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.patch_size == 0 || self.depth == 0 {
            return Err(Error::Config("plain encoder dims must be positive".into()));
        }
        Ok(())
    }
}

/// Bottleneck MLP applied at every spatial position:
/// `x + gelu(up(gelu(down(x))))`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Conv2d,
    pub up: Conv2d,
}

impl Adapter {
    /// `down` draws He-scaled weights, `up` starts at zero so the adapted
    /// block initially reproduces the frozen one.
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, channels: usize, bottleneck: usize) -> Result<Self> {
        Ok(Self {
            down: Conv2d::new(init, &format!("{name}.down"), ConvSpec::pointwise(channels, bottleneck))?,
            up: Conv2d::new(
                init,
                &format!("{name}.up"),
                ConvSpec::pointwise(bottleneck, channels).init(Init::Zeros),
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.down.c_in {
            return Err(Error::Config(format!(
                "adapter expects {} channels, input has {c}",
                self.down.c_in
            )));
        }
        let h = self.down.forward(tape, reg, x)?;
        let h = tape.gelu(h);
        let h = self.up.forward(tape, reg, h)?;
        let h = tape.gelu(h);
        tape.add(x, h)
    }
}

/// Frozen residual per-location MLP, `x + fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct FrozenBlock {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl FrozenBlock {
    fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, channels: usize, trainable: bool) -> Result<Self> {
        let spec = |ci, co, i| ConvSpec {
            trainable,
            ..ConvSpec::pointwise(ci, co).init(i)
        };
        Ok(Self {
            fc1: Conv2d::new(init, &format!("{name}.fc1"), spec(channels, channels, Init::He))?,
            fc2: Conv2d::new(
                init,
                &format!("{name}.fc2"),
                spec(channels, channels, Init::Scaled(FROZEN_OUT_GAIN)),
            )?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, reg, x)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, reg, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    /// Stride-2 transition from the previous stage (absent for stage 1).
    down: Option<Conv2d>,
    adapters: Vec<Adapter>,
    blocks: Vec<FrozenBlock>,
}

/// Hierarchical encoder producing features at strides 4, 8, 16 and 32.
///
/// Tensor names: `hier.stem.*`, `hier.stageN.down.*`,
/// `hier.stageN.blockM.{fc1,fc2}.{w,b}` and `hier.adapterN_M.{down,up}.{w,b}`
/// (N and M count from 1).
#[derive(Clone, Debug)]
pub struct HierEncoder {
    pub spec: HierEncoderSpec,
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl HierEncoder {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, spec: &HierEncoderSpec) -> Result<Self> {
        spec.validate()?;
        let trainable = !spec.backbone_frozen;
        let ch = spec.stage_channels;
        let stem = Conv2d::new(
            init,
            "hier.stem",
            ConvSpec {
                c_in: 3,
                c_out: ch[0],
                k: 4,
                stride: 4,
                pad: 0,
                bias: true,
                trainable,
                init: Init::He,
            },
        )?;
        let mut stages = Vec::with_capacity(4);
        for (s, &c) in ch.iter().enumerate() {
            let n = s + 1;
            let down = if s == 0 {
                None
            } else {
                Some(Conv2d::new(
                    init,
                    &format!("hier.stage{n}.down"),
                    ConvSpec {
                        c_in: ch[s - 1],
                        c_out: c,
                        k: 2,
                        stride: 2,
                        pad: 0,
                        bias: true,
                        trainable,
                        init: Init::He,
                    },
                )?)
            };
            let mut adapters = Vec::new();
            let mut blocks = Vec::new();
            for m in 1..=spec.blocks_per_stage {
                adapters.push(Adapter::new(init, &format!("hier.adapter{n}_{m}"), c, spec.adapter_bottleneck)?);
                blocks.push(FrozenBlock::new(init, &format!("hier.stage{n}.block{m}"), c, trainable)?);
            }
            stages.push(Stage { down, adapters, blocks });
        }
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
        })
    }

    /// Returns the four stage outputs, shallowest first.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<[Var; 4]> {
        let shape = tape.shape(x).to_vec();
        let [_, c, h, w] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::Config(format!("expected a rank-4 image batch, got {shape:?}")))?;
        if c != 3 {
            return Err(Error::Config(format!("hierarchical encoder expects 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "high-resolution input {h}x{w} must be divisible by 32"
            )));
        }
        tape.push_scope("hier");
        let mut cur = self.stem.forward(tape, reg, x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                cur = down.forward(tape, reg, cur)?;
            }
            for (adapter, block) in stage.adapters.iter().zip(&stage.blocks) {
                cur = adapter.forward(tape, reg, cur)?;
                cur = block.forward(tape, reg, cur)?;
            }
            outs.push(cur);
        }
        tape.pop_scope();
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}

/// Plain encoder: patchify projection then `depth` frozen residual blocks,
/// one feature grid at the patch stride.
///
/// Tensor names: `plain.patch.{w,b}`, `plain.blockK.{fc1,fc2}.{w,b}`.
#[derive(Clone, Debug)]
pub struct PlainEncoder {
    pub spec: PlainEncoderSpec,
    patch: Conv2d,
    blocks: Vec<FrozenBlock>,
}

impl PlainEncoder {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, spec: &PlainEncoderSpec) -> Result<Self> {
        spec.validate()?;
        let patch = Conv2d::new(
            init,
            "plain.patch",
            ConvSpec {
                c_in: 3,
                c_out: spec.embed_dim,
                k: spec.patch_size,
                stride: spec.patch_size,
                pad: 0,
                bias: true,
                trainable: false,
                init: Init::He,
            },
        )?;
        let blocks = (1..=spec.depth)
            .map(|k| FrozenBlock::new(init, &format!("plain.block{k}"), spec.embed_dim, false))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            patch,
            blocks,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let p = self.spec.patch_size;
        match shape.as_slice() {
            &[_, 3, h, w] if h % p == 0 && w % p == 0 && h > 0 && w > 0 => {}
            &[_, 3, h, w] => {
                return Err(Error::Config(format!(
                    "low-resolution input {h}x{w} must be divisible by the patch size {p}"
                )))
            }
            _ => return Err(Error::Config(format!("plain encoder expects (n, 3, h, w), got {shape:?}"))),
        }
        tape.push_scope("plain");
        let mut cur = self.patch.forward(tape, reg, x)?;
        for block in &self.blocks {
            cur = block.forward(tape, reg, cur)?;
        }
        tape.pop_scope();
        Ok(cur)
    }
}

/// Trainable strided CNN used in place of the frozen plain encoder for the
/// trainable-auxiliary ablation: four 3×3 stride-2 convolutions with GeLU,
/// output at `ceil(H/16) × ceil(W/16)`.
///
/// Tensor names: `aux.convK.{w,b}`.
#[derive(Clone, Debug)]
pub struct ConvAuxEncoder {
    convs: Vec<Conv2d>,
    pub out_dim: usize,
}

impl ConvAuxEncoder {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, out_dim: usize) -> Result<Self> {
        if out_dim == 0 {
            return Err(Error::Config("auxiliary width must be positive".into()));
        }
        let widths = [3, (out_dim / 4).max(4), (out_dim / 2).max(4), out_dim, out_dim];
        let convs = (0..4)
            .map(|i| {
                Conv2d::new(
                    init,
                    &format!("aux.conv{}", i + 1),
                    ConvSpec {
                        c_in: widths[i],
                        c_out: widths[i + 1],
                        k: 3,
                        stride: 2,
                        pad: 1,
                        bias: true,
                        trainable: true,
                        init: Init::He,
                    },
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { convs, out_dim })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &ParamRegistry<T>, x: Var) -> Result<Var> {
        tape.push_scope("aux");
        let mut cur = x;
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.forward(tape, reg, cur)?;
            if i + 1 < self.convs.len() {
                cur = tape.gelu(cur);
            }
        }
        tape.pop_scope();
        Ok(cur)
    }
}
