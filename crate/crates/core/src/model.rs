//! Full network: dual-resolution inputs, the two encoders, the glue layer and
//! a U-Net-style decoder with an extra partial stage that brings the logits to
//! half the high-resolution input size.

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data;
use crate::encoders::{ConvAuxEncoder, HierEncoder, HierEncoderSpec, PlainEncoder, PlainEncoderSpec};
use crate::error::{Error, Result};
use crate::glue::{Glue, GlueConfig, GlueOutput};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Init, Initializer, Mode, ParamRegistry, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxMode {
    /// Frozen plain encoder (the default dual-encoder design).
    Dinov2Shape,
    /// Small trainable strided CNN in place of the plain encoder.
    ConvStandIn,
    /// No auxiliary branch; the glue only compresses the pyramid.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `(H_h, W_h)` fed to the hierarchical encoder.
    pub high_res: [usize; 2],
    /// `(H_l, W_l)` fed to the auxiliary encoder.
    pub low_res: [usize; 2],
    pub hier: HierEncoderSpec,
    pub plain: PlainEncoderSpec,
    pub aux_mode: AuxMode,
    /// Output width of the conv stand-in auxiliary encoder.
    pub conv_aux_dim: usize,
    pub fused_channels: usize,
    pub decoder_channels: usize,
    /// Seed for every initial weight.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            high_res: [1024, 1024],
            low_res: [448, 448],
            hier: HierEncoderSpec::hiera_l_shape(),
            plain: PlainEncoderSpec::dinov2_l_shape(),
            aux_mode: AuxMode::Dinov2Shape,
            conv_aux_dim: 64,
            fused_channels: 128,
            decoder_channels: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks and overfit runs:
    /// 64×64 / 28×28 inputs, stage widths `[4, 8, 16, 32]`, auxiliary width 8,
    /// fused width 8.
    pub fn tiny() -> Self {
        Self {
            high_res: [64, 64],
            low_res: [28, 28],
            hier: HierEncoderSpec {
                stage_channels: [4, 8, 16, 32],
                blocks_per_stage: 1,
                adapter_bottleneck: 4,
                backbone_frozen: true,
            },
            plain: PlainEncoderSpec {
                embed_dim: 8,
                patch_size: 14,
                depth: 1,
            },
            aux_mode: AuxMode::Dinov2Shape,
            conv_aux_dim: 8,
            fused_channels: 8,
            decoder_channels: 8,
            seed: 0,
        }
    }

    /// Desk-scale configuration with stage widths `[8, 16, 32, 64]`.
    pub fn toy() -> Self {
        Self {
            hier: HierEncoderSpec {
                stage_channels: [8, 16, 32, 64],
                blocks_per_stage: 1,
                adapter_bottleneck: 8,
                backbone_frozen: true,
            },
            plain: PlainEncoderSpec {
                embed_dim: 32,
                patch_size: 14,
                depth: 1,
            },
            conv_aux_dim: 16,
            fused_channels: 16,
            decoder_channels: 16,
            ..Self::tiny()
        }
    }

    pub fn with_resolution(mut self, high: usize, low: usize) -> Self {
        self.high_res = [high, high];
        self.low_res = [low, low];
        self
    }

    pub fn aux_dim(&self) -> Option<usize> {
        match self.aux_mode {
            AuxMode::Dinov2Shape => Some(self.plain.embed_dim),
            AuxMode::ConvStandIn => Some(self.conv_aux_dim),
            AuxMode::None => None,
        }
    }

    pub fn glue_config(&self) -> GlueConfig {
        GlueConfig {
            aux_dim: self.aux_dim(),
            stage_channels: self.hier.stage_channels,
            fused_channels: self.fused_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hier.validate()?;
        let [hh, wh] = self.high_res;
        if hh == 0 || wh == 0 || hh % 32 != 0 || wh % 32 != 0 {
            return Err(Error::Config(format!(
                "high_res {hh}x{wh} must be positive and divisible by 32"
            )));
        }
        let [hl, wl] = self.low_res;
        if hl == 0 || wl == 0 {
            return Err(Error::Config("low_res must be positive".into()));
        }
        if self.aux_mode == AuxMode::Dinov2Shape {
            self.plain.validate()?;
            let p = self.plain.patch_size;
            if hl % p != 0 || wl % p != 0 {
                return Err(Error::Config(format!(
                    "low_res {hl}x{wl} must be divisible by the patch size {p}"
                )));
            }
        }
        if self.aux_mode == AuxMode::ConvStandIn && self.conv_aux_dim == 0 {
            return Err(Error::Config("conv_aux_dim must be positive".into()));
        }
        if self.fused_channels == 0 {
            return Err(Error::Config("fused_channels must be positive".into()));
        }
        if self.decoder_channels != self.fused_channels {
            return Err(Error::Config(format!(
                "decoder_channels ({}) must equal fused_channels ({})",
                self.decoder_channels, self.fused_channels
            )));
        }
        Ok(())
    }
}

/// Two `conv3×3 → BN → ReLU` layers. The convolutions carry no bias because
/// the following batch norm cancels it.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DecoderBlock {
    fn new<T: Scalar>(init: &mut Initializer<'_, T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let spec = |ci| ConvSpec {
            c_in: ci,
            c_out,
            k: 3,
            stride: 1,
            pad: 1,
            bias: false,
            trainable: true,
            init: Init::He,
        };
        Ok(Self {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), spec(c_in))?,
            bn1: BatchNorm2d::new(init, &format!("{name}.bn1"), c_out, true)?,
            conv2: Conv2d::new(init, &format!("{name}.conv2"), spec(c_out))?,
            bn2: BatchNorm2d::new(init, &format!("{name}.bn2"), c_out, true)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &mut ParamRegistry<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, reg, x)?;
        let h = self.bn1.forward(tape, reg, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, reg, h)?;
        let h = self.bn2.forward(tape, reg, h, mode)?;
        Ok(tape.relu(h))
    }
}

/// Tensor names: `dec.block{4,3,2,1}.*`, `dec.partial.*`, `dec.head.{w,b}`.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Indexed by stage: `blocks[0]` runs at stride 4, `blocks[3]` at stride 32.
    blocks: Vec<DecoderBlock>,
    partial: DecoderBlock,
    head: Conv2d,
    channels: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `d1..d4` at strides 4, 8, 16, 32.
    pub stages: [Var; 4],
    /// Partial stage at stride 2.
    pub partial: Var,
    pub logits: Var,
}

impl Decoder {
    pub fn new<T: Scalar>(init: &mut Initializer<'_, T>, channels: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        for i in 1..=4 {
            let c_in = if i == 4 { channels } else { 2 * channels };
            blocks.push(DecoderBlock::new(init, &format!("dec.block{i}"), c_in, channels)?);
        }
        Ok(Self {
            blocks,
            partial: DecoderBlock::new(init, "dec.partial", channels, channels)?,
            head: Conv2d::new(init, "dec.head", ConvSpec::pointwise(channels, 1).init(Init::Scaled(1.0)))?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &mut ParamRegistry<T>,
        fused: [Var; 4],
        mode: Mode,
    ) -> Result<DecoderOutput> {
        for (i, &f) in fused.iter().enumerate() {
            if tape.shape(f).get(1).copied() != Some(self.channels) {
                return Err(Error::Config(format!(
                    "decoder expects {} channels at stage {}, got shape {:?}",
                    self.channels,
                    i + 1,
                    tape.shape(f)
                )));
            }
        }
        tape.push_scope("dec");
        let mut stages = fused;
        let mut cur = self.blocks[3].forward(tape, reg, fused[3], mode)?;
        stages[3] = cur;
        for i in (0..3).rev() {
            let up = tape.upsample2x(cur)?;
            let cat = tape.concat_channels(up, fused[i])?;
            cur = self.blocks[i].forward(tape, reg, cat, mode)?;
            stages[i] = cur;
        }
        let up = tape.upsample2x(cur)?;
        let partial = self.partial.forward(tape, reg, up, mode)?;
        let logits = self.head.forward(tape, reg, partial)?;
        tape.pop_scope();
        Ok(DecoderOutput {
            stages,
            partial,
            logits,
        })
    }
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: [Var; 4],
    pub aux: Option<Var>,
    pub glue: GlueOutput,
    pub decoder: DecoderOutput,
    /// `(n, 1, H_h/2, W_h/2)`.
    pub logits: Var,
}

/// The assembled network together with its parameter store.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamRegistry<T>,
    hier: HierEncoder,
    plain: Option<PlainEncoder>,
    conv_aux: Option<ConvAuxEncoder>,
    glue: Glue,
    decoder: Decoder,
    symbolic: bool,
}

/// Coarse parameter grouping used by reports: `adapters`, `hier-backbone`,
/// `plain-backbone`, `aux-encoder`, `glue`, `decoder`.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("hier.adapter") {
        "adapters"
    } else if name.starts_with("hier.") {
        "hier-backbone"
    } else if name.starts_with("plain.") {
        "plain-backbone"
    } else if name.starts_with("aux.") {
        "aux-encoder"
    } else if name.starts_with("glue.") {
        "glue"
    } else if name.starts_with("dec.") {
        "decoder"
    } else {
        "other"
    }
}

impl<T: Scalar> SegModel<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, false)
    }

    /// Model whose tensors carry shapes only; pair with [`Tape::symbolic`].
    pub fn shape_only(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    fn build(cfg: &ModelConfig, symbolic: bool) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamRegistry::new();
        let mut init = Initializer::new(&mut params, cfg.seed, symbolic);
        let hier = HierEncoder::new(&mut init, &cfg.hier)?;
        let plain = match cfg.aux_mode {
            AuxMode::Dinov2Shape => Some(PlainEncoder::new(&mut init, &cfg.plain)?),
            _ => None,
        };
        let conv_aux = match cfg.aux_mode {
            AuxMode::ConvStandIn => Some(ConvAuxEncoder::new(&mut init, cfg.conv_aux_dim)?),
            _ => None,
        };
        let glue = Glue::new(&mut init, &cfg.glue_config())?;
        let decoder = Decoder::new(&mut init, cfg.decoder_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            hier,
            plain,
            conv_aux,
            glue,
            decoder,
            symbolic,
        })
    }

    pub fn is_shape_only(&self) -> bool {
        self.symbolic
    }

    pub fn glue(&self) -> &Glue {
        &self.glue
    }

    /// Runs the auxiliary branch alone on a normalized low-resolution batch.
    pub fn aux_forward(&self, tape: &mut Tape<T>, low: Var) -> Result<Option<Var>> {
        match (&self.plain, &self.conv_aux) {
            (Some(p), _) => p.forward(tape, &self.params, low).map(Some),
            (None, Some(c)) => c.forward(tape, &self.params, low).map(Some),
            (None, None) => Ok(None),
        }
    }

    /// Full forward pass. `low` may be `None` only when the auxiliary branch
    /// is disabled.
    pub fn forward(&mut self, tape: &mut Tape<T>, high: Var, low: Option<Var>, mode: Mode) -> Result<ForwardOutput> {
        let [hh, wh] = self.cfg.high_res;
        let hs = tape.shape(high);
        if hs.len() != 4 || hs[2..] != [hh, wh] {
            return Err(Error::Config(format!(
                "high-resolution input {:?} does not match high_res {hh}x{wh}",
                hs
            )));
        }
        let aux = match (self.cfg.aux_mode, low) {
            (AuxMode::None, _) => None,
            (_, None) => return Err(Error::Config("the auxiliary branch needs a low-resolution input".into())),
            (_, Some(low)) => {
                let [hl, wl] = self.cfg.low_res;
                let ls = tape.shape(low);
                if ls.len() != 4 || ls[2..] != [hl, wl] {
                    return Err(Error::Config(format!(
                        "low-resolution input {:?} does not match low_res {hl}x{wl}",
                        ls
                    )));
                }
                self.aux_forward(tape, low)?
            }
        };
        let pyramid = self.hier.forward(tape, &self.params, high)?;
        let glue = self.glue.forward(tape, &self.params, pyramid, aux)?;
        let decoder = self.decoder.forward(tape, &mut self.params, glue.fused, mode)?;
        Ok(ForwardOutput {
            pyramid,
            aux,
            glue,
            logits: decoder.logits,
            decoder,
        })
    }

    /// Logits for already-normalized input batches.
    pub fn logits(&mut self, high: &Tensor<T>, low: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = self.new_tape();
        let h = tape.input(high.clone(), false);
        let l = tape.input(low.clone(), false);
        let out = self.forward(&mut tape, h, Some(l), mode)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn new_tape(&self) -> Tape<T> {
        if self.symbolic {
            Tape::symbolic()
        } else {
            Tape::new()
        }
    }

    /// Probability map at the original image size: resize to both input
    /// resolutions (skipped when already equal), normalize, forward in eval
    /// mode, upsample the logits to the high resolution as in training,
    /// sigmoid, then resize the probabilities back. The last resize always
    /// runs; at equal size it is the identity.
    pub fn predict(&mut self, image: &RgbImage) -> Result<Prediction<T>> {
        let (w, h) = image.dimensions();
        let (h, w) = (h as usize, w as usize);
        let mut tape = Tape::new();
        tape.push_scope("predict");
        let raw = tape.input(data::image_to_tensor(image), false);
        let resized = |tape: &mut Tape<T>, [th, tw]: [usize; 2]| -> Result<Var> {
            let v = if [h, w] == [th, tw] { raw } else { tape.resize_bilinear(raw, th, tw)? };
            let normalized = data::normalize(tape.value(v));
            Ok(tape.input(normalized, false))
        };
        let high = resized(&mut tape, self.cfg.high_res)?;
        let low = match self.cfg.aux_mode {
            AuxMode::None => None,
            _ => Some(resized(&mut tape, self.cfg.low_res)?),
        };
        tape.pop_scope();
        let out = self.forward(&mut tape, high, low, Mode::Eval)?;
        // the loss sees logits at the high input resolution, so predict does too
        tape.push_scope("head_upsample");
        let [hh, wh] = self.cfg.high_res;
        let logits = tape.resize_bilinear(out.logits, hh, wh)?;
        tape.pop_scope();
        tape.push_scope("predict");
        let probs = tape.sigmoid(logits);
        let probs = tape.resize_bilinear(probs, h, w)?;
        tape.pop_scope();
        let resize_ops = tape
            .events()
            .iter()
            .filter(|e| e.op == "resize" && e.scope == "predict")
            .count();
        Ok(Prediction {
            probs: tape.value(probs).clone(),
            resize_ops,
        })
    }
}

impl<T: Scalar> SegModel<T> {
    /// Auxiliary feature map `(1, c, h, w)` of an image resized to the low
    /// resolution; `None` without an auxiliary branch.
    pub fn aux_features(&self, image: &RgbImage) -> Result<Option<Tensor<T>>> {
        let (w, h) = image.dimensions();
        let mut tape = self.new_tape();
        let raw = tape.input(data::image_to_tensor(image), false);
        let [hl, wl] = self.cfg.low_res;
        let v = if [h as usize, w as usize] == [hl, wl] { raw } else { tape.resize_bilinear(raw, hl, wl)? };
        let normalized = data::normalize(tape.value(v));
        let low = tape.input(normalized, false);
        Ok(self.aux_forward(&mut tape, low)?.map(|a| tape.value(a).clone()))
    }
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `(1, 1, H, W)` probabilities at the input image size.
    pub probs: Tensor<T>,
    /// Resizes performed outside the network itself (input and output).
    pub resize_ops: usize,
}

impl<T: Scalar> Prediction<T> {
    /// 8-bit mask, `round(p · 255)`.
    pub fn to_gray(&self) -> GrayImage {
        let [_, _, h, w] = self.probs.dims4().expect("prediction is rank 4");
        let px = self
            .probs
            .data()
            .iter()
            .map(|p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::from_raw(w as u32, h as u32, px).expect("buffer matches dims")
    }
}
