//! Training loop: per-epoch seeded shuffle, flip augmentation, structure loss
//! on upsampled logits, AdamW with cosine decay, CSV log rows and
//! checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::loss::loss_on_tape;
use crate::metrics::{evaluate_pair, ImageRecord, MaskPair};
use crate::model::{ModelConfig, SegModel};
use crate::nn::{Mode, Tensor};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::scalar::{DType, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Random horizontal/vertical flips.
    pub augment: bool,
    /// Element type of the run; `f64` is for verification.
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            epochs: 20,
            batch: 1,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config("weight_decay ≥ 0, eps > 0 and betas in [0, 1) are required".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    /// 1-based optimizer step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub wbce: f64,
    pub wiou: f64,
    pub total: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,wbce,wiou,total";

    /// Shortest round-trip formatting, so equal rows give equal text.
    pub fn csv(&self) -> String {
        format!("{},{},{:e},{:e},{:e},{:e}", self.step, self.epoch, self.lr, self.wbce, self.wiou, self.total)
    }
}

pub struct Trainer<T> {
    pub model: SegModel<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    /// Configuration JSON stored in every checkpoint.
    pub config_echo: String,
}

/// `{"model": …, "train": …}` as stored in checkpoints.
pub fn config_echo(model: &ModelConfig, train: &TrainConfig) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::json!({ "model": model, "train": train }))?)
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: SegModel::new(model_cfg)?,
            opt: AdamW::new(cfg.adamw()),
            cfg: cfg.clone(),
            config_echo: config_echo(model_cfg, cfg)?,
        })
    }

    /// Rebuilds model and optimizer state; training continues at
    /// `ckpt.step + 1` under `cfg`.
    pub fn resume(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut t = Self::new(&ckpt.model_config()?, cfg)?;
        ckpt.restore(&mut t.model, Some(&mut t.opt), &[])?;
        Ok(t)
    }

    /// Optimizer steps completed so far.
    pub fn step_count(&self) -> usize {
        self.opt.step as usize
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.opt), self.config_echo.clone())
    }

    /// Indices of the samples used at 0-based global step `step`.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let spe = self.cfg.steps_per_epoch(n);
        let (epoch, pos) = (step / spe, step % spe);
        let order = data::epoch_order(n, self.cfg.seed, epoch);
        order[pos * self.cfg.batch..((pos + 1) * self.cfg.batch).min(n)].to_vec()
    }

    /// Runs the next optimizer step.
    pub fn step(&mut self, samples: &[Sample]) -> Result<LogRow> {
        if samples.is_empty() {
            return Err(Error::Dataset("cannot train on an empty dataset".into()));
        }
        let s = self.step_count();
        let total = self.cfg.total_steps(samples.len());
        let spe = self.cfg.steps_per_epoch(samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(s as u64);
        let mut highs = Vec::new();
        let mut lows = Vec::new();
        let mut gts = Vec::new();
        for i in self.batch_indices(samples.len(), s) {
            let sample = if self.cfg.augment {
                data::augment(&samples[i], &mut rng)
            } else {
                samples[i].clone()
            };
            let inputs = data::to_model_inputs::<T>(&sample, &self.model.cfg);
            highs.push(inputs.high);
            lows.push(inputs.low);
            gts.push(inputs.gt);
        }
        let gt = Tensor::stack(&gts)?;
        let mut tape = self.model.new_tape();
        let high = tape.input(Tensor::stack(&highs)?, false);
        let low = tape.input(Tensor::stack(&lows)?, false);
        let out = self.model.forward(&mut tape, high, Some(low), Mode::Train)?;
        let [hh, wh] = self.model.cfg.high_res;
        let logits = tape.resize_bilinear(out.logits, hh, wh)?;
        let (loss, parts) = loss_on_tape(&mut tape, logits, &gt)?;
        if !(parts.total.is_finite() && parts.wbce.is_finite() && parts.wiou.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: s + 1,
                total: parts.total,
                wbce: parts.wbce,
                wiou: parts.wiou,
            });
        }
        self.model.params.zero_grad();
        tape.backward(loss, &mut self.model.params)?;
        let lr = cosine_lr(s, total, self.cfg.lr0);
        self.opt.step(&mut self.model.params, lr)?;
        Ok(LogRow {
            step: s + 1,
            epoch: s / spe + 1,
            lr,
            wbce: parts.wbce,
            wiou: parts.wiou,
            total: parts.total,
        })
    }

    /// Trains until the schedule ends (or `limit` steps in total have run),
    /// calling `on_step` after every step.
    pub fn run(
        &mut self,
        samples: &[Sample],
        limit: Option<usize>,
        mut on_step: impl FnMut(&Self, &LogRow) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        let total = self.cfg.total_steps(samples.len());
        let end = limit.map_or(total, |l| l.min(total));
        let mut rows = Vec::new();
        while self.step_count() < end {
            let row = self.step(samples)?;
            on_step(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Predicts every sample and scores it against its mask.
pub fn evaluate_samples<T: Scalar>(model: &mut SegModel<T>, samples: &[Sample]) -> Result<Vec<ImageRecord>> {
    samples
        .iter()
        .map(|s| {
            let pred = model.predict(&s.image)?;
            let (w, h) = s.mask.dimensions();
            let gt = s.mask.as_raw().iter().map(|&v| v >= 128).collect();
            let probs: Vec<f64> = pred.probs.data().iter().map(|p| p.as_f64()).collect();
            let pair = MaskPair::new(probs, gt, h as usize, w as usize)?;
            let (metrics, degenerate) = evaluate_pair(&pair);
            Ok(ImageRecord {
                name: s.id.clone(),
                metrics,
                f_weighted_degenerate: degenerate,
            })
        })
        .collect()
}
