//! End-to-end finite-difference check of the backward pass.
//!
//! The loss is the full training objective (train-mode forward, logits
//! upsampled to the high resolution, structure loss) on a seeded synthetic
//! batch. For every trainable tensor a seeded subset of coordinates plus its
//! largest-gradient coordinate is perturbed by `±h` and the central
//! difference is compared with the tape gradient.
//!
//! No single `h` suits every coordinate: ReLU kinks within `h` of the
//! current point spoil large steps, and roundoff (~1e-15 in the loss)
//! spoils small steps on small gradients. Each coordinate is therefore
//! scored by the best central difference over a short ladder of steps. A
//! wrong gradient is wrong at every step, so this does not mask errors.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, SynthSpec};
use crate::error::{Error, Result};
use crate::loss::loss_on_tape;
use crate::model::{param_group, ModelConfig, SegModel};
use crate::nn::{Mode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    /// Synthetic images in the batch.
    pub batch: usize,
    pub seed: u64,
    /// Random coordinates per tensor, on top of the largest-gradient one.
    pub coords_per_tensor: usize,
    /// Central-difference steps tried per coordinate.
    pub steps: Vec<f64>,
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
    /// Standard deviation of the random adapter `up` weights, which are
    /// zero at initialization and would hide the `down` gradients.
    pub adapter_up_std: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch: 2,
            seed: 0,
            coords_per_tensor: 4,
            steps: vec![1e-4, 1e-5, 1e-6],
            tolerance: 1e-4,
            abs_floor: 1e-6,
            adapter_up_std: 0.1,
        }
    }
}

/// Multiplies the analytic gradient of one group, to prove the check bites.
#[derive(Clone, Debug, PartialEq)]
pub struct Fault {
    pub group: String,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub tensors: usize,
    /// Trainable scalars in the group.
    pub parameters: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst: String,
    /// Analytic and numeric derivative at the worst coordinate, and the
    /// step that gave the numeric one.
    pub worst_values: [f64; 3],
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.pass).map(|g| g.group.as_str()).collect()
    }

    /// Fixed-width table, one row per group.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>7} {:>10} {:>7} {:>12}  {}\n",
            "group", "tensors", "params", "coords", "max_rel_err", "status"
        );
        for g in &self.groups {
            out.push_str(&format!(
                "{:<16} {:>7} {:>10} {:>7} {:>12.3e}  {}\n",
                g.group,
                g.tensors,
                g.parameters,
                g.coords_checked,
                g.max_rel_error,
                if g.pass { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Batch {
    high: Tensor<f64>,
    low: Tensor<f64>,
    gt: Tensor<f64>,
}

fn batch(cfg: &GradcheckConfig) -> Result<Batch> {
    let [h, w] = cfg.model.high_res;
    let spec = SynthSpec {
        width: w,
        ..SynthSpec::new(cfg.batch, h, cfg.seed)
    };
    let (samples, _) = data::synthesize(&spec)?;
    let inputs: Vec<_> = samples.iter().map(|s| data::to_model_inputs::<f64>(s, &cfg.model)).collect();
    let stack = |f: fn(&data::ModelInputs<f64>) -> &Tensor<f64>| Tensor::stack(&inputs.iter().map(|i| f(i).clone()).collect::<Vec<_>>());
    Ok(Batch {
        high: stack(|i| &i.high)?,
        low: stack(|i| &i.low)?,
        gt: stack(|i| &i.gt)?,
    })
}

/// Loss and (optionally) gradients in the registry. Batch-norm buffers are
/// restored afterwards so repeated evaluations see the same state.
fn loss(model: &mut SegModel<f64>, b: &Batch, with_grad: bool) -> Result<f64> {
    let buffers: Vec<(String, Tensor<f64>)> = model.params.buffers().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut tape = model.new_tape();
    let high = tape.input(b.high.clone(), false);
    let low = tape.input(b.low.clone(), false);
    let out = model.forward(&mut tape, high, Some(low), Mode::Train)?;
    let [hh, wh] = model.cfg.high_res;
    let logits = tape.resize_bilinear(out.logits, hh, wh)?;
    let (var, parts) = loss_on_tape(&mut tape, logits, &b.gt)?;
    if with_grad {
        model.params.zero_grad();
        tape.backward(var, &mut model.params)?;
    }
    for (name, t) in buffers {
        *model.params.get_buffer_mut(&name).expect("same registry") = t;
    }
    Ok(parts.total)
}

/// Model, batch and analytic gradients of one check.
pub struct Harness {
    pub model: SegModel<f64>,
    batch: Batch,
    pub loss: f64,
}

impl Harness {
    pub fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let mut model = SegModel::<f64>::new(&cfg.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let ups: Vec<String> = model
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("hier.adapter") && n.contains(".up."))
            .map(|(n, _)| n.to_string())
            .collect();
        for name in ups {
            let p = model.params.get_mut(&name).expect("listed above");
            for v in p.values.data_mut() {
                *v = cfg.adapter_up_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let batch = batch(cfg)?;
        let loss = loss(&mut model, &batch, true)?;
        Ok(Self { model, batch, loss })
    }

    pub fn analytic(&self, name: &str, i: usize) -> Option<f64> {
        let p = self.model.params.get(name)?;
        Some(p.grad.as_ref().map_or(0.0, |g| g.data()[i]))
    }

    /// Loss with coordinate `i` of `name` set to `value`; the coordinate is
    /// restored afterwards.
    pub fn loss_at(&mut self, name: &str, i: usize, value: f64) -> Result<f64> {
        fn slot<'a>(m: &'a mut SegModel<f64>, name: &str, i: usize) -> Result<&'a mut f64> {
            m.params
                .get_mut(name)
                .and_then(|p| p.values.data_mut().get_mut(i))
                .ok_or_else(|| Error::Argument(format!("no coordinate {name}[{i}]")))
        }
        let orig = std::mem::replace(slot(&mut self.model, name, i)?, value);
        let out = loss(&mut self.model, &self.batch, false);
        *slot(&mut self.model, name, i)? = orig;
        out
    }

    /// Central difference `(L(θ+h) − L(θ−h)) / 2h`.
    pub fn numeric(&mut self, name: &str, i: usize, h: f64) -> Result<f64> {
        let orig = self.model.params.get(name).and_then(|p| p.values.data().get(i).copied());
        let orig = orig.ok_or_else(|| Error::Argument(format!("no coordinate {name}[{i}]")))?;
        Ok((self.loss_at(name, i, orig + h)? - self.loss_at(name, i, orig - h)?) / (2.0 * h))
    }
}

pub fn run(cfg: &GradcheckConfig, fault: Option<&Fault>) -> Result<GradcheckReport> {
    if cfg.steps.is_empty() || cfg.steps.iter().any(|&h| !(h > 0.0)) || !(cfg.tolerance > 0.0) || cfg.batch == 0 {
        return Err(Error::Config("gradcheck needs positive steps, tolerance > 0 and batch ≥ 1".into()));
    }
    let mut h = Harness::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = h
        .model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut groups: BTreeMap<&'static str, GroupReport> = BTreeMap::new();
    for name in &names {
        let group = param_group(name);
        let numel = h.model.params.get(name).expect("listed above").values.numel();
        let grad: Vec<f64> = (0..numel).map(|i| h.analytic(name, i).expect("listed above")).collect();
        let scale = fault.filter(|f| f.group == group).map_or(1.0, |f| f.scale);
        let mut coords: Vec<usize> = index::sample(&mut rng, numel, cfg.coords_per_tensor.min(numel)).into_vec();
        let argmax = (0..numel)
            .max_by(|&i, &j| grad[i].abs().total_cmp(&grad[j].abs()))
            .expect("tensors are non-empty");
        if !coords.contains(&argmax) {
            coords.push(argmax);
        }
        let entry = groups.entry(group).or_insert_with(|| GroupReport {
            group: group.to_string(),
            tensors: 0,
            parameters: 0,
            coords_checked: 0,
            max_rel_error: 0.0,
            worst: String::new(),
            worst_values: [0.0; 3],
            pass: true,
        });
        entry.tensors += 1;
        entry.parameters += numel;
        for i in coords {
            let analytic = grad[i] * scale;
            let (mut err, mut numeric, mut used) = (f64::INFINITY, f64::NAN, f64::NAN);
            for &step in &cfg.steps {
                let n = h.numeric(name, i, step)?;
                let e = relative_error(analytic, n, cfg.abs_floor);
                if e < err || e.is_nan() {
                    (err, numeric, used) = (e, n, step);
                }
            }
            entry.coords_checked += 1;
            if err > entry.max_rel_error || err.is_nan() {
                entry.max_rel_error = err;
                entry.worst = format!("{name}[{i}]");
                entry.worst_values = [analytic, numeric, used];
            }
        }
    }
    let groups = groups
        .into_values()
        .map(|mut g| {
            g.pass = g.max_rel_error <= cfg.tolerance;
            g
        })
        .collect();
    Ok(GradcheckReport {
        loss: h.loss,
        steps: cfg.steps.clone(),
        tolerance: cfg.tolerance,
        groups,
    })
}
