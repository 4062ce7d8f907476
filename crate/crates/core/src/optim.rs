//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamRegistry, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per trainable parameter, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Completed steps; the bias corrections use `t = step + 1`.
    pub step: u64,
    pub moments: IndexMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One update of every trainable parameter that holds a gradient.
    ///
    /// Order per parameter: `θ ← θ·(1 − lr·λ)` (weights only), moment
    /// update, bias correction, `θ ← θ − lr·m̂/(√v̂ + ε)`. Gradients are
    /// checked for finiteness before anything is modified.
    pub fn step(&mut self, reg: &mut ParamRegistry<T>, lr: f64) -> Result<()> {
        for (name, p) in reg.iter() {
            if let (true, Some(g)) = (p.trainable, &p.grad) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }
        let t = self.step as i32 + 1;
        let [b1, b2] = self.cfg.betas;
        let bc1 = T::lit(1.0 - b1.powi(t));
        let bc2 = T::lit(1.0 - b2.powi(t));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let (one, eps, lr_t) = (T::one(), T::lit(self.cfg.eps), T::lit(lr));
        let decay = T::lit(1.0 - lr * self.cfg.weight_decay);
        for (name, p) in reg.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.values.shape()), Tensor::zeros(p.values.shape())));
            let apply_decay = p.decay && self.cfg.weight_decay != 0.0;
            let values = p.values.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                if apply_decay {
                    values[i] = values[i] * decay;
                }
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`, never negative; `lr0` when
/// `total` is zero.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step.min(total) as f64 / total as f64;
    (lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64, decay: bool) -> ParamRegistry<f64> {
        let mut reg = ParamRegistry::new();
        reg.register("p", Tensor::scalar(value), true, decay).unwrap();
        reg.get_mut("p").unwrap().grad = Some(Tensor::scalar(grad));
        reg
    }

    fn value(reg: &ParamRegistry<f64>) -> f64 {
        reg.get("p").unwrap().values.data()[0]
    }

    #[test]
    fn first_step_closed_form() {
        let mut reg = single(1.0, 1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut reg, 0.1).unwrap();
        // m̂ = v̂ = 1
        let expected = 1.0 - 0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((value(&reg) - expected).abs() < 1e-15);
        assert!((value(&reg) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut reg = single(0.7, 0.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..3 {
            opt.step(&mut reg, 0.1).unwrap();
        }
        assert_eq!(value(&reg), 0.7);
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_decay() {
        let mut reg = single(2.0, 0.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut reg, 0.1).unwrap();
        assert_eq!(value(&reg), 2.0 * (1.0 - 0.1 * 0.5));
        // biases are exempt
        let mut reg = single(2.0, 0.0, false);
        opt.step(&mut reg, 0.1).unwrap();
        assert_eq!(value(&reg), 2.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut reg = ParamRegistry::<f64>::new();
        reg.register("f", Tensor::scalar(3.0), false, true).unwrap();
        reg.get_mut("f").unwrap().grad = Some(Tensor::scalar(1.0));
        AdamW::new(AdamWConfig::default()).step(&mut reg, 0.1).unwrap();
        assert_eq!(reg.get("f").unwrap().values.data()[0].to_bits(), 3.0f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let mut reg = single(1.0, 1.0, true);
        reg.register("q", Tensor::scalar(1.0), true, true).unwrap();
        reg.get_mut("q").unwrap().grad = Some(Tensor::scalar(f64::NAN));
        let mut opt = AdamW::new(AdamWConfig::default());
        match opt.step(&mut reg, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "q"),
            other => panic!("{other:?}"),
        }
        assert_eq!(value(&reg), 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 2e-4), 2e-4);
        assert!((cosine_lr(500, 1000, 2e-4) - 1e-4).abs() <= 1e-12);
        assert_eq!(cosine_lr(1000, 1000, 2e-4), 0.0);
        assert_eq!(cosine_lr(1, 0, 2e-4), 2e-4);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let lrs: Vec<f64> = (0..=97).map(|s| cosine_lr(s, 97, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
