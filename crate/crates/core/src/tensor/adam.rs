use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradMap, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment pair per named parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(x));
        p
    }

    fn grad(x: f64) -> GradMap {
        let mut g = GradMap::default();
        g.insert("w", Tensor::scalar(x));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = single(1.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias correction gives m_hat = 1, v_hat = 1,
        // so the step is lr / (1 + eps).
        let mut p = single(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &grad(1.0)).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let (mut a, mut b) = (single(0.3), single(0.3));
        let (mut oa, mut ob) = (Adam::new(AdamConfig::default()), Adam::new(AdamConfig::default()));
        for g in [0.5, -1.0, 2.0] {
            oa.step(&mut a, &grad(g)).unwrap();
            ob.step(&mut b, &grad(g)).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut g = GradMap::default();
        g.insert("w", Tensor::zeros(2, 1));
        assert!(matches!(
            Adam::new(AdamConfig::default()).step(&mut p, &g),
            Err(Error::Shape { .. })
        ));
    }
}
