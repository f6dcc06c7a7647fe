//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state: first/second moment estimates per parameter, plus the
/// global step counter used for bias correction.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient buffer are left
    /// untouched; a non-finite gradient aborts with the parameter's name.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        if let Some(name) = grads.find_non_finite() {
            return Err(Error::BadGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let param = params.get_mut(&name);
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param.values[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{GradStore, ParamSpec};

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::init(&[ParamSpec::zeros("theta", vec![1])], 0);
        store.get_mut("theta").values[0] = value;
        store
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = scalar_store(1.0);
        let mut grads = GradStore::new();
        grads.add("theta", &[0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("theta").values[0], 1.0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the first update is exactly
        // -lr * g/|g| up to the epsilon in the denominator.
        let mut store = scalar_store(1.0);
        let mut grads = GradStore::new();
        grads.add("theta", &[0.37]);
        let lr = 0.01;
        let mut adam = Adam::new(AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &grads).unwrap();
        let moved = 1.0 - store.get("theta").values[0];
        assert!((moved - lr).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        // f(theta) = theta^2 from theta=1 at lr=0.1 ends below 0.1.
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..100 {
            let theta = store.get("theta").values[0];
            let mut grads = GradStore::new();
            grads.add("theta", &[2.0 * theta]);
            adam.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("theta").values[0].abs() < 0.1);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut store = scalar_store(1.0);
        let mut grads = GradStore::new();
        grads.add("theta", &[f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
