use indexmap::IndexMap;

use super::params::{GradTable, ParamStore};
use super::tensor::Tensor;
use crate::error::{contract_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor>,
    second: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter named in `stepped` from `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradTable, stepped: &[String]) -> Result<()> {
        for name in stepped {
            let g = grads
                .get(name)
                .ok_or_else(|| contract_err!("no gradient for stepped parameter `{name}`"))?;
            let p = params.get(name)?;
            if !p.same_shape(g) {
                return Err(dim_err!("gradient shape mismatch for `{name}`"));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for name in stepped {
            let g = grads.get(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let m = &self.first[name];
            let v = &self.second[name];
            let p = params.get_mut(name)?;
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x), true).unwrap();
        s
    }

    fn grad(g: f64) -> GradTable {
        let mut t = GradTable::new();
        t.insert("x".into(), Tensor::scalar(g));
        t
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01));
        adam.step(&mut s, &grad(3.7), &["x".into()]).unwrap();
        let x = s.get("x").unwrap().item();
        assert!((x - (1.0 - 0.01)).abs() < 1e-8, "{x}");
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.step(&mut s, &grad(0.0), &["x".into()]).unwrap();
        assert_eq!(s.get("x").unwrap().item(), 1.0);
    }

    #[test]
    fn descends_on_square() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = s.get("x").unwrap().item();
            adam.step(&mut s, &grad(2.0 * x), &["x".into()]).unwrap();
            let now = s.get("x").unwrap().item();
            assert!(now.abs() < prev.abs(), "{now} vs {prev}");
            prev = now;
        }
        assert!(adam.steps() == 10);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        let err = adam.step(&mut s, &GradTable::new(), &["x".into()]);
        assert!(matches!(err, Err(crate::Error::Contract(_))));
    }
}
