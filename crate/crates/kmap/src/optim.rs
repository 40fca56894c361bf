//! Named parameter store and the Adam optimizer.

use crate::error::{KmapError, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// One trainable tensor plus its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
    step_count: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name,
            value,
            grad: Tensor::zeros(shape.clone()),
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// Registration-ordered collection of parameters. Iteration order is the
/// registration order, which keeps optimizer updates deterministic.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let idx = self.params.len();
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter::new(name, value));
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.params[index].name
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Tensor {
        &self.params[index].grad
    }

    pub fn grad_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = Tensor::zeros(p.grad.shape().to_vec());
        }
    }

    pub fn zero_grad(&mut self, index: usize) {
        let p = &mut self.params[index];
        p.grad = Tensor::zeros(p.grad.shape().to_vec());
    }

    /// Global L2 norm of gradients over parameters accepted by `filter`.
    pub fn grad_norm(&self, filter: impl Fn(&str) -> bool) -> f64 {
        let mut s = 0.0;
        for p in &self.params {
            if filter(&p.name) {
                s += p.grad.data().iter().map(|g| g * g).sum::<f64>();
            }
        }
        s.sqrt()
    }

    /// Scale gradients so their global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64, filter: impl Fn(&str) -> bool) {
        let norm = self.grad_norm(&filter);
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for p in self.params.iter_mut() {
                if filter(&p.name) {
                    p.grad.scale_in_place(factor);
                }
            }
        }
    }

    /// Standard Adam with bias correction over parameters accepted by
    /// `filter`. Gradients are left intact; the caller zeroes them.
    pub fn adam_step(
        &mut self,
        lr: f64,
        betas: (f64, f64),
        eps: f64,
        filter: impl Fn(&str) -> bool,
    ) {
        let (b1, b2) = betas;
        for p in self.params.iter_mut() {
            if !filter(&p.name) {
                continue;
            }
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let n = p.value.numel();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = b1 * p.adam_m.data()[i] + (1.0 - b1) * g;
                let v = b2 * p.adam_v.data()[i] + (1.0 - b2) * g * g;
                p.adam_m.data_mut()[i] = m;
                p.adam_v.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Flat export of parameter values, used by the checkpoint writer.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values from a checkpoint export. Every stored parameter must
    /// be present with the right shape.
    pub fn import(&mut self, values: &HashMap<String, Tensor>) -> Result<()> {
        for p in self.params.iter_mut() {
            let t = values.get(&p.name).ok_or_else(|| {
                KmapError::invalid(format!("checkpoint is missing parameter {}", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(KmapError::invalid(format!(
                    "checkpoint shape {:?} for {} does not match expected {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_adam_step_is_signed_lr() {
        // With bias correction the first step is lr * g / (|g| + eps').
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0, 1.0]));
        store.grad_mut(p).data_mut()[0] = 0.3;
        store.grad_mut(p).data_mut()[1] = -2.0;
        store.adam_step(0.1, ADAM_BETAS, ADAM_EPS, |_| true);
        let v = store.value(p).data();
        assert_relative_eq!(v[0], 1.0 - 0.1, max_relative = 1e-6);
        assert_relative_eq!(v[1], 1.0 + 0.1, max_relative = 1e-6);
    }

    #[test]
    fn zero_grad_means_zero_update() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0, 2.0]));
        store.adam_step(0.1, ADAM_BETAS, ADAM_EPS, |_| true);
        assert_eq!(store.value(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_grad_steps_have_comparable_magnitude() {
        // Scalar reference: with a constant gradient the second bias-corrected
        // step stays close to the first (bounded-step property of Adam).
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(0.0));
        store.grad_mut(p).data_mut()[0] = 0.5;
        store.adam_step(0.1, ADAM_BETAS, ADAM_EPS, |_| true);
        let first = store.value(p).item();
        store.grad_mut(p).data_mut()[0] = 0.5;
        store.adam_step(0.1, ADAM_BETAS, ADAM_EPS, |_| true);
        let second = store.value(p).item() - first;
        assert_relative_eq!(first.abs(), second.abs(), max_relative = 1e-3);
    }

    #[test]
    fn filter_skips_parameters() {
        let mut store = ParamStore::new();
        let a = store.register("keep", Tensor::scalar(1.0));
        let b = store.register("skip", Tensor::scalar(1.0));
        store.grad_mut(a).data_mut()[0] = 1.0;
        store.grad_mut(b).data_mut()[0] = 1.0;
        store.adam_step(0.1, ADAM_BETAS, ADAM_EPS, |n| n == "keep");
        assert_ne!(store.value(a).item(), 1.0);
        assert_eq!(store.value(b).item(), 1.0);
    }

    #[test]
    fn clip_reduces_global_norm() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::vector(vec![0.0; 4]));
        for i in 0..4 {
            store.grad_mut(a).data_mut()[i] = 10.0;
        }
        store.clip_grad_norm(5.0, |_| true);
        assert_relative_eq!(store.grad_norm(|_| true), 5.0, max_relative = 1e-12);
    }
}
