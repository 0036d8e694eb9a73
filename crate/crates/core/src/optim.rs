//! Trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// A named trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    /// One bias-corrected Adam update from `param.grad`.
    ///
    /// A non-finite gradient leaves the parameter and its moments untouched.
    pub fn step(&self, param: &mut Parameter) -> Result<()> {
        if !param.grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", param.name)));
        }
        param.step_count += 1;
        let t = param.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let g = param.grad.data();
        let m = param.adam_m.data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        }
        let v = param.adam_v.data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        }
        let (m, v) = (param.adam_m.data(), param.adam_v.data());
        for ((x, m), v) in param.value.data_mut().iter_mut().zip(m).zip(v) {
            *x -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// An ordered collection of parameters that can be bound onto a [`Graph`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Adds every parameter value as a leaf on `g`, in slot order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect()
    }

    /// Adds the leaf gradients of a bound graph into the parameter buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.grad(v) {
                p.grad.add_assign(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Scales every gradient buffer, e.g. to flip ascent into descent.
    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// Adam step on every parameter. Checks all gradients first, so a
    /// non-finite gradient anywhere leaves the whole store unchanged.
    /// Gradient buffers are cleared after a successful step.
    pub fn adam_step(&mut self, adam: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", p.name)));
        }
        for p in &mut self.params {
            adam.step(p)?;
            p.zero_grad();
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every value; used to assert that a
    /// phase left the parameters untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(g: &[f64]) -> Parameter {
        let mut p = Parameter::new("p", Tensor::new(&[g.len()], vec![1.0; g.len()]).unwrap());
        p.grad = Tensor::new(&[g.len()], g.to_vec()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut p = param(&[0.0, 0.0]);
        AdamConfig::default().step(&mut p).unwrap();
        assert_eq!(p.value.data(), &[1.0, 1.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // beta1 = 0: m = g, v = 0.1 g², v̂ = g², update = -lr·g/(|g| + eps).
        let adam = AdamConfig { lr: 1e-3, beta1: 0.0, beta2: 0.9, eps: 1e-8 };
        let mut p = param(&[0.5, -2.0]);
        adam.step(&mut p).unwrap();
        assert_eq!(p.adam_m.data(), &[0.5, -2.0]);
        assert!((p.adam_v.data()[0] - 0.1 * 0.25).abs() < 1e-15);
        let expect0 = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 + 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((p.value.data()[0] - expect0).abs() < 1e-15);
        assert!((p.value.data()[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_converges_to_sign_steps() {
        let adam = AdamConfig { lr: 1e-2, ..Default::default() };
        let mut p = param(&[3.0]);
        let mut last = p.value.data()[0];
        for _ in 0..200 {
            adam.step(&mut p).unwrap();
            let now = p.value.data()[0];
            assert!(((last - now) - 1e-2).abs() < 1e-8);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = param(&[f64::NAN, 1.0]);
        let before = p.clone();
        assert!(matches!(AdamConfig::default().step(&mut p), Err(Error::Numeric(_))));
        assert_eq!(p.value, before.value);
        assert_eq!(p.step_count, 0);
    }
}
