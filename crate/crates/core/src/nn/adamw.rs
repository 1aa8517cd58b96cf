//! AdamW: Adam with weight decay decoupled from the gradient moments.

use crate::error::{Error, Result};
use crate::nn::registry::ParamRegistry;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, in registry order.
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(registry: &ParamRegistry<T>, config: AdamWConfig) -> Self {
        let zeros = || {
            registry
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One update of every parameter. Gradients are left in place; the caller
    /// clears them.
    pub fn step(&mut self, registry: &mut ParamRegistry<T>) -> Result<()> {
        if self.first.len() != registry.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, registry has {}",
                self.first.len(),
                registry.len()
            )));
        }
        for ((name, p), m) in registry.iter().zip(&self.first) {
            if p.grad.is_none() {
                return Err(Error::Contract(format!("parameter {name} has no gradient")));
            }
            if m.shape() != p.value.shape() {
                return Err(Error::dim("adamw", m.shape(), p.value.shape()));
            }
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (lr, decay) = (T::lit(c.lr), T::lit(1.0 - c.lr * c.weight_decay));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (nb1, nb2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2, eps) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2), T::lit(c.eps));

        for (((_, p), m), v) in registry.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_ref().expect("checked above").data();
            let theta = p.value.data_mut();
            for (((th, &g), mi), vi) in theta
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *th = *th * decay;
                *mi = b1 * *mi + nb1 * g;
                *vi = b2 * *vi + nb2 * g * g;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
