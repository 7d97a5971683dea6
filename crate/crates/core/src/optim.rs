//! Adam with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    first: HashMap<String, Tensor<S>>,
    second: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters are first shrunk by `lr * weight_decay`, then
    /// moved by the bias-corrected moment ratio.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &[(String, Tensor<S>)],
    ) -> Result<()> {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let shrink = S::of(1.0 - c.lr * c.weight_decay);
        let step_size = S::of(c.lr / bc1);
        let bc2_sqrt = S::of(bc2.sqrt());
        let eps = S::of(c.eps);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| {
                Error::Invalid(format!("gradient for unknown parameter {name:?}"))
            })?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!(
                        "{name}: parameter {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                *pv = *pv * shrink;
                *pv = *pv - step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(String, Tensor<S>)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let c = S::of(max_norm / total);
        for (_, g) in grads.iter_mut() {
            g.scale_assign(c);
        }
    }
    total
}
