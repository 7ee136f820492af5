#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters. Defaults are the model-optimizer settings;
/// the estimator optimizer uses the same betas at twice the rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-6,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment accumulators aligned index-for-index with a
/// [`ParamSet`]. `t` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        let v = params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        AdamState { config, t: 0, m, v }
    }

    /// One bias-corrected Adam update over every parameter in the set.
    /// `grads` must be in parameter order (as from `Bound::grads`).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        let bc1 = one - T::from_f64(self.config.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64(self.config.beta2.powi(self.t as i32));
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let p = params.get_mut(id);
            if g.len() != p.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adam: gradient {} has {} entries, parameter has {}",
                    i,
                    g.len(),
                    p.len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
