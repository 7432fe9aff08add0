//! Adam with bias correction.

use serde::{Deserialize, Serialize};
use stn_core::network::ParamSet;
use stn_core::Scalar;

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok && self.lr.is_finite() && self.eps.is_finite() {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "Adam needs lr > 0, eps > 0 and betas in (0, 1); got {self:?}"
            )))
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place. Fails before touching anything if
/// a gradient entry is not finite.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig, name: &str) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "'{name}': {} values, {} gradients, {} moment entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(name.to_string()));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(state.step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(state.step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a whole parameter set; frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            states: params.iter().map(|p| AdamState::new(p.tensor.numel())).collect(),
        }
    }

    /// Applies the accumulated grads (missing grads count as zero) and clears them.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if !p.frozen && g.iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        for (p, state) in params.iter_mut().zip(&mut self.states) {
            if p.frozen {
                continue;
            }
            let grad = p.tensor.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
            adam_step(p.tensor.data_mut(), &grad, state, &self.config, &p.name)?;
        }
        params.zero_grads();
        Ok(())
    }
}
