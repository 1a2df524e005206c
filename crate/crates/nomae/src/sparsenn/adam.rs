//! AdamW with decoupled weight decay, plus the cosine/warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsenn::params::{GradStore, Param, ParamStore};
use crate::sparsenn::scalar::Scalar;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-2 }
    }
}

/// Per-parameter first/second moment estimates and a shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<(String, Param<T>)>,
    v: Vec<(String, Param<T>)>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<(String, Param<T>)> =
            params.iter().map(|(name, p)| (name.clone(), p.zeros_like())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor<T: Scalar>(
    param: &mut Param<T>,
    grad: &Param<T>,
    m: &mut Param<T>,
    v: &mut Param<T>,
    hyper: &AdamHyper,
    lr: f64,
    bias1: f64,
    bias2: f64,
) -> Result<()> {
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one = T::one();
    let eps = T::from_f64(hyper.eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * hyper.weight_decay);
    let inv_bias1 = T::from_f64(1.0 / bias1);
    let inv_bias2 = T::from_f64(1.0 / bias2);

    let (mut p_it, mut g_it, mut m_it, mut v_it) =
        (param.iter_mut(), grad.iter(), m.iter_mut(), v.iter_mut());
    loop {
        match (p_it.next(), g_it.next(), m_it.next(), v_it.next()) {
            (Some(p), Some(&g), Some(m), Some(v)) => {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m * inv_bias1;
                let v_hat = *v * inv_bias2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            }
            (None, None, None, None) => break,
            _ => return Err(Error::Shape("optimizer state out of sync".into())),
        }
    }
    Ok(())
}

/// One AdamW step at learning rate `lr` (already scheduled). Weight decay is
/// decoupled: `p -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * p`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradStore<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let bias1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bias2 = 1.0 - hyper.beta2.powi(state.step as i32);

    for (slot, (m_entry, v_entry)) in state.m.iter_mut().zip(state.v.iter_mut()).enumerate() {
        let name = m_entry.0.clone();
        debug_assert_eq!(v_entry.0, name);
        let grad = grads.get(&name)?;
        let param = params.get_mut(&name)?;
        if param.dims() != grad.dims() {
            return Err(Error::Shape(format!("parameter {name} (slot {slot}) shape mismatch")));
        }
        update_tensor(param, grad, &mut m_entry.1, &mut v_entry.1, hyper, lr, bias1, bias2)?;
    }
    Ok(())
}

/// Cosine decay with linear warmup. Steps count from zero; the first step
/// already applies a nonzero fraction of the base rate.
pub fn cosine_warmup_lr(base_lr: f64, step: u64, warmup_steps: u64, total_steps: u64, min_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.clamp(0.0, 1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
