//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments shaped like the model, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One Adam update of `theta` in place. Moments are updated in `m` and `v`;
/// `t` is the 1-based step number after incrementing.
pub fn adam_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (((p, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g.f64();
        let m_new = cfg.beta1 * mi.f64() + (1.0 - cfg.beta1) * g;
        let v_new = cfg.beta2 * vi.f64() + (1.0 - cfg.beta2) * g * g;
        *mi = T::of(m_new);
        *vi = T::of(v_new);
        let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps);
        *p = T::of(p.f64() - step);
    }
}

pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.config != grads.config
        || params.config != state.m.config
        || params.blocks.len() != grads.blocks.len()
        || params.blocks.len() != state.m.blocks.len()
    {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and optimizer state disagree".into(),
        ));
    }
    state.t += 1;
    let g = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((theta, g), m), v) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs) {
        adam_update(theta, g, m, v, state.t, lr, cfg);
    }
    Ok(())
}
