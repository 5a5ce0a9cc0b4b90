use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 2e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter.
///
/// The whole step is rejected, leaving `params` and `state` untouched, if any
/// gradient entry is non-finite.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(AutodiffError::ArityMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient {
                param: i,
                index,
                value,
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w = *w * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
