use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet};
use crate::error::{contract, domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moments plus the step counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet>(params: &P, config: AdamWConfig) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        OptimizerState {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One AdamW update. Weight decay shrinks the parameters directly
/// (`θ ← θ − lr·wd·θ`) and never enters the moment estimates.
pub fn adamw_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(domain(format!("learning rate must be positive, got {lr}")));
    }
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if grads.len() != params.len()
        || state.first_moment.len() != params.len()
        || state.second_moment.len() != params.len()
    {
        return Err(contract(
            "optimizer: parameter, gradient and moment group counts differ",
        ));
    }
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        if !p.same_shape(g)
            || !p.same_shape(&state.first_moment[i])
            || !p.same_shape(&state.second_moment[i])
        {
            return Err(contract(format!("optimizer: shape mismatch in group {i}")));
        }
    }

    let AdamWConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((theta, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / bias1;
            let v_hat = *vj / bias2;
            *theta -= lr * weight_decay * *theta;
            *theta -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
