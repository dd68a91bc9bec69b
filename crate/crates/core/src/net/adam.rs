use super::TrainConfig;
use crate::error::{invalid, Result};

/// First and second moment estimates plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; advances `state.step`.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(invalid("parameter, gradient and moment lengths differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}
