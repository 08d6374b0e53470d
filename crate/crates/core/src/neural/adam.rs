use super::params::ParameterSet;
use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn for_params(ps: &ParameterSet, lr: f64) -> Self {
        Self::new(ps.flat_len(), lr)
    }
}

/// Bias-corrected Adam update applied in place to a flat parameter vector.
pub fn adam_update(params: &mut [f64], grads: &[f64], st: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(SimError::shape("adam step", params.len(), format!("grads {} / moments {}", grads.len(), st.m.len())));
    }
    st.step += 1;
    let bc1 = 1.0 - st.beta1.powi(st.step as i32);
    let bc2 = 1.0 - st.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        params[i] -= st.lr * m_hat / (v_hat.sqrt() + st.eps);
    }
    Ok(())
}

pub fn adam_step(ps: &mut ParameterSet, grads: &[f64], st: &mut AdamState) -> Result<()> {
    let mut flat = ps.flat();
    adam_update(&mut flat, grads, st)?;
    ps.set_flat(&flat)
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
