use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroups;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &impl ParamGroups) -> Self {
        let groups = params.groups();
        Self {
            names: groups.iter().map(|(n, _)| n.clone()).collect(),
            m: groups.iter().map(|(_, g)| vec![0.0; g.len()]).collect(),
            v: groups.iter().map(|(_, g)| vec![0.0; g.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, group: usize) -> &[f64] {
        &self.m[group]
    }

    pub fn second_moment(&self, group: usize) -> &[f64] {
        &self.v[group]
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// value leaves both the parameters and the state untouched.
pub fn adam_step<P: ParamGroups>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grad_groups = grads.groups();
    if grad_groups.len() != state.names.len() {
        return Err(Error::Contract(format!(
            "{} gradient groups for {} optimizer groups",
            grad_groups.len(),
            state.names.len()
        )));
    }
    for ((name, g), (expected, m)) in grad_groups.iter().zip(state.names.iter().zip(&state.m)) {
        if name != expected || g.len() != m.len() {
            return Err(Error::Contract(format!("gradient group `{name}` does not match `{expected}`")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { group: name.clone() });
        }
    }
    let mut param_groups = params.groups_mut();
    if param_groups.len() != grad_groups.len()
        || param_groups.iter().zip(&grad_groups).any(|((_, p), (_, g))| p.len() != g.len())
    {
        return Err(Error::Contract("parameter and gradient shapes differ".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), (_, g)), (m, v)) in
        param_groups.iter_mut().zip(&grad_groups).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
