//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    shape: Vec<usize>,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        AdamState {
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &[f32], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grad.len() != param.numel() || state.shape != param.shape() {
        return Err(Error::Dimension(format!(
            "adam step for {:?} with gradient of {} and state {:?}",
            param.shape(),
            grad.len(),
            state.shape
        )));
    }
    state.step += 1;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let lr = cfg.lr as f64;
    let eps = cfg.eps as f64;
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g as f64;
        let mn = b1 * *m as f64 + (1.0 - b1) * g;
        let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
        *m = mn as f32;
        *v = vn as f32;
        let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
        *p = (*p as f64 - update) as f32;
    }
    Ok(())
}

/// Adam over a named parameter set. State for a name whose tensor changed
/// shape (after structural pruning) is discarded and restarted from zero.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f32]) -> Result<()> {
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState::new(param.shape()));
        if state.shape != param.shape() {
            *state = AdamState::new(param.shape());
        }
        adam_step(param, grad, state, &self.config)
    }

    /// Drops state whose name is gone or whose shape no longer matches.
    pub fn retain_matching<'a>(&mut self, params: impl Fn(&str) -> Option<&'a [usize]>) {
        self.states
            .retain(|name, st| params(name).is_some_and(|s| s == st.shape.as_slice()));
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}
