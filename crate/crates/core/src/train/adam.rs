//! Bias-corrected Adam over the named parameter tensors.

use crate::error::{Error, Result};
use crate::params::{Model, ParamTensors, TENSOR_NAMES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub settings: AdamSettings,
    pub step: u64,
    /// First moments, one buffer per tensor in [`TENSOR_NAMES`] order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &impl ParamTensors, settings: AdamSettings) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            settings,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Reorders per-Gaussian moment rows after densification; `rows[k]` is
    /// the source row of output row `k`, `count` the old Gaussian count.
    pub fn gather(&self, count: usize, rows: &[usize]) -> Self {
        let pick = |buf: &Vec<f64>| {
            let width = if count == 0 { 0 } else { buf.len() / count };
            let mut out = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                out.extend_from_slice(&buf[r * width..(r + 1) * width]);
            }
            out
        };
        Self {
            settings: self.settings,
            step: self.step,
            m: self.m.iter().map(pick).collect(),
            v: self.v.iter().map(pick).collect(),
        }
    }
}

/// Fails with the path of the first non-finite gradient entry.
pub fn check_finite(grads: &impl ParamTensors) -> Result<()> {
    for (name, g) in TENSOR_NAMES.iter().zip(grads.tensors()) {
        if let Some(k) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                path: format!("{name}[{k}]"),
            });
        }
    }
    Ok(())
}

/// One Adam update with a learning rate per tensor.
pub fn adam_update(
    params: &mut impl ParamTensors,
    grads: &impl ParamTensors,
    state: &mut OptimizerState,
    lrs: &[f64],
) -> Result<()> {
    check_finite(grads)?;
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if params.len() != grads.len() || state.m.len() != grads.len() || lrs.len() != grads.len() {
        return Err(Error::Shape("optimizer tensor count mismatch".into()));
    }
    for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
        if p.len() != g.len() || state.m[k].len() != g.len() {
            return Err(Error::Shape(format!(
                "{}: {} params, {} grads, {} moments",
                TENSOR_NAMES.get(k).unwrap_or(&"?"),
                p.len(),
                g.len(),
                state.m[k].len()
            )));
        }
    }
    state.step += 1;
    let AdamSettings { beta1, beta2, eps } = state.settings;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let lr = lrs[k];
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam step on a model followed by the width projection.
pub fn adam_step(model: &mut Model, grads: &impl ParamTensors, state: &mut OptimizerState, lrs: &[f64]) -> Result<()> {
    adam_update(model, grads, state, lrs)?;
    model.field.clamp_widths();
    Ok(())
}
