use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in &params {
        match grads.get(name) {
            None => {
                return Err(Error::contract(alloc::format!(
                    "no gradient for parameter {name}"
                )))
            }
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for (name, p) in params {
        let g = &grads[&name];
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(p));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros_like(p));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}
