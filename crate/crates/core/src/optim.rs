//! Adam for captioning parameters, momentum SGD for gate logits, and the
//! cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gating::cosine_anneal;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_final + (lr_init - lr_final) * α(step, n_max)`.
pub fn lr_at(step: u64, n_max: u64, lr_init: f64, lr_final: f64) -> f64 {
    lr_final + (lr_init - lr_final) * cosine_anneal(step as usize, n_max as usize)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with bias correction, one moment pair per named parameter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Adam {
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        check_len(name, param, grad)?;
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            t: 0,
        });
        slot.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(slot.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(slot.t as i32);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(&mut slot.m)
            .zip(&mut slot.v)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v = μ v + g; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    pub mu: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
}

impl Momentum {
    pub fn new(mu: f64) -> Self {
        Momentum {
            mu,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        check_len(name, param, grad)?;
        let vel = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, &g), v) in param.data_mut().iter_mut().zip(grad).zip(vel) {
            *v = self.mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}

fn check_len(name: &str, param: &Tensor, grad: &[f64]) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::invalid(format!(
            "{name}: gradient of length {} for parameter of shape {:?}",
            grad.len(),
            param.shape()
        )));
    }
    Ok(())
}
