use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then half-cosine decay towards zero.
    #[default]
    Cosine,
    /// Linear warmup, then flat.
    Constant,
}

/// `ceil(ratio · steps)`; at least one step whenever the ratio is positive.
pub fn warmup_steps(steps: usize, warmup_ratio: f64) -> usize {
    if warmup_ratio <= 0.0 {
        0
    } else {
        ((warmup_ratio * steps as f64).ceil() as usize).clamp(1, steps)
    }
}

/// Learning rate used by the update at 0-based `step`.
pub fn learning_rate(schedule: Schedule, lr_max: f64, step: usize, steps: usize, warmup_ratio: f64) -> f64 {
    let w = warmup_steps(steps, warmup_ratio);
    if step < w {
        return lr_max * (step + 1) as f64 / w as f64;
    }
    match schedule {
        Schedule::Constant => lr_max,
        Schedule::Cosine => {
            let span = steps.saturating_sub(w).max(1) as f64;
            let progress = ((step - w) as f64 / span).min(1.0);
            0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated grads. `t` is the 1-based
    /// update count used for bias correction.
    pub fn update(&mut self, params: &mut ParamSet, lr: f64, weight_decay: f64, t: usize) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad().data().to_vec();
            let value = p.value_mut().data_mut();
            for (((x, g), m), v) in value.iter_mut().zip(&grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *x -= lr * (step + weight_decay * *x);
            }
        }
        Ok(())
    }
}
