use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    step: u64,
    first: HashMap<String, Vec<T>>,
    second: HashMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter that carries a
    /// gradient. Parameters with `grad == None` are left untouched, and so
    /// are their moments.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let (c1, c2, eps, lr) = (T::lit(c1), T::lit(c2), T::lit(eps), T::lit(lr));

        for (name, p) in params {
            let Some(grad) = p.grad.take() else { continue };
            if grad.len() != p.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: {} grads for {} values", grad.len(), p.numel()),
                ));
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            if m.len() != grad.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: moment buffer has {} values, parameter {}", m.len(), grad.len()),
                ));
            }
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Cosine,
    Constant,
}

/// Per-epoch learning rate: linear warmup, then decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub decay: DecayKind,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        match self.decay {
            DecayKind::Constant => self.base_lr,
            DecayKind::Cosine => {
                let span = self.total_epochs.saturating_sub(self.warmup_epochs).max(1);
                let progress = ((epoch - self.warmup_epochs) as f64 / span as f64).min(1.0);
                (0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
            }
        }
    }
}
