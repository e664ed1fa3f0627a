//! AdamW and parameter EMA.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. The step counter is incremented before bias correction.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::invalid(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::shape("adamw_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "adamw_step" });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                if weight_decay != 0.0 {
                    p[i] *= decay;
                }
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9999;

impl Ema {
    pub fn new(params: &[Tensor], decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Ema {
            decay,
            shadow: params.to_vec(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`.
    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        self.update_with(params, self.decay)
    }

    /// Update with an explicit decay (for warm-up schedules).
    pub fn update_with(&mut self, params: &[Tensor], decay: f64) -> Result<()> {
        check_decay(decay)?;
        if params.len() != self.shadow.len() {
            return Err(TensorError::invalid(
                "ema_update",
                format!("{} params vs {} shadows", params.len(), self.shadow.len()),
            ));
        }
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(TensorError::shape("ema_update", s.shape(), p.shape()));
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = decay * *sv + (1.0 - decay) * pv;
            }
        }
        Ok(())
    }

    /// Decay after `updates` prior updates with warm-up: `min(decay, (1 + n) / (10 + n))`.
    pub fn warmup_decay(&self, updates: u64) -> f64 {
        let n = updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(TensorError::invalid(
            "ema_update",
            format!("decay {decay} outside (0, 1)"),
        ))
    }
}
