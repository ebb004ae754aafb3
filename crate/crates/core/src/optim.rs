//! Adam-atan2 with linear warmup, decoupled weight decay and EMA shadows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpdateRule {
    /// Direction `atan2(m̂, √v̂)`; bounded by π/2 per coordinate.
    AdamAtan2,
    /// Direction `m̂ / (√v̂ + eps)`.
    Adam { eps: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u64,
    pub ema_ratio: f64,
    pub rule: UpdateRule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            warmup_steps: 2000,
            ema_ratio: 0.999,
            rule: UpdateRule::AdamAtan2,
        }
    }
}

impl OptimConfig {
    /// Learning rate applied at step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (t as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Per-coordinate update direction before scaling by the learning rate.
pub fn direction<T: Scalar>(rule: UpdateRule, m_hat: T, v_hat: T) -> T {
    match rule {
        UpdateRule::AdamAtan2 => m_hat.atan2(v_hat.sqrt()),
        UpdateRule::Adam { eps } => m_hat / (v_hat.sqrt() + cast::<T>(eps)),
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub ema: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            ema: params.iter().map(|p| p.data().to_vec()).collect(),
            t: 0,
        }
    }

    fn check_congruent(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len()
            || params.iter().zip(&self.m).any(|(p, m)| p.len() != m.len())
        {
            return Err(Error::shape(
                "optimizer_step",
                "parameter list does not match optimizer state",
            ));
        }
        Ok(())
    }

    /// Applies one update from the `grad` buffers of `params`, then clears
    /// them. A missing gradient counts as zero. Any non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        self.check_congruent(params)?;
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = &p.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {i}")));
                }
            }
        }
        self.t += 1;
        let c = &self.config;
        let b1: T = cast(c.beta1);
        let b2: T = cast(c.beta2);
        let one = T::one();
        let bc1: T = cast(1.0 - c.beta1.powf(self.t as f64));
        let bc2: T = cast(1.0 - c.beta2.powf(self.t as f64));
        let lr = c.lr_at(self.t);
        let lr_t: T = cast(lr);
        let decay: T = cast(1.0 - lr * c.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let dir = direction(c.rule, m[j] / bc1, v[j] / bc2);
                data[j] = data[j] * decay - lr_t * dir;
            }
        }
        self.update_ema(params);
        Ok(())
    }

    /// `ema ← r·ema + (1 − r)·param`.
    pub fn update_ema(&mut self, params: &[Tensor<T>]) {
        let r: T = cast(self.config.ema_ratio);
        let keep = T::one() - r;
        for (e, p) in self.ema.iter_mut().zip(params) {
            for (ev, &pv) in e.iter_mut().zip(p.data()) {
                *ev = r * *ev + keep * pv;
            }
        }
    }
}
