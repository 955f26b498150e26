//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! Parameters are visited in the catalog's sorted-name order, so a given
//! sequence of gradients produces bit-identical updates across runs. Decay
//! applies only to genuine weight matrices (every dimension > 1): biases,
//! norm gains, and the temperature are adapted but never shrunk toward zero.

use std::collections::BTreeMap;

use crate::encoders::Params;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    /// Global L2-norm ceiling on the full gradient; None disables clipping.
    pub clip_norm: Option<T>,
}

impl<T: Real> AdamWConfig<T> {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.98),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(0.01),
            clip_norm: Some(T::ONE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr.to_f64() > 0.0, "lr must be positive"),
            ((0.0..1.0).contains(&self.beta1.to_f64()), "beta1 outside [0, 1)"),
            ((0.0..1.0).contains(&self.beta2.to_f64()), "beta2 outside [0, 1)"),
            (self.eps.to_f64() > 0.0, "eps must be positive"),
            (self.weight_decay.to_f64() >= 0.0, "weight_decay must be non-negative"),
            (
                self.clip_norm.map_or(true, |c| c.to_f64() > 0.0),
                "clip_norm must be positive",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Param { op: "adamw", message: msg.into() });
            }
        }
        Ok(())
    }
}

/// Diagnostics from one step: the pre-clip gradient norm and the factor the
/// gradients were multiplied by (1 when no clipping happened).
#[derive(Debug, Clone, Copy)]
pub struct StepStats<T: Real> {
    pub grad_norm: T,
    pub clip_factor: T,
}

pub struct AdamW<T: Real> {
    cfg: AdamWConfig<T>,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

fn decays(shape: &[usize]) -> bool {
    shape.iter().all(|&d| d > 1)
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn config(&self) -> &AdamWConfig<T> {
        &self.cfg
    }

    /// Steps counted so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients stored on `params`. Tensors
    /// without a gradient are left untouched (their moments do not advance).
    /// Gradients are not cleared; the caller owns that.
    pub fn step(&mut self, params: &mut Params<T>) -> Result<StepStats<T>> {
        let mut sq = 0.0f64;
        for (name, p) in params.iter() {
            if let Some(g) = &p.grad {
                for &x in g {
                    let xf = x.to_f64();
                    if !xf.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient in {name} at optimizer step {}",
                            self.t + 1
                        )));
                    }
                    sq += xf * xf;
                }
            }
        }
        let norm = sq.sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c.to_f64() => c.to_f64() / norm,
            _ => 1.0,
        };

        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.to_f64().powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.to_f64().powi(self.t as i32);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let lr = self.cfg.lr.to_f64();
        let eps = self.cfg.eps;

        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad.clone() else { continue };
            let wd = if decays(p.shape()) { self.cfg.weight_decay.to_f64() } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::ZERO; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::ZERO; g.len()]);
            if m.len() != g.len() {
                return Err(Error::Shape {
                    op: "adamw",
                    lhs: vec![m.len()],
                    rhs: vec![g.len()],
                });
            }
            let data = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i] * T::from_f64(clip);
                m[i] = b1 * m[i] + (T::ONE - b1) * gi;
                v[i] = b2 * v[i] + (T::ONE - b2) * gi * gi;
                let mhat = m[i].to_f64() / bc1;
                let vhat = v[i].to_f64() / bc2;
                let adaptive = mhat / (vhat.sqrt() + eps.to_f64());
                let xi = data[i].to_f64();
                data[i] = T::from_f64(xi - lr * (adaptive + wd * xi));
            }
        }
        Ok(StepStats {
            grad_norm: T::from_f64(norm),
            clip_factor: T::from_f64(clip),
        })
    }
}
