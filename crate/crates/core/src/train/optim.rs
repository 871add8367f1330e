//! AdamW with decoupled weight decay, linear warmup and global-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use super::TrainConfig;
use crate::model::{ModelState, OptimizerMoments};
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Learning rate for the update numbered `step` (0-based): linear warmup
/// over `warmup_steps`, then constant.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// L2 norm over every parameter gradient present in `grads`.
pub fn global_grad_norm(state: &ModelState, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for var in state.vars().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

impl AdamW {
    pub fn new(state: &ModelState) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (name, var) in state.vars() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            step: 0,
            v: m.clone(),
            m,
        })
    }

    /// Restores moments saved with [`AdamW::moments`].
    pub fn from_moments(state: &ModelState, saved: OptimizerMoments) -> Result<Self> {
        let OptimizerMoments { step, mut m, mut v } = saved;
        let (mut mm, mut vv) = (BTreeMap::new(), BTreeMap::new());
        for (name, var) in state.vars() {
            let (Some(a), Some(b)) = (m.remove(name), v.remove(name)) else {
                return Err(Error::Checkpoint(format!("no optimizer moments for {name}")));
            };
            if a.dims() != var.dims() || b.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            mm.insert(name.clone(), a.to_dtype(state.dtype())?);
            vv.insert(name.clone(), b.to_dtype(state.dtype())?);
        }
        Ok(Self {
            step,
            m: mm,
            v: vv,
        })
    }

    pub fn moments(&self) -> OptimizerMoments {
        OptimizerMoments {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update with gradients multiplied by `grad_scale`.
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        state: &ModelState,
        grads: &GradStore,
        grad_scale: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let lr = learning_rate(cfg, self.step);
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (name, var) in state.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach().affine(grad_scale, 0.0)?;
            let m = (self.m[name].affine(BETA1, 0.0)? + g.affine(1.0 - BETA1, 0.0)?)?;
            let v = (self.v[name].affine(BETA2, 0.0)? + g.sqr()?.affine(1.0 - BETA2, 0.0)?)?;
            let update = m
                .affine(1.0 / bc1, 0.0)?
                .div(&(v.affine(1.0 / bc2, 0.0)?.sqrt()? + EPS)?)?;
            let p = var.as_tensor().detach();
            let decayed = if p.rank() >= 2 && cfg.weight_decay > 0.0 {
                p.affine(1.0 - lr * cfg.weight_decay, 0.0)?
            } else {
                p
            };
            var.set(&(decayed - update.affine(lr, 0.0)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| learning_rate(&cfg, s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }
}
