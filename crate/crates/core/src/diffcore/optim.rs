use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::{Error, Result};

/// AdamW state for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Parameter groups whose layer index is below this are left untouched.
    pub frozen_layers: usize,
}

impl OptState {
    pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
    pub const DEFAULT_EPS: f64 = 1e-8;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

    /// State for parameter groups of the given lengths.
    pub fn new(group_lens: &[usize], base_lr: f64) -> Self {
        Self {
            m: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            base_lr,
            weight_decay: Self::DEFAULT_WEIGHT_DECAY,
            betas: Self::DEFAULT_BETAS,
            eps: Self::DEFAULT_EPS,
            frozen_layers: 0,
        }
    }

    pub fn for_params(params: &ParamSet, base_lr: f64) -> Self {
        let lens: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
        Self::new(&lens, base_lr)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One decoupled-weight-decay Adam step over tagged groups. The tag is the
    /// layer index reported when a gradient is not finite. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step_groups(&mut self, params: &mut [(usize, &mut [f64])], grads: &[(usize, &[f64])], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} groups, got {} parameter and {} gradient groups",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, ((_, p), (layer, g))) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[k].len() {
                return Err(Error::dim(format!("group {k} length mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: *layer });
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for (k, ((layer, p), (_, g))) in params.iter_mut().zip(grads).enumerate() {
            if *layer < self.frozen_layers {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * shrink - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// AdamW update of an MLP parameter set.
pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, opt: &mut OptState, lr: f64) -> Result<()> {
    let g = grads.groups();
    let mut p = params.groups_mut();
    opt.step_groups(&mut p, &g, lr)
}

/// Cosine annealing from `base_lr` at epoch 0 down to 0 at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::arg("total_epochs must be positive"));
    }
    if epoch > total_epochs {
        return Err(Error::arg(format!("epoch {epoch} beyond total {total_epochs}")));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
