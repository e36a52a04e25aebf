use super::{TrainConfig, TrainError};
use crate::params::{Gradients, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay applied before the moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Updates every parameter. Parameters without a gradient are treated as
    /// having a zero gradient (they still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<(), TrainError> {
        if let Some(id) = grads.first_non_finite() {
            return Err(TrainError::NonFiniteGradient(store.get(id).name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (k, e) in store.entries_mut().enumerate() {
            let g = grads.0.get(k).and_then(|g| g.as_deref());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..e.data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                e.data[i] -= lr * weight_decay * e.data[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                e.data[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `lr_init / W` at epoch 0 to `lr_init` at epoch `W`,
/// then cosine decay reaching `lr_final` at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (w, e_last) = (cfg.warmup_epochs, cfg.epochs.saturating_sub(1));
    if epoch < w {
        let start = cfg.lr_init / w as f64;
        return start + (cfg.lr_init - start) * epoch as f64 / w as f64;
    }
    if e_last <= w {
        return if epoch >= e_last { cfg.lr_final } else { cfg.lr_init };
    }
    let phase = (epoch.min(e_last) - w) as f64 / (e_last - w) as f64;
    let weight = 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
    weight * cfg.lr_init + (1.0 - weight) * cfg.lr_final
}
