//! Small parameterised building blocks shared by the network modules.

use rand_distr::{Distribution, Normal};

use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

/// Normal(0, std²) values.
pub fn normal_init(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("non-negative std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_std(store, prefix, fan_in, fan_out, bias, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{prefix}.weight"), &[fan_in, fan_out], normal_init(fan_in * fan_out, std, rng));
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), &[fan_out], vec![0.0; fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&bind.get(self.weight))?;
        match self.bias {
            Some(b) => y.add(&bind.get(b)),
            None => Ok(y),
        }
    }
}

/// Row-wise layer normalisation with learnable gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), &[width], vec![1.0; width]),
            beta: store.add(format!("{prefix}.beta"), &[width], vec![0.0; width]),
        }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        x.layernorm(LN_EPS)?.mul(&bind.get(self.gamma))?.add(&bind.get(self.beta))
    }
}
