//! Learned token masking with a two-way Gumbel-Softmax relaxation.
//!
//! Each token is projected to keep/drop logits; the keep component of a
//! Gumbel-perturbed, temperature-scaled softmax multiplies the token.

use rand::Rng as _;

use crate::layers::Linear;
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

pub const PROB_FLOOR: f64 = 1e-8;
pub const TAU_START: f64 = 5.0;
pub const TAU_END: f64 = 0.5;

/// Which mask the pipeline applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    #[default]
    Gumbel,
    Random,
    Similarity,
    Off,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gumbel" => Some(Self::Gumbel),
            "random" => Some(Self::Random),
            "similarity" => Some(Self::Similarity),
            "off" => Some(Self::Off),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gumbel => "gumbel",
            Self::Random => "random",
            Self::Similarity => "similarity",
            Self::Off => "off",
        }
    }
}

/// Keep probabilities, noise and resulting soft mask for one sequence.
#[derive(Debug, Clone)]
pub struct MaskVector {
    /// `[L, 1]` keep weights.
    pub m: Tensor,
    /// `[L, 2]` (drop, keep) probabilities, when the mask is learned.
    pub p: Option<Tensor>,
    /// `[L, 2]` Gumbel noise; all zeros when sampling was disabled.
    pub g: Vec<f64>,
    pub tau: f64,
}

impl MaskVector {
    /// A fixed 0/1 (or any constant) mask without gradient.
    pub fn constant(values: Vec<f64>) -> Self {
        let l = values.len();
        Self { m: Tensor::new(&[l, 1], values).expect("column"), p: None, g: vec![0.0; 2 * l], tau: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> f64 {
        let v = self.m.data();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// `D → 2` projection producing per-token (drop, keep) logits.
#[derive(Debug, Clone, Copy)]
pub struct MaskPredictor {
    pub proj: Linear,
}

impl MaskPredictor {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut Rng) -> Self {
        Self { proj: Linear::new(store, "msd.proj", width, 2, true, rng) }
    }

    /// `[L, D]` → `[L, 2]`, rows summing to one, clamped away from 0 and 1.
    pub fn predict_mask_probs(&self, bind: &Binding, seq: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(bind, seq)?.softmax(1)?.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }
}

/// Standard Gumbel draws `−log(−log u)`.
pub fn sample_gumbel(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Argument(format!("temperature must be positive, got {tau}")))
    }
}

/// Relaxed mask `softmax((log p + g)/τ)[:, 1]` for explicit noise `g`.
pub fn relaxed_mask(p: &Tensor, g: &[f64], tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    if p.rank() != 2 || p.shape()[1] != 2 || g.len() != p.numel() {
        return Err(TensorError::Shape {
            op: "gumbel_softmax",
            msg: format!("p {:?} with {} noise values", p.shape(), g.len()),
        });
    }
    let noise = Tensor::new(p.shape(), g.to_vec())?;
    let y = p.log().add(&noise)?.scale(1.0 / tau).softmax(1)?;
    y.slice(1, 1, 2)
}

/// Samples Gumbel noise when `rng` is given; otherwise the noiseless
/// (evaluation) mask.
pub fn gumbel_softmax_mask(p: &Tensor, tau: f64, rng: Option<&mut Rng>) -> Result<MaskVector> {
    check_tau(tau)?;
    let g = match rng {
        Some(r) => sample_gumbel(p.numel(), r),
        None => vec![0.0; p.numel()],
    };
    let m = relaxed_mask(p, &g, tau)?;
    Ok(MaskVector { m, p: Some(p.clone()), g, tau })
}

/// `f ⊗ m`, one weight per token broadcast over channels.
pub fn apply_mask(seq: &Tensor, mask: &MaskVector) -> Result<Tensor> {
    if seq.rank() != 2 || seq.shape()[0] != mask.len() {
        return Err(TensorError::Shape {
            op: "apply_mask",
            msg: format!("sequence {:?} vs mask of length {}", seq.shape(), mask.len()),
        });
    }
    seq.mul(&mask.m)
}

/// Zeroes `round(5%·L)` distinct random tokens.
pub fn random_mask(len: usize, rng: &mut Rng) -> MaskVector {
    let drop = (0.05 * len as f64).round() as usize;
    let mut m = vec![1.0; len];
    for i in rand::seq::index::sample(rng, len, drop) {
        m[i] = 0.0;
    }
    MaskVector::constant(m)
}

/// Keeps the `round(80%·L)` tokens whose summed cosine similarity to the
/// reference tokens is largest; ties go to the lower index.
pub fn similarity_mask(seq: &[f64], width: usize, reference: Option<&[f64]>) -> Result<MaskVector> {
    let reference =
        reference.ok_or_else(|| TensorError::Argument("similarity mask needs reference features".into()))?;
    if width == 0 || seq.len() % width != 0 || reference.len() % width != 0 {
        return Err(TensorError::Shape { op: "similarity_mask", msg: format!("width {width} does not divide inputs") });
    }
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
    };
    let refs: Vec<Vec<f64>> = reference.chunks(width).map(unit).collect();
    let scores: Vec<f64> = seq
        .chunks(width)
        .map(|tok| {
            let t = unit(tok);
            refs.iter().map(|r| crate::tensor::dot(&t, r)).sum()
        })
        .collect();
    let len = scores.len();
    let keep = (0.8 * len as f64).round() as usize;
    let mut idx: Vec<usize> = (0..len).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut m = vec![0.0; len];
    for &i in &idx[..keep] {
        m[i] = 1.0;
    }
    Ok(MaskVector::constant(m))
}

/// Linear anneal from `start` to `end` over the first half of training,
/// constant afterwards.
pub fn tau_at(epoch: usize, epochs: usize, start: f64, end: f64) -> f64 {
    let half = (epochs / 2).max(1);
    if epoch >= half {
        end
    } else {
        start + (end - start) * epoch as f64 / half as f64
    }
}
