//! Cross-domain feature aggregation with a shared global prompt.
//!
//! A sequence `f1` is fused with a same-class sequence `f2` from another
//! source domain as `Conv(MLP1(f1) ⊗ MLP2(f2))`, and the result is stacked
//! along the token axis with `f1` and a learned prompt block.

use log::warn;
use rand::Rng as _;

use crate::data::Slot;
use crate::layers::{normal_init, Linear};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Scfa,
    Sum,
    Concat,
    Off,
}

impl Aggregation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scfa" => Some(Self::Scfa),
            "sum" => Some(Self::Sum),
            "concat" => Some(Self::Concat),
            "off" => Some(Self::Off),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Scfa => "scfa",
            Self::Sum => "sum",
            Self::Concat => "concat",
            Self::Off => "off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingMode {
    Train,
    Infer,
}

/// Where a slot member's `f2` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partner {
    /// Another member of the same slot (a different source domain).
    Member(usize),
    /// The slot's same-domain fallback cloud.
    Fallback,
    /// The sample itself.
    SelfPair,
}

/// Picks the aggregation partner of `slot.members[member]`.
pub fn select_partner(slot: &Slot, member: usize, mode: PairingMode, rng: &mut Rng) -> Partner {
    if mode == PairingMode::Infer {
        return Partner::SelfPair;
    }
    let own = slot.members[member].source;
    let others: Vec<usize> = (0..slot.members.len()).filter(|&j| slot.members[j].source != own).collect();
    if !others.is_empty() {
        return Partner::Member(others[rng.random_range(0..others.len())]);
    }
    warn!("class {} has no cross-domain partner; pairing within the same domain", slot.class_id);
    if slot.fallback_partner.is_some() {
        Partner::Fallback
    } else {
        Partner::SelfPair
    }
}

/// Two-layer tokenwise MLP `D → D → D` with relu.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), width, width, true, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), width, width, true, rng),
        }
    }

    pub fn forward(&self, bind: &Binding, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(bind, &self.fc1.forward(bind, x)?.relu())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScfaConfig {
    pub aggregation: Aggregation,
    /// Include the cross-domain block `f′`.
    pub cross_domain: bool,
    /// Include the global prompt block.
    pub prompt: bool,
    pub conv_kernel: usize,
    pub tokens: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Scfa {
    pub config: ScfaConfig,
    pub mlp1: Option<Mlp>,
    pub mlp2: Option<Mlp>,
    pub conv_weight: Option<ParamId>,
    pub conv_bias: Option<ParamId>,
    pub concat_proj: Option<Linear>,
    pub global_prompt: Option<ParamId>,
}

impl Scfa {
    pub fn new(store: &mut ParamStore, config: ScfaConfig, rng: &mut Rng) -> Result<Self> {
        let ScfaConfig { aggregation, cross_domain, prompt, conv_kernel, tokens, width } = config;
        if conv_kernel % 2 == 0 {
            return Err(TensorError::Argument(format!("conv kernel must be odd, got {conv_kernel}")));
        }
        let fused = cross_domain && aggregation != Aggregation::Off;
        let eq3 = fused && aggregation == Aggregation::Scfa;
        let mut s = Self {
            config,
            mlp1: None,
            mlp2: None,
            conv_weight: None,
            conv_bias: None,
            concat_proj: None,
            global_prompt: None,
        };
        if eq3 {
            s.mlp1 = Some(Mlp::new(store, "scfa.mlp1", width, rng));
            s.mlp2 = Some(Mlp::new(store, "scfa.mlp2", width, rng));
            let fan_in = (conv_kernel * width) as f64;
            s.conv_weight = Some(store.add(
                "scfa.conv.weight",
                &[conv_kernel, width, width],
                normal_init(conv_kernel * width * width, 1.0 / fan_in.sqrt(), rng),
            ));
            s.conv_bias = Some(store.add("scfa.conv.bias", &[width], vec![0.0; width]));
        }
        if fused && aggregation == Aggregation::Concat {
            s.concat_proj = Some(Linear::new(store, "scfa.concat_proj", 2 * width, width, true, rng));
        }
        if prompt && aggregation != Aggregation::Off {
            s.global_prompt =
                Some(store.add("scfa.global_prompt", &[tokens, width], normal_init(tokens * width, 0.02, rng)));
        }
        Ok(s)
    }

    /// Number of `L`-token blocks in the assembled sequence.
    pub fn blocks(&self) -> usize {
        1 + usize::from(self.fuses()) + usize::from(self.global_prompt.is_some())
    }

    /// Whether a partner sequence is consumed.
    pub fn fuses(&self) -> bool {
        self.config.cross_domain && self.config.aggregation != Aggregation::Off
    }

    /// `f′` from `f1` and `f2`, both `[L, D]`.
    pub fn aggregate(&self, bind: &Binding, f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
        if f1.shape() != f2.shape() {
            return Err(TensorError::Shape {
                op: "aggregate",
                msg: format!("{:?} vs {:?}", f1.shape(), f2.shape()),
            });
        }
        match self.config.aggregation {
            Aggregation::Scfa => {
                let (m1, m2) = (self.mlp1.expect("mlp1"), self.mlp2.expect("mlp2"));
                let prod = m1.forward(bind, f1)?.mul(&m2.forward(bind, f2)?)?;
                prod.conv1d(&bind.get(self.conv_weight.expect("conv")))?
                    .add(&bind.get(self.conv_bias.expect("conv bias")))
            }
            Aggregation::Sum => f1.add(f2),
            Aggregation::Concat => {
                self.concat_proj.expect("concat projection").forward(bind, &Tensor::concat(&[f1, f2], 1)?)
            }
            Aggregation::Off => Err(TensorError::Argument("aggregation is disabled".into())),
        }
    }

    pub fn prompt(&self, bind: &Binding) -> Option<Tensor> {
        self.global_prompt.map(|id| bind.get(id))
    }
}

/// `Concat(f1, f′, f_g)` along tokens, skipping absent blocks.
pub fn assemble_sequence(f1: &Tensor, f_prime: Option<&Tensor>, f_g: Option<&Tensor>) -> Result<Tensor> {
    let mut parts = vec![f1];
    parts.extend(f_prime);
    parts.extend(f_g);
    if let Some(bad) = parts.iter().find(|p| p.shape() != f1.shape()) {
        return Err(TensorError::Shape {
            op: "assemble_sequence",
            msg: format!("block {:?} differs from {:?}", bad.shape(), f1.shape()),
        });
    }
    Tensor::concat(&parts, 0)
}
