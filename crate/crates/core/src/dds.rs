//! Traversal orders over the assembled block sequence and the two-pass scan.
//!
//! With `k` blocks of `L` tokens, the intra-domain order visits blocks one
//! after another and the cross-domain order interleaves them position-wise:
//! `perm[k·t + j] = j·L + t`.

use rand::seq::SliceRandom;

use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::ssm::{check_permutation, MambaBlock};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderKind {
    Ids,
    Cds,
    Forward,
    Backward,
    Shuffle,
    Composed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub perm: Vec<usize>,
    pub kind: OrderKind,
}

impl ScanOrder {
    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        check_permutation(&self.perm, self.perm.len()).is_ok()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Visiting `self` over a sequence already rearranged by `inner`.
    pub fn compose(&self, inner: &ScanOrder) -> ScanOrder {
        ScanOrder { perm: self.perm.iter().map(|&i| inner.perm[i]).collect(), kind: OrderKind::Composed }
    }
}

/// Blocks in sequence: the identity over `blocks·L` tokens.
pub fn ids_order_k(l: usize, blocks: usize) -> ScanOrder {
    ScanOrder { perm: (0..l * blocks).collect(), kind: OrderKind::Ids }
}

/// Position `t` of every block before position `t + 1` of any block.
pub fn cds_order_k(l: usize, blocks: usize) -> ScanOrder {
    let perm = (0..l).flat_map(|t| (0..blocks).map(move |j| j * l + t)).collect();
    ScanOrder { perm, kind: OrderKind::Cds }
}

pub fn ids_order(l: usize) -> ScanOrder {
    ids_order_k(l, 3)
}

pub fn cds_order(l: usize) -> ScanOrder {
    cds_order_k(l, 3)
}

/// Scan strategy over the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanStrategy {
    #[default]
    Dds,
    Forward,
    Backward,
    Shuffle,
    /// No scan passes over the fused sequence.
    Off,
}

impl ScanStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dds" => Some(Self::Dds),
            "forward" => Some(Self::Forward),
            "backward" => Some(Self::Backward),
            "shuffle" => Some(Self::Shuffle),
            "off" => Some(Self::Off),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dds => "dds",
            Self::Forward => "forward",
            Self::Backward => "backward",
            Self::Shuffle => "shuffle",
            Self::Off => "off",
        }
    }
}

/// Forward, reversed, or a seeded Fisher-Yates shuffle over `len` tokens.
pub fn baseline_order(kind: ScanStrategy, len: usize, rng: &mut Rng) -> Result<ScanOrder> {
    let mut perm: Vec<usize> = (0..len).collect();
    let kind = match kind {
        ScanStrategy::Forward => OrderKind::Forward,
        ScanStrategy::Backward => {
            perm.reverse();
            OrderKind::Backward
        }
        ScanStrategy::Shuffle => {
            perm.shuffle(rng);
            OrderKind::Shuffle
        }
        ScanStrategy::Dds | ScanStrategy::Off => {
            return Err(TensorError::Argument(format!("{} is not a baseline order", kind.name())))
        }
    };
    Ok(ScanOrder { perm, kind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DdsConfig {
    pub strategy: ScanStrategy,
    pub ids: bool,
    pub cds: bool,
    /// One pass over the composed permutation instead of two passes.
    pub composed: bool,
}

impl Default for DdsConfig {
    fn default() -> Self {
        Self { strategy: ScanStrategy::Dds, ids: true, cds: true, composed: false }
    }
}

/// Two scan blocks, `dds.ids` and `dds.cds`.
#[derive(Debug, Clone)]
pub struct DualScan {
    pub config: DdsConfig,
    pub ids_block: MambaBlock,
    pub cds_block: MambaBlock,
}

impl DualScan {
    pub fn new(store: &mut ParamStore, config: DdsConfig, width: usize, state: usize, rng: &mut Rng) -> Self {
        Self {
            config,
            ids_block: MambaBlock::new(store, "dds.ids", width, state, rng),
            cds_block: MambaBlock::new(store, "dds.cds", width, state, rng),
        }
    }

    /// The `(block, order)` passes applied to a sequence of `blocks` blocks
    /// of `l` tokens. `rng` feeds the shuffle baseline.
    pub fn passes(&self, l: usize, blocks: usize, rng: &mut Rng) -> Result<Vec<(&MambaBlock, ScanOrder)>> {
        let c = self.config;
        if c.strategy == ScanStrategy::Off {
            return Ok(Vec::new());
        }
        if c.strategy != ScanStrategy::Dds {
            let first = baseline_order(c.strategy, l * blocks, rng)?;
            let second = baseline_order(c.strategy, l * blocks, rng)?;
            return Ok(vec![(&self.ids_block, first), (&self.cds_block, second)]);
        }
        let (ids, cds) = (ids_order_k(l, blocks), cds_order_k(l, blocks));
        Ok(match (c.ids, c.cds, c.composed) {
            (true, true, true) => vec![(&self.cds_block, cds.compose(&ids))],
            (true, true, false) => vec![(&self.ids_block, ids), (&self.cds_block, cds)],
            (true, false, _) => vec![(&self.ids_block, ids)],
            (false, true, _) => vec![(&self.cds_block, cds)],
            (false, false, _) => Vec::new(),
        })
    }

    /// Applies the passes to `f: [blocks·L, D]`; outputs stay at canonical
    /// token positions.
    pub fn forward(&self, bind: &Binding, f: &Tensor, blocks: usize, rng: &mut Rng) -> Result<Tensor> {
        let n = f.shape()[0];
        if blocks == 0 || n % blocks != 0 {
            return Err(TensorError::Argument(format!("sequence of {n} tokens does not split into {blocks} blocks")));
        }
        self.passes(n / blocks, blocks, rng)?
            .into_iter()
            .try_fold(f.clone(), |h, (blk, order)| blk.forward(bind, &h, &order.perm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Rng};
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(ids_order(2).perm, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ids_order(1).perm, vec![0, 1, 2]);
        assert_eq!(cds_order(2).perm, vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(cds_order(1).perm, vec![0, 1, 2]);
        assert_eq!(cds_order_k(3, 2).perm, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn cds_formula_exhaustive() {
        for l in 1..=256 {
            let p = cds_order(l);
            assert!(p.is_bijection());
            assert!(ids_order(l).is_bijection());
            for t in 0..l {
                for j in 0..3 {
                    assert_eq!(p.perm[3 * t + j], j * l + t);
                }
            }
        }
    }

    #[test]
    fn composition_inverts() {
        let (i, c) = (ids_order(5), cds_order(5));
        let comp = c.compose(&i);
        assert!(comp.is_bijection());
        let inv = comp.inverse();
        let restored: Vec<usize> = (0..15).map(|k| comp.perm[inv[k]]).collect();
        assert_eq!(restored, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn baselines() {
        let mut r = stream(1, &[]);
        assert_eq!(baseline_order(ScanStrategy::Backward, 4, &mut r).unwrap().perm, vec![3, 2, 1, 0]);
        assert_eq!(baseline_order(ScanStrategy::Forward, 4, &mut r).unwrap().perm, vec![0, 1, 2, 3]);
        let a = baseline_order(ScanStrategy::Shuffle, 30, &mut stream(2, &[])).unwrap();
        let b = baseline_order(ScanStrategy::Shuffle, 30, &mut stream(2, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a.is_bijection());
    }

    fn identity_dynamics(store: &mut ParamStore, blk: &MambaBlock) {
        store.get_mut(blk.out_proj.weight).data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(blk.out_proj.bias.unwrap()).data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn identity_dynamics_leave_values_to_the_norms() {
        let mut store = ParamStore::new();
        let dual = DualScan::new(&mut store, DdsConfig::default(), 4, 2, &mut stream(3, &[]));
        identity_dynamics(&mut store, &dual.ids_block);
        identity_dynamics(&mut store, &dual.cds_block);
        let f = Tensor::new(&[6, 4], (0..24).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let out = dual.forward(&Binding::frozen(&store), &f, 3, &mut stream(0, &[])).unwrap();
        let ln = |t: &Tensor| t.layernorm(crate::layers::LN_EPS).unwrap();
        let expect = ln(&ln(&f));
        assert_eq!(out.shape(), f.shape());
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_uneven_blocks() {
        let mut store = ParamStore::new();
        let dual = DualScan::new(&mut store, DdsConfig::default(), 2, 2, &mut stream(3, &[]));
        assert!(dual.forward(&Binding::frozen(&store), &Tensor::zeros(&[7, 2]), 3, &mut stream(0, &[])).is_err());
    }

    #[test]
    fn two_passes_gradcheck() {
        let mut store = ParamStore::new();
        let dual = DualScan::new(&mut store, DdsConfig::default(), 3, 2, &mut stream(4, &[]));
        let bind = Binding::frozen(&store);
        let f = Tensor::new(&[6, 3], (0..18).map(|v| (v as f64 * 0.61).cos()).collect()).unwrap();
        let w = Tensor::new(&[6, 3], (0..18).map(|v| (v as f64 * 1.3).sin()).collect()).unwrap();
        let report = finite_difference_check(
            |p| Ok(dual.forward(&bind, p, 3, &mut stream(0, &[]))?.mul(&w)?.sum_all()),
            &f,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn pass_selection() {
        let mut store = ParamStore::new();
        let mut dual = DualScan::new(&mut store, DdsConfig::default(), 2, 2, &mut stream(5, &[]));
        let mut r = stream(0, &[]);
        let kinds = |d: &DualScan, r: &mut Rng| d.passes(2, 3, r).unwrap().iter().map(|p| p.1.kind).collect::<Vec<_>>();
        assert_eq!(kinds(&dual, &mut r), vec![OrderKind::Ids, OrderKind::Cds]);
        dual.config.composed = true;
        assert_eq!(kinds(&dual, &mut r), vec![OrderKind::Composed]);
        dual.config = DdsConfig { cds: false, ..DdsConfig::default() };
        assert_eq!(kinds(&dual, &mut r), vec![OrderKind::Ids]);
        dual.config = DdsConfig { strategy: ScanStrategy::Backward, ..DdsConfig::default() };
        assert_eq!(kinds(&dual, &mut r), vec![OrderKind::Backward, OrderKind::Backward]);
    }

    proptest! {
        #[test]
        fn orders_are_bijections(l in 1usize..300, blocks in 1usize..5, seed in 0u64..1000) {
            prop_assert!(ids_order_k(l, blocks).is_bijection());
            prop_assert!(cds_order_k(l, blocks).is_bijection());
            let s = baseline_order(ScanStrategy::Shuffle, l * blocks, &mut stream(seed, &[])).unwrap();
            prop_assert!(s.is_bijection());
        }
    }
}
