//! Point cloud → serialized token sequence.
//!
//! Farthest point sampling picks `L` group centers, each center gathers its
//! `K` nearest neighbours as a centered patch, a shared point MLP with
//! max-pooling embeds each patch, and the groups are reordered along a
//! space-filling traversal of their centers.

use std::cmp::Ordering;

use thiserror::Error;

use crate::data::{dist2, Point};
use crate::layers::Linear;
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot pick {requested} {what} from a cloud of {available} points")]
    TooFew { what: &'static str, requested: usize, available: usize },
    #[error("start index {0} out of range for {1} points")]
    Start(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Greedy max-min sampling. The first center is `start`; each next center
/// maximizes its distance to the chosen set, ties to the lowest index.
pub fn farthest_point_sample(points: &[Point], count: usize, start: usize) -> Result<Vec<usize>, TokenizerError> {
    let n = points.len();
    if count > n {
        return Err(TokenizerError::TooFew { what: "centers", requested: count, available: n });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(TokenizerError::Start(start, n));
    }
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..count {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

/// For each center, its `k` nearest points (ties by index) relative to the
/// center. Returns a flat `[L, K, 3]` buffer.
pub fn knn_group(points: &[Point], centers: &[usize], k: usize) -> Result<Vec<f64>, TokenizerError> {
    let n = points.len();
    if k > n {
        return Err(TokenizerError::TooFew { what: "neighbours", requested: k, available: n });
    }
    let mut out = Vec::with_capacity(centers.len() * k * 3);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &ci in centers {
        let c = points[ci];
        keyed.clear();
        keyed.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, &c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            keyed.select_nth_unstable_by(k, cmp);
        }
        let nearest = &mut keyed[..k];
        nearest.sort_by(cmp);
        for &(_, i) in nearest.iter() {
            let p = points[i];
            out.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum SerializeStrategy {
    #[serde(rename = "axis-lex")]
    AxisLex,
    #[default]
    #[serde(rename = "zorder")]
    ZOrder,
}

impl SerializeStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "axis-lex" | "axis_lex" => Some(Self::AxisLex),
            "zorder" | "z-order" => Some(Self::ZOrder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AxisLex => "axis-lex",
            Self::ZOrder => "zorder",
        }
    }
}

const MORTON_BITS: u32 = 10;

/// Maps a coordinate in [-1, 1] onto a 10-bit grid cell.
pub fn quantize_axis(v: f64) -> u32 {
    let max = (1u32 << MORTON_BITS) - 1;
    let t = ((v + 1.0) * 0.5 * (max as f64 + 1.0)).floor();
    if t.is_nan() {
        0
    } else {
        t.clamp(0.0, max as f64) as u32
    }
}

fn spread_bits(v: u32) -> u64 {
    let mut x = u64::from(v) & 0x3ff;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    x = (x | (x << 2)) & 0x0924_9249;
    x
}

/// 30-bit Morton code with x in the lowest bit of each triple.
pub fn morton_code(p: &Point) -> u64 {
    spread_bits(quantize_axis(p[0]))
        | (spread_bits(quantize_axis(p[1])) << 1)
        | (spread_bits(quantize_axis(p[2])) << 2)
}

/// Traversal order of the centers; always a permutation of `0..len`.
pub fn serialize_order(centers: &[Point], strategy: SerializeStrategy) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..centers.len()).collect();
    match strategy {
        SerializeStrategy::AxisLex => idx.sort_by(|&a, &b| {
            let (p, q) = (centers[a], centers[b]);
            p[0].total_cmp(&q[0])
                .then(p[1].total_cmp(&q[1]))
                .then(p[2].total_cmp(&q[2]))
                .then(a.cmp(&b))
        }),
        SerializeStrategy::ZOrder => {
            let codes: Vec<u64> = centers.iter().map(morton_code).collect();
            idx.sort_by(|&a, &b| match codes[a].cmp(&codes[b]) {
                Ordering::Equal => a.cmp(&b),
                o => o,
            });
        }
    }
    idx
}

/// Patch embedding: shared point MLP `3 → D/2 → D`, max over the patch,
/// plus a linear embedding of the group center.
#[derive(Debug, Clone, Copy)]
pub struct GroupEmbedding {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub pos: Linear,
    pub width: usize,
}

impl GroupEmbedding {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut Rng) -> Self {
        let hidden = (width / 2).max(1);
        Self {
            mlp1: Linear::new(store, &format!("{prefix}.mlp1"), 3, hidden, true, rng),
            mlp2: Linear::new(store, &format!("{prefix}.mlp2"), hidden, width, true, rng),
            pos: Linear::new(store, &format!("{prefix}.pos"), 3, width, true, rng),
            width,
        }
    }

    /// `patches`: flat `[L, K, 3]`. Returns `[L, D]`.
    pub fn embed_groups(&self, bind: &Binding, patches: &[f64], groups: usize, k: usize) -> Result<Tensor, TensorError> {
        let x = Tensor::new(&[groups * k, 3], patches.to_vec())?;
        let h = self.mlp1.forward(bind, &x)?.relu();
        let h = self.mlp2.forward(bind, &h)?;
        h.reshape(&[groups, k, self.width])?.max_axis(1)
    }

    pub fn embed_centers(&self, bind: &Binding, centers: &[Point]) -> Result<Tensor, TensorError> {
        let flat: Vec<f64> = centers.iter().flat_map(|c| c.iter().copied()).collect();
        self.pos.forward(bind, &Tensor::new(&[centers.len(), 3], flat)?)
    }
}

/// Token features in serialized order, with the group center of each token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub features: Tensor,
    pub centers: Vec<Point>,
    /// `order[i]` is the FPS group placed at token position `i`.
    pub order: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn with_features(&self, features: Tensor) -> Self {
        Self { features, centers: self.centers.clone(), order: self.order.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    pub groups: usize,
    pub neighbors: usize,
    pub strategy: SerializeStrategy,
}

#[derive(Debug, Clone, Copy)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub embedding: GroupEmbedding,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, config: TokenizerConfig, width: usize, rng: &mut Rng) -> Self {
        Self { config, embedding: GroupEmbedding::new(store, "tokenizer.embed", width, rng) }
    }

    /// FPS → KNN → embed → serialize.
    pub fn tokenize(&self, bind: &Binding, points: &[Point], start: usize) -> Result<TokenSequence, TokenizerError> {
        let TokenizerConfig { groups, neighbors, strategy } = self.config;
        let center_idx = farthest_point_sample(points, groups, start)?;
        let patches = knn_group(points, &center_idx, neighbors)?;
        let centers: Vec<Point> = center_idx.iter().map(|&i| points[i]).collect();
        let order = serialize_order(&centers, strategy);
        let feats = self.embedding.embed_groups(bind, &patches, groups, neighbors)?;
        let feats = feats.add(&self.embedding.embed_centers(bind, &centers)?)?;
        let features = feats.gather(&order)?;
        let centers = order.iter().map(|&i| centers[i]).collect();
        Ok(TokenSequence { features, centers, order })
    }
}
