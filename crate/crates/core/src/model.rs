//! The full classifier: tokenizer, staged backbone, the three plug-in
//! modules at configurable insertion positions, and a linear head.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::Point;
use crate::dds::{DdsConfig, DualScan, ScanStrategy};
use crate::layers::Linear;
use crate::msd::{self, MaskPredictor, MaskStrategy, MaskVector};
use crate::params::{Binding, ParamStore};
use crate::rng::{stream, tag, Rng};
use crate::scfa::{assemble_sequence, Aggregation, Scfa, ScfaConfig};
use crate::ssm::{Backbone, Scale, StageConfig};
use crate::tensor::{Tensor, TensorError};
use crate::tokenizer::{SerializeStrategy, Tokenizer, TokenizerConfig, TokenizerError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const CONFIG_TENSOR: &str = "meta.model_config";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stages: StageConfig,
    pub tokenizer: TokenizerConfig,
    pub num_classes: usize,
    pub msd: MaskStrategy,
    pub aggregation: Aggregation,
    pub cross_domain: bool,
    pub prompt: bool,
    pub scan: ScanStrategy,
    pub ids: bool,
    pub cds: bool,
    pub composed_scan: bool,
    /// Insertion positions: `p` means "after the first `p` stages".
    pub msd_position: usize,
    pub fusion_position: usize,
    pub conv_kernel: usize,
    /// Pool every token instead of only the sample's own block.
    pub pool_all: bool,
}

impl ModelConfig {
    pub fn new(scale: Scale, num_classes: usize) -> Self {
        Self {
            stages: scale.stages(),
            tokenizer: TokenizerConfig { groups: 32, neighbors: 16, strategy: SerializeStrategy::ZOrder },
            num_classes,
            msd: MaskStrategy::Gumbel,
            aggregation: Aggregation::Scfa,
            cross_domain: true,
            prompt: true,
            scan: ScanStrategy::Dds,
            ids: true,
            cds: true,
            composed_scan: false,
            msd_position: 1,
            fusion_position: 1,
            conv_kernel: 1,
            pool_all: false,
        }
    }

    /// Backbone only: no mask, no aggregation, no fused scan.
    pub fn baseline(mut self) -> Self {
        self.msd = MaskStrategy::Off;
        self.aggregation = Aggregation::Off;
        self.scan = ScanStrategy::Off;
        self
    }

    pub fn fusion_enabled(&self) -> bool {
        self.aggregation != Aggregation::Off
    }

    pub fn dds_enabled(&self) -> bool {
        self.scan != ScanStrategy::Off && (self.scan != ScanStrategy::Dds || self.ids || self.cds)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        self.stages.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        let n = self.stages.num_stages;
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.tokenizer.groups == 0 || self.tokenizer.neighbors == 0 {
            return bad("groups and neighbors must be positive".into());
        }
        for (name, pos) in [("msd_position", self.msd_position), ("fusion_position", self.fusion_position)] {
            if pos == 0 || pos > n {
                return bad(format!("{name} = {pos} outside 1..={n}"));
            }
        }
        if self.msd != MaskStrategy::Off && self.fusion_enabled() && self.msd_position > self.fusion_position {
            return bad(format!(
                "mask position {} must not come after fusion position {}",
                self.msd_position, self.fusion_position
            ));
        }
        if self.dds_enabled() && !self.fusion_enabled() {
            return bad("scanning the fused sequence requires aggregation (scan must be off when aggregation is off)".into());
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }
}

/// Train mode draws mask noise and pairs across domains; infer mode does
/// neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Clouds forwarded together. Every cloud is tokenized and run to the
/// fusion point; only `outputs` are classified, each fused with
/// `partners[i]`.
#[derive(Debug, Clone)]
pub struct GroupInput<'a> {
    pub clouds: Vec<&'a [Point]>,
    /// FPS start index per cloud.
    pub starts: Vec<usize>,
    pub outputs: Vec<usize>,
    pub partners: Vec<usize>,
}

impl<'a> GroupInput<'a> {
    /// One cloud, paired with itself.
    pub fn single(points: &'a [Point]) -> Self {
        Self { clouds: vec![points], starts: vec![0], outputs: vec![0], partners: vec![0] }
    }
}

/// What the forward pass touched, for checking train/infer asymmetry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub train: bool,
    pub mask_noise_drawn: bool,
    /// `(output cloud, cloud whose features were fused into it)`.
    pub feature_reads: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[outputs, C]`
    pub logits: Tensor,
    /// `[outputs, D]`
    pub pooled: Tensor,
    /// Mean keep weight per cloud (1.0 when no mask is applied).
    pub mask_means: Vec<f64>,
    /// Sum over classified clouds of the mean learned keep weight.
    pub mask_penalty: Option<Tensor>,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub backbone: Backbone,
    pub mask: Option<MaskPredictor>,
    pub scfa: Option<Scfa>,
    pub dds: Option<DualScan>,
    pub head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut store = ParamStore::new();
        let StageConfig { width, state, .. } = config.stages;
        let tokenizer = Tokenizer::new(&mut store, config.tokenizer, width, &mut rng);
        let backbone = Backbone::new(&mut store, config.stages, &mut rng)?;
        let mask = (config.msd == MaskStrategy::Gumbel).then(|| MaskPredictor::new(&mut store, width, &mut rng));
        let scfa = if config.fusion_enabled() {
            let sc = ScfaConfig {
                aggregation: config.aggregation,
                cross_domain: config.cross_domain,
                prompt: config.prompt,
                conv_kernel: config.conv_kernel,
                tokens: config.tokenizer.groups,
                width,
            };
            Some(Scfa::new(&mut store, sc, &mut rng)?)
        } else {
            None
        };
        let dds = config.dds_enabled().then(|| {
            let dc = DdsConfig { strategy: config.scan, ids: config.ids, cds: config.cds, composed: config.composed_scan };
            DualScan::new(&mut store, dc, width, state, &mut rng)
        });
        let head = Linear::new(&mut store, "head", width, config.num_classes, true, &mut rng);
        Ok(Self { config, store, tokenizer, backbone, mask, scfa, dds, head })
    }

    pub fn num_params(&self) -> usize {
        self.store.total_numel()
    }

    fn stages(&self, bind: &Binding, range: std::ops::Range<usize>, x: Tensor) -> Result<Tensor> {
        let mut h = x;
        for s in range {
            h = self.backbone.stage_forward(bind, s, &h)?;
        }
        Ok(h)
    }

    fn mask_cloud(
        &self,
        bind: &Binding,
        f: &Tensor,
        reference: &Tensor,
        mode: Mode,
        tau: f64,
        rng: &mut Rng,
        trace: &mut ForwardTrace,
    ) -> Result<(Tensor, MaskVector)> {
        let mask = match self.config.msd {
            MaskStrategy::Off => MaskVector::constant(vec![1.0; f.shape()[0]]),
            MaskStrategy::Gumbel => {
                let p = self.mask.expect("mask predictor").predict_mask_probs(bind, f)?;
                let noise = (mode == Mode::Train).then_some(rng);
                trace.mask_noise_drawn |= noise.is_some();
                msd::gumbel_softmax_mask(&p, tau, noise)?
            }
            MaskStrategy::Random if mode == Mode::Train => msd::random_mask(f.shape()[0], rng),
            MaskStrategy::Random => MaskVector::constant(vec![1.0; f.shape()[0]]),
            MaskStrategy::Similarity => msd::similarity_mask(f.data(), f.shape()[1], Some(reference.data()))?,
        };
        Ok((msd::apply_mask(f, &mask)?, mask))
    }

    /// Forward pass over a group. `rng` supplies mask noise and shuffle
    /// orders in train mode.
    pub fn forward_group(&self, bind: &Binding, input: &GroupInput, mode: Mode, tau: f64, rng: &mut Rng) -> Result<ForwardOutput> {
        let n = input.clouds.len();
        if input.starts.len() != n || input.partners.len() != input.outputs.len() {
            return Err(ModelError::Config("group input lists have inconsistent lengths".into()));
        }
        if input.outputs.iter().chain(&input.partners).any(|&i| i >= n) {
            return Err(ModelError::Config("group index out of range".into()));
        }
        let cfg = &self.config;
        let mut trace = ForwardTrace { train: mode == Mode::Train, ..Default::default() };
        let num_stages = cfg.stages.num_stages;
        let msd_on = cfg.msd != MaskStrategy::Off;
        let fuse = cfg.fusion_enabled();
        let msd_pos = if msd_on { cfg.msd_position } else { num_stages };
        let fuse_pos = if fuse { cfg.fusion_position } else { num_stages };
        let first_stop = msd_pos.min(fuse_pos);

        let mut feats = Vec::with_capacity(n);
        for (pts, &start) in input.clouds.iter().zip(&input.starts) {
            let seq = self.tokenizer.tokenize(bind, pts, start)?;
            feats.push(self.stages(bind, 0..first_stop, seq.features)?);
        }

        // Partner of each cloud for the similarity reference: the partner of
        // its first appearance as an output, else itself.
        let reference_of = |c: usize| {
            input.outputs.iter().position(|&o| o == c).map_or(c, |k| input.partners[k])
        };
        let mut mask_means = vec![1.0; n];
        let mut mask_penalty: Option<Tensor> = None;
        if msd_on {
            let pre = feats.clone();
            for c in 0..n {
                let r = reference_of(c);
                if cfg.msd == MaskStrategy::Similarity && input.outputs.contains(&c) {
                    trace.feature_reads.push((c, r));
                }
                let (masked, mask) = self.mask_cloud(bind, &pre[c], &pre[r], mode, tau, rng, &mut trace)?;
                feats[c] = self.stages(bind, msd_pos..fuse_pos, masked)?;
                mask_means[c] = mask.mean();
                if mask.p.is_some() && input.outputs.contains(&c) {
                    let term = mask.m.sum_all().scale(1.0 / mask.len() as f64);
                    mask_penalty = Some(match mask_penalty {
                        Some(acc) => acc.add(&term)?,
                        None => term,
                    });
                }
            }
        }

        let mut pooled_rows = Vec::with_capacity(input.outputs.len());
        for (k, &o) in input.outputs.iter().enumerate() {
            let f1 = &feats[o];
            let l = f1.shape()[0];
            let h = if let Some(scfa) = &self.scfa {
                let f_prime = if scfa.fuses() {
                    let p = input.partners[k];
                    trace.feature_reads.push((o, p));
                    Some(scfa.aggregate(bind, f1, &feats[p])?)
                } else {
                    None
                };
                let prompt = scfa.prompt(bind);
                let big = assemble_sequence(f1, f_prime.as_ref(), prompt.as_ref())?;
                let big = match &self.dds {
                    Some(d) => d.forward(bind, &big, scfa.blocks(), rng)?,
                    None => big,
                };
                self.stages(bind, fuse_pos..num_stages, big)?
            } else {
                f1.clone()
            };
            let pool_src = if cfg.pool_all { h } else { h.slice(0, 0, l)? };
            pooled_rows.push(pool_src.mean_axis(0)?.reshape(&[1, cfg.stages.width])?);
        }
        let rows: Vec<&Tensor> = pooled_rows.iter().collect();
        let pooled = Tensor::concat(&rows, 0)?;
        let logits = self.head.forward(bind, &pooled)?;
        Ok(ForwardOutput { logits, pooled, mask_means, mask_penalty, trace })
    }

    /// Inference on one cloud: fixed FPS start, no noise, self pairing.
    pub fn infer(&self, points: &[Point]) -> Result<ForwardOutput> {
        let bind = Binding::frozen(&self.store);
        let mut unused = stream(0, &[tag::EVAL]);
        self.forward_group(&bind, &GroupInput::single(points), Mode::Infer, msd_eval_tau(), &mut unused)
    }

    /// Parameters plus the serialized configuration.
    pub fn to_store_with_meta(&self) -> ParamStore {
        let mut out = self.store.clone();
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.add(CONFIG_TENSOR, &[json.len()], json.into_iter().map(f64::from).collect());
        out
    }

    pub fn from_store_with_meta(store: &ParamStore) -> Result<Self> {
        let meta = store
            .by_name(CONFIG_TENSOR)
            .ok_or_else(|| ModelError::Config(format!("checkpoint has no `{CONFIG_TENSOR}` entry")))?;
        let bytes: Vec<u8> = meta.data.iter().map(|&v| v as u8).collect();
        let config: ModelConfig =
            serde_json::from_slice(&bytes).map_err(|e| ModelError::Config(format!("stored config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        let missing = model.store.load_from(store);
        if !missing.is_empty() {
            return Err(ModelError::Config(format!("checkpoint is missing parameters: {}", missing.join(", "))));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.to_store_with_meta(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store_with_meta(&checkpoint::load(path)?)
    }
}

/// Temperature used for the noiseless evaluation mask.
pub fn msd_eval_tau() -> f64 {
    crate::msd::TAU_END
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn cloud(seed: u64, n: usize) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.37 + seed as f64;
                [t.sin(), (1.3 * t).cos(), (0.7 * t).sin() * 0.5]
            })
            .collect()
    }

    fn tiny(num_classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(Scale::Tiny, num_classes);
        c.stages = StageConfig { num_stages: 2, blocks_per_stage: 1, width: 8, state: 4 };
        c.tokenizer = TokenizerConfig { groups: 6, neighbors: 4, strategy: SerializeStrategy::ZOrder };
        c
    }

    #[test]
    fn logits_shape_for_every_variant() {
        let a = cloud(1, 80);
        let b = cloud(2, 80);
        let variants = [
            tiny(5),
            tiny(5).baseline(),
            ModelConfig { aggregation: Aggregation::Sum, ..tiny(5) },
            ModelConfig { aggregation: Aggregation::Concat, msd: MaskStrategy::Similarity, ..tiny(5) },
            ModelConfig { msd: MaskStrategy::Random, scan: ScanStrategy::Shuffle, ..tiny(5) },
            ModelConfig { cross_domain: false, ..tiny(5) },
            ModelConfig { prompt: false, composed_scan: true, ..tiny(5) },
            ModelConfig { fusion_position: 2, ..tiny(5) },
            ModelConfig { pool_all: true, conv_kernel: 3, ..tiny(5) },
        ];
        for cfg in variants {
            let m = Model::new(cfg, 3).unwrap();
            let bind = Binding::frozen(&m.store);
            let input = GroupInput { clouds: vec![&a, &b], starts: vec![0, 5], outputs: vec![0, 1], partners: vec![1, 0] };
            let out = m.forward_group(&bind, &input, Mode::Train, 1.0, &mut stream(1, &[])).unwrap();
            assert_eq!(out.logits.shape(), &[2, 5], "{cfg:?}");
            assert_eq!(out.pooled.shape(), &[2, 8]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { msd_position: 0, ..tiny(5) }.validate().is_err());
        assert!(ModelConfig { fusion_position: 3, ..tiny(5) }.validate().is_err());
        assert!(ModelConfig { msd_position: 2, fusion_position: 1, ..tiny(5) }.validate().is_err());
        assert!(ModelConfig { aggregation: Aggregation::Off, ..tiny(5) }.validate().is_err());
        assert!(ModelConfig { aggregation: Aggregation::Off, scan: ScanStrategy::Off, ..tiny(5) }.validate().is_ok());
        assert!(ModelConfig { stages: StageConfig { num_stages: 1, ..tiny(5).stages }, ..tiny(5) }.validate().is_err());
    }

    #[test]
    fn baseline_has_no_plugin_parameters() {
        let m = Model::new(tiny(5).baseline(), 1).unwrap();
        assert!(m.store.iter().all(|(_, e)| !e.name.starts_with("msd.") && !e.name.starts_with("scfa.") && !e.name.starts_with("dds.")));
        let full = Model::new(tiny(5), 1).unwrap();
        for name in ["msd.proj.weight", "scfa.mlp1.fc1.weight", "scfa.conv.weight", "scfa.global_prompt", "dds.ids.a_log", "dds.cds.a_log", "ssm.stage1.block0.in_proj.weight"] {
            assert!(full.store.by_name(name).is_some(), "{name}");
        }
    }

    #[test]
    fn inference_reads_only_itself() {
        let m = Model::new(tiny(5), 2).unwrap();
        let out = m.infer(&cloud(4, 90)).unwrap();
        assert!(!out.trace.train);
        assert!(!out.trace.mask_noise_drawn);
        assert_eq!(out.trace.feature_reads, vec![(0, 0)]);
        let again = m.infer(&cloud(4, 90)).unwrap();
        assert_eq!(out.logits.data(), again.logits.data());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pdgm");
        let m = Model::new(ModelConfig { msd: MaskStrategy::Similarity, ..tiny(3) }, 9).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        let pts = cloud(7, 70);
        assert_eq!(back.infer(&pts).unwrap().logits.data(), m.infer(&pts).unwrap().logits.data());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut cfg = tiny(3);
        cfg.stages.width = 16;
        cfg.tokenizer.groups = 8;
        let m = Model::new(cfg, 5).unwrap();
        let a = cloud(1, 70);
        let b = cloud(2, 70);
        let input = GroupInput { clouds: vec![&a, &b], starts: vec![0, 3], outputs: vec![0, 1], partners: vec![1, 0] };
        let id = m.store.id_of("scfa.global_prompt").unwrap();
        let e = m.store.get(id);
        let x0 = Tensor::new(&e.shape, e.data.clone()).unwrap();
        let report = finite_difference_check(
            |p| {
                let bind = Binding::frozen(&m.store);
                bind.set(id, p.clone());
                let out = m
                    .forward_group(&bind, &input, Mode::Train, 1.0, &mut stream(1, &[]))
                    .map_err(|e| TensorError::Argument(e.to_string()))?;
                Ok(out.logits.softmax(1)?.log().slice(1, 0, 1)?.sum_all())
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
