use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::TrainError;
use crate::data::JitterConfig;
use crate::dds::ScanStrategy;
use crate::model::ModelConfig;
use crate::msd::{MaskStrategy, TAU_END, TAU_START};
use crate::scfa::Aggregation;
use crate::ssm::Scale;
use crate::tokenizer::SerializeStrategy;

/// Which source splits feed training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceSplits {
    TrainTest,
    TrainOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Slots per step; a slot holds one same-class cloud per source domain.
    pub batch_size: usize,
    pub scale: Scale,
    pub width: Option<usize>,
    pub num_stages: Option<usize>,
    pub blocks_per_stage: Option<usize>,
    pub state: Option<usize>,
    pub groups: usize,
    pub neighbors: usize,
    pub serialization: SerializeStrategy,
    pub msd: MaskStrategy,
    pub aggregation: Aggregation,
    pub cross_domain: bool,
    pub prompt: bool,
    pub scan: ScanStrategy,
    pub ids: bool,
    pub cds: bool,
    pub composed_scan: bool,
    pub msd_position: usize,
    pub fusion_position: usize,
    pub conv_kernel: usize,
    pub pool_all: bool,
    pub tau_start: f64,
    pub tau_end: f64,
    pub mask_sparsity: f64,
    pub pointmix_prob: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub source_splits: SourceSplits,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr_init: 1e-4,
            lr_final: 1e-5,
            weight_decay: 1e-4,
            epochs: 40,
            warmup_epochs: 5,
            batch_size: 16,
            scale: Scale::Tiny,
            width: None,
            num_stages: None,
            blocks_per_stage: None,
            state: None,
            groups: 32,
            neighbors: 16,
            serialization: SerializeStrategy::ZOrder,
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
            tau_start: TAU_START,
            tau_end: TAU_END,
            mask_sparsity: 0.0,
            pointmix_prob: 0.5,
            jitter_sigma: JitterConfig::default().sigma,
            jitter_clip: JitterConfig::default().clip,
            source_splits: SourceSplits::TrainTest,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_opt(v: &str) -> Option<Option<usize>> {
    if v == "auto" || v == "default" {
        Some(None)
    } else {
        v.parse().ok().map(Some)
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl TrainConfig {
    /// Every key accepted by [`TrainConfig::set`], in file order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "lr_init",
        "lr_final",
        "weight_decay",
        "epochs",
        "warmup_epochs",
        "batch_size",
        "scale",
        "width",
        "num_stages",
        "blocks_per_stage",
        "state",
        "groups",
        "neighbors",
        "serialization",
        "msd",
        "aggregation",
        "cross_domain",
        "prompt",
        "scan",
        "ids",
        "cds",
        "composed_scan",
        "msd_position",
        "fusion_position",
        "conv_kernel",
        "pool_all",
        "tau_start",
        "tau_end",
        "mask_sparsity",
        "pointmix_prob",
        "jitter_sigma",
        "jitter_clip",
        "source_splits",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        let bad = || TrainError::Config(format!("invalid value `{v}` for `{key}`"));
        macro_rules! num {
            ($field:expr) => {
                $field = v.parse().map_err(|_| bad())?
            };
        }
        macro_rules! flag {
            ($field:expr) => {
                $field = parse_bool(v).ok_or_else(bad)?
            };
        }
        match key.trim() {
            "seed" => num!(self.seed),
            "lr_init" => num!(self.lr_init),
            "lr_final" => num!(self.lr_final),
            "weight_decay" => num!(self.weight_decay),
            "epochs" => num!(self.epochs),
            "warmup_epochs" => num!(self.warmup_epochs),
            "batch_size" => num!(self.batch_size),
            "scale" => self.scale = Scale::parse(v).ok_or_else(bad)?,
            "width" => self.width = parse_opt(v).ok_or_else(bad)?,
            "num_stages" => self.num_stages = parse_opt(v).ok_or_else(bad)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_opt(v).ok_or_else(bad)?,
            "state" => self.state = parse_opt(v).ok_or_else(bad)?,
            "groups" => num!(self.groups),
            "neighbors" => num!(self.neighbors),
            "serialization" => self.serialization = SerializeStrategy::parse(v).ok_or_else(bad)?,
            "msd" => self.msd = MaskStrategy::parse(v).ok_or_else(bad)?,
            "aggregation" => self.aggregation = Aggregation::parse(v).ok_or_else(bad)?,
            "cross_domain" => flag!(self.cross_domain),
            "prompt" => flag!(self.prompt),
            "scan" => self.scan = ScanStrategy::parse(v).ok_or_else(bad)?,
            "ids" => flag!(self.ids),
            "cds" => flag!(self.cds),
            "composed_scan" => flag!(self.composed_scan),
            "msd_position" => num!(self.msd_position),
            "fusion_position" => num!(self.fusion_position),
            "conv_kernel" => num!(self.conv_kernel),
            "pool_all" => flag!(self.pool_all),
            "tau_start" => num!(self.tau_start),
            "tau_end" => num!(self.tau_end),
            "mask_sparsity" => num!(self.mask_sparsity),
            "pointmix_prob" => num!(self.pointmix_prob),
            "jitter_sigma" => num!(self.jitter_sigma),
            "jitter_clip" => num!(self.jitter_clip),
            "source_splits" => {
                self.source_splits = match v {
                    "train+test" | "train-test" => SourceSplits::TrainTest,
                    "train" | "train-only" => SourceSplits::TrainOnly,
                    _ => return Err(bad()),
                }
            }
            other => return Err(TrainError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "lr_init" => self.lr_init.to_string(),
            "lr_final" => self.lr_final.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "scale" => self.scale.name().to_string(),
            "width" => show_opt(self.width),
            "num_stages" => show_opt(self.num_stages),
            "blocks_per_stage" => show_opt(self.blocks_per_stage),
            "state" => show_opt(self.state),
            "groups" => self.groups.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "serialization" => self.serialization.name().to_string(),
            "msd" => self.msd.name().to_string(),
            "aggregation" => self.aggregation.name().to_string(),
            "cross_domain" => self.cross_domain.to_string(),
            "prompt" => self.prompt.to_string(),
            "scan" => self.scan.name().to_string(),
            "ids" => self.ids.to_string(),
            "cds" => self.cds.to_string(),
            "composed_scan" => self.composed_scan.to_string(),
            "msd_position" => self.msd_position.to_string(),
            "fusion_position" => self.fusion_position.to_string(),
            "conv_kernel" => self.conv_kernel.to_string(),
            "pool_all" => self.pool_all.to_string(),
            "tau_start" => self.tau_start.to_string(),
            "tau_end" => self.tau_end.to_string(),
            "mask_sparsity" => self.mask_sparsity.to_string(),
            "pointmix_prob" => self.pointmix_prob.to_string(),
            "jitter_sigma" => self.jitter_sigma.to_string(),
            "jitter_clip" => self.jitter_clip.to_string(),
            "source_splits" => match self.source_splits {
                SourceSplits::TrainTest => "train+test".to_string(),
                SourceSplits::TrainOnly => "train".to_string(),
            },
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The config as a `key = value` file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn jitter(&self) -> JitterConfig {
        JitterConfig { sigma: self.jitter_sigma, clip: self.jitter_clip }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.scale, num_classes);
        if let Some(w) = self.width {
            m.stages.width = w;
        }
        if let Some(n) = self.num_stages {
            m.stages.num_stages = n;
        }
        if let Some(b) = self.blocks_per_stage {
            m.stages.blocks_per_stage = b;
        }
        if let Some(s) = self.state {
            m.stages.state = s;
        }
        m.tokenizer.groups = self.groups;
        m.tokenizer.neighbors = self.neighbors;
        m.tokenizer.strategy = self.serialization;
        m.msd = self.msd;
        m.aggregation = self.aggregation;
        m.cross_domain = self.cross_domain;
        m.prompt = self.prompt;
        m.scan = self.scan;
        m.ids = self.ids;
        m.cds = self.cds;
        m.composed_scan = self.composed_scan;
        m.msd_position = self.msd_position;
        m.fusion_position = self.fusion_position;
        m.conv_kernel = self.conv_kernel;
        m.pool_all = self.pool_all;
        m
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self, num_classes: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs ({}) must be < epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.lr_final < self.lr_init) || !(self.lr_final > 0.0) {
            return bad(format!("need 0 < lr_final < lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.tau_end > 0.0 && self.tau_start > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pointmix_prob) {
            return bad(format!("pointmix_prob {} outside [0, 1]", self.pointmix_prob));
        }
        if self.weight_decay < 0.0 || self.jitter_sigma < 0.0 || self.mask_sparsity < 0.0 {
            return bad("weight_decay, jitter_sigma and mask_sparsity must be >= 0".into());
        }
        self.model_config(num_classes).validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}
