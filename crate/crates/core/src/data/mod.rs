//! Point cloud datasets: on-disk layout, the synthetic multi-domain
//! benchmark, augmentation and domain-balanced resampling.

mod augment;
mod io;
mod resample;
pub mod synth;

pub use augment::{add_jitter, normalize, normalize_and_jitter, pointmix, JitterConfig};
pub(crate) use augment::sample_lambda;
pub use io::{dataset_hash, load_dataset, Benchmark, Manifest, MANIFEST_FILE};
pub use resample::{balanced_resample, IndexPlan, SampleRef, Slot};

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Point = [f64; 3];

/// Minimum number of points a loaded cloud must carry.
pub const MIN_POINTS: usize = 64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("sample {sample_id} has {count} points, need at least {MIN_POINTS}")]
    TooFewPoints { sample_id: String, count: usize },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot normalize degenerate cloud {0}: all points coincide")]
    Degenerate(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("output directory {} is not empty (use --force to overwrite)", .0.display())]
    OutputNotEmpty(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub class_id: usize,
    pub domain_id: usize,
    pub sample_id: String,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// All clouds of one (domain, split).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub domain_name: String,
    pub split: Split,
    pub clouds: Vec<PointCloud>,
    pub class_counts: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        domain_id: usize,
        domain_name: impl Into<String>,
        split: Split,
        clouds: Vec<PointCloud>,
        num_classes: usize,
    ) -> Self {
        let mut class_counts = vec![0; num_classes];
        for c in &clouds {
            class_counts[c.class_id] += 1;
        }
        Self { domain_id, domain_name: domain_name.into(), split, clouds, class_counts }
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Merges several splits of the same domain (train+test source policy).
    pub fn merged(parts: &[&DomainDataset]) -> DomainDataset {
        let first = parts[0];
        let mut clouds: Vec<PointCloud> =
            parts.iter().flat_map(|p| p.clouds.iter().cloned()).collect();
        clouds.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        DomainDataset::new(
            first.domain_id,
            first.domain_name.clone(),
            first.split,
            clouds,
            first.class_counts.len(),
        )
    }
}
