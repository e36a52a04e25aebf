use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, DomainDataset, Point, PointCloud, Split, MIN_POINTS};

pub const MANIFEST_FILE: &str = "manifest.json";

/// `root/manifest.json`. `counts[domain][split]` lists clouds per class in
/// the order of `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub domains: Vec<String>,
    pub classes: Vec<String>,
    pub splits: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    #[serde(default)]
    pub points_per_cloud: Option<usize>,
    #[serde(default)]
    pub generator_seed: Option<u64>,
}

pub(crate) fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), DataError> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| DataError::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| DataError::Io { path, source })
}

fn read_manifest(root: &Path) -> Result<Manifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| DataError::Format(format!("missing or unreadable {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Format(format!("{}: {e}", path.display())))
}

fn parse_xyz(path: &Path, sample_id: &str) -> Result<Vec<Point>, DataError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| DataError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(perr(format!("expected 3 coordinates, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|e| perr(format!("`{f}`: {e}")))?;
            if !v.is_finite() {
                return Err(perr(format!("non-finite coordinate `{f}`")));
            }
            p[k] = v;
        }
        points.push(p);
    }
    if points.len() < MIN_POINTS {
        return Err(DataError::TooFewPoints { sample_id: sample_id.to_string(), count: points.len() });
    }
    Ok(points)
}

/// Lists `*.xyz` files in `dir` sorted by sample id. A missing directory is
/// treated as empty.
fn list_samples(dir: &Path) -> Result<Vec<(String, PathBuf)>, DataError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })? {
        let path = entry.map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("xyz") {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every (domain, split) named in the manifest, in manifest order.
pub fn load_dataset(root: &Path) -> Result<Vec<DomainDataset>, DataError> {
    let manifest = read_manifest(root)?;
    let num_classes = manifest.classes.len();
    let mut datasets = Vec::new();
    for (domain_id, domain) in manifest.domains.iter().enumerate() {
        for split_name in &manifest.splits {
            let split = Split::parse(split_name)
                .ok_or_else(|| DataError::Format(format!("unknown split `{split_name}`")))?;
            let mut jobs = Vec::new();
            for (class_id, class) in manifest.classes.iter().enumerate() {
                let dir = root.join(domain).join(split_name).join(class);
                let files = list_samples(&dir)?;
                if files.is_empty() {
                    warn!("{domain}/{split_name}/{class}: no samples");
                }
                jobs.extend(files.into_iter().map(|(id, path)| (class_id, id, path)));
            }
            let mut clouds = jobs
                .par_iter()
                .map(|(class_id, id, path)| {
                    Ok(PointCloud {
                        points: parse_xyz(path, id)?,
                        class_id: *class_id,
                        domain_id,
                        sample_id: id.clone(),
                    })
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            clouds.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            datasets.push(DomainDataset::new(domain_id, domain.clone(), split, clouds, num_classes));
        }
    }
    Ok(datasets)
}

/// A loaded dataset root with its manifest.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub datasets: Vec<DomainDataset>,
}

impl Benchmark {
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let manifest = read_manifest(root)?;
        let datasets = load_dataset(root)?;
        Ok(Self { root: root.to_path_buf(), manifest, datasets })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.manifest.domains.len()
    }

    pub fn get(&self, domain_id: usize, split: Split) -> Option<&DomainDataset> {
        self.datasets.iter().find(|d| d.domain_id == domain_id && d.split == split)
    }

    pub fn domain_id(&self, name: &str) -> Option<usize> {
        self.manifest.domains.iter().position(|d| d == name)
    }
}

/// SHA-256 over the manifest and every sample file, in path order.
pub fn dataset_hash(root: &Path) -> Result<String, DataError> {
    let manifest = read_manifest(root)?;
    let mut hasher = Sha256::new();
    let mpath = root.join(MANIFEST_FILE);
    hasher.update(fs::read(&mpath).map_err(|source| DataError::Io { path: mpath, source })?);
    for domain in &manifest.domains {
        for split in &manifest.splits {
            for class in &manifest.classes {
                for (id, path) in list_samples(&root.join(domain).join(split).join(class))? {
                    hasher.update(format!("{domain}/{split}/{class}/{id}\n").as_bytes());
                    hasher.update(fs::read(&path).map_err(|source| DataError::Io { path, source })?);
                }
            }
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
