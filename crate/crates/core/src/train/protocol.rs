use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::{evaluate, train_epoch, AdamW, EvalResult, SourceSplits, TrainConfig, TrainError};
use crate::data::{balanced_resample, dataset_hash, Benchmark, DomainDataset, Split};
use crate::model::Model;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub target_accuracy: f64,
    pub mean_mask: f64,
    pub lr: f64,
}

/// One trained model evaluated on one held-out domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolRun {
    pub sources: Vec<usize>,
    pub target: usize,
    pub target_name: String,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub final_mask: f64,
    pub per_class: Vec<Option<f64>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

fn source_data(bench: &Benchmark, cfg: &TrainConfig, domain: usize) -> Result<DomainDataset, TrainError> {
    let name = bench.manifest.domains.get(domain).cloned().unwrap_or_default();
    let train = bench
        .get(domain, Split::Train)
        .ok_or_else(|| TrainError::Protocol(format!("domain {name} has no train split")))?;
    Ok(match (cfg.source_splits, bench.get(domain, Split::Test)) {
        (SourceSplits::TrainTest, Some(test)) => DomainDataset::merged(&[train, test]),
        _ => train.clone(),
    })
}

/// Trains on `sources` and evaluates on the test split of `target` after
/// every epoch.
pub fn run_single(
    bench: &Benchmark,
    cfg: &TrainConfig,
    target: usize,
    sources: &[usize],
) -> Result<(ProtocolRun, Model, EvalResult), TrainError> {
    let classes = bench.num_classes();
    cfg.validate(classes)?;
    if sources.is_empty() || sources.contains(&target) {
        return Err(TrainError::Protocol(format!("sources {sources:?} must be nonempty and exclude target {target}")));
    }
    let target_name = bench
        .manifest
        .domains
        .get(target)
        .cloned()
        .ok_or_else(|| TrainError::Protocol(format!("no domain with id {target}")))?;
    let test = bench
        .get(target, Split::Test)
        .ok_or_else(|| TrainError::Protocol(format!("domain {target_name} has no test split")))?;
    let owned: Vec<DomainDataset> = sources.iter().map(|&d| source_data(bench, cfg, d)).collect::<Result<_, _>>()?;
    let refs: Vec<&DomainDataset> = owned.iter().collect();
    let run = target as u64;
    let plan = balanced_resample(&refs, classes, &mut stream(cfg.seed, &[run, tag::PLAN]))?;
    let mut model = Model::new(cfg.model_config(classes), cfg.seed)?;
    let mut opt = AdamW::new(&model.store);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let stats = train_epoch(&mut model, &mut opt, &refs, &plan, cfg, run, e)?;
        let eval = evaluate(&model, test)?;
        info!(
            "target {target_name} epoch {e}: loss {:.4} acc {:.4} mask {:.3} lr {:.2e}",
            stats.loss, eval.accuracy, stats.mean_mask, stats.lr
        );
        epochs.push(EpochRecord {
            epoch: e,
            train_loss: stats.loss,
            target_accuracy: eval.accuracy,
            mean_mask: stats.mean_mask,
            lr: stats.lr,
        });
    }
    let eval = evaluate(&model, test)?;
    if !eval.isolated {
        warn!("target {target_name}: inference read features across samples");
    }
    let run = ProtocolRun {
        sources: sources.to_vec(),
        target,
        target_name,
        epochs,
        final_accuracy: eval.accuracy,
        final_loss: eval.loss,
        final_mask: eval.mean_mask,
        per_class: eval.per_class.clone(),
    };
    Ok((run, model, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub runs: Vec<ProtocolRun>,
    pub average: f64,
    pub wall_seconds: f64,
    pub dataset_hash: Option<String>,
}

/// A run directory that is filled under a temporary name and moved into
/// place once complete.
#[derive(Debug)]
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    force: bool,
}

impl OutputDir {
    /// Fails if `path` exists and is non-empty, unless `force`.
    pub fn create(path: &Path, force: bool) -> Result<Self, TrainError> {
        if !force && path.exists() {
            let mut entries = fs::read_dir(path).map_err(io_err(path))?;
            if entries.next().is_some() {
                return Err(TrainError::Config(format!(
                    "output directory {} is not empty (use --force to replace it)",
                    path.display()
                )));
            }
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        fs::create_dir(&staging).map_err(io_err(&staging))?;
        Ok(Self { target: path.to_path_buf(), staging, force })
    }

    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn commit(self) -> Result<PathBuf, TrainError> {
        if self.target.exists() {
            if !self.force && fs::read_dir(&self.target).map_err(io_err(&self.target))?.next().is_some() {
                return Err(TrainError::Config(format!("output directory {} appeared while running", self.target.display())));
            }
            fs::remove_dir_all(&self.target).map_err(io_err(&self.target))?;
        }
        fs::rename(&self.staging, &self.target).map_err(io_err(&self.target))?;
        Ok(self.target)
    }
}

fn write(path: &Path, text: &str) -> Result<(), TrainError> {
    fs::write(path, text).map_err(io_err(path))
}

/// `metrics.csv`: one row per (target, epoch) and one `final` row per
/// target.
pub fn metrics_csv(runs: &[ProtocolRun]) -> String {
    let mut out = String::from("epoch,split,loss,accuracy,mean_mask,lr\n");
    for r in runs {
        for e in &r.epochs {
            let _ = writeln!(out, "{},{},{},{},{},{}", e.epoch, r.target_name, e.train_loss, e.target_accuracy, e.mean_mask, e.lr);
        }
    }
    for r in runs {
        let lr = r.epochs.last().map_or(0.0, |e| e.lr);
        let _ = writeln!(out, "final,{},{},{},{},{}", r.target_name, r.final_loss, r.final_accuracy, r.final_mask, lr);
    }
    out
}

pub fn features_csv(eval: &EvalResult) -> String {
    let width = eval.rows.first().map_or(0, |r| r.features.len());
    let mut out = String::from("sample_id,class_id");
    for i in 0..width {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for row in &eval.rows {
        let _ = write!(out, "{},{}", row.sample_id, row.class_id);
        for v in &row.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes metrics, summary, features and checkpoints for finished runs.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &TrainConfig,
    results: &[(ProtocolRun, Model, EvalResult)],
    wall_seconds: f64,
    hash: Option<&str>,
) -> Result<(), TrainError> {
    let runs: Vec<ProtocolRun> = results.iter().map(|r| r.0.clone()).collect();
    write(&dir.join("metrics.csv"), &metrics_csv(&runs))?;
    write(&dir.join("config.cfg"), &cfg.to_text())?;
    for (run, model, eval) in results {
        write(&dir.join(format!("features_{}.csv", run.target_name)), &features_csv(eval))?;
        let ckpt = dir.join(format!("checkpoint_{}.pdgm", run.target_name));
        model.save(&ckpt)?;
    }
    let average = runs.iter().map(|r| r.final_accuracy).sum::<f64>() / runs.len().max(1) as f64;
    let targets: Vec<_> = runs
        .iter()
        .map(|r| {
            json!({
                "target": r.target_name,
                "sources": r.sources,
                "accuracy": r.final_accuracy,
                "loss": r.final_loss,
                "per_class_accuracy": r.per_class,
            })
        })
        .collect();
    let summary = json!({
        "config": cfg,
        "seed": cfg.seed,
        "targets": targets,
        "average_accuracy": average,
        "wall_seconds": wall_seconds,
        "dataset_hash": hash,
        "num_params": results.first().map(|r| r.1.num_params()),
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| TrainError::Protocol(e.to_string()))?;
    write(&dir.join("result.json"), &(text + "\n"))
}

/// Holds out each domain in turn and trains on all others. Targets run in
/// parallel; outputs go to `out` if given.
pub fn run_leave_one_out(
    bench: &Benchmark,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<LooReport, TrainError> {
    cfg.validate(bench.num_classes())?;
    let n = bench.num_domains();
    if n < 3 {
        return Err(TrainError::Protocol(format!(
            "leave-one-out needs at least 2 source domains, found {} domain(s)",
            n
        )));
    }
    let start = Instant::now();
    let hash = dataset_hash(&bench.root).ok();
    let results: Vec<(ProtocolRun, Model, EvalResult)> = (0..n)
        .into_par_iter()
        .map(|t| {
            let sources: Vec<usize> = (0..n).filter(|&d| d != t).collect();
            run_single(bench, cfg, t, &sources)
        })
        .collect::<Result<_, _>>()?;
    let wall_seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_run_outputs(dir.path(), cfg, &results, wall_seconds, hash.as_deref())?;
    }
    let runs: Vec<ProtocolRun> = results.into_iter().map(|r| r.0).collect();
    let average = runs.iter().map(|r| r.final_accuracy).sum::<f64>() / n as f64;
    info!("leave-one-out average accuracy {average:.4} in {wall_seconds:.1}s");
    Ok(LooReport { runs, average, wall_seconds, dataset_hash: hash })
}

/// Named preset grids accepted by [`preset_grid`].
pub const GRIDS: &[&str] = &["modules", "dds", "mask", "aggregation", "scan", "position", "scale", "baseline-vs-full"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
}

const NO_PLUGINS: &[(&str, &str)] = &[("msd", "off"), ("aggregation", "off"), ("scan", "off")];

fn row(base: &TrainConfig, label: &str, overrides: &[(&str, &str)]) -> Result<AblationRow, TrainError> {
    let mut config = base.clone();
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    Ok(AblationRow { label: label.to_string(), config })
}

/// Expands a named grid into rows derived from `base`.
pub fn preset_grid(name: &str, base: &TrainConfig) -> Result<Vec<AblationRow>, TrainError> {
    let r = |label: &str, o: &[(&str, &str)]| row(base, label, o);
    match name {
        "modules" => Ok(vec![
            r("baseline", NO_PLUGINS)?,
            r("+CDF", &[("msd", "off"), ("aggregation", "scfa"), ("cross_domain", "true"), ("prompt", "false"), ("scan", "off")])?,
            r("+GP", &[("msd", "off"), ("aggregation", "scfa"), ("cross_domain", "true"), ("prompt", "true"), ("scan", "off")])?,
            r("+MSD", &[("msd", "gumbel"), ("aggregation", "scfa"), ("cross_domain", "true"), ("prompt", "true"), ("scan", "off")])?,
        ]),
        "dds" => Ok(vec![
            r("no IDS, no CDS", &[("scan", "off")])?,
            r("IDS", &[("scan", "dds"), ("ids", "true"), ("cds", "false")])?,
            r("CDS", &[("scan", "dds"), ("ids", "false"), ("cds", "true")])?,
            r("IDS+CDS", &[("scan", "dds"), ("ids", "true"), ("cds", "true"), ("composed_scan", "false")])?,
            r("IDS+CDS composed", &[("scan", "dds"), ("ids", "true"), ("cds", "true"), ("composed_scan", "true")])?,
        ]),
        "mask" => ["off", "random", "similarity", "gumbel"].iter().map(|m| r(m, &[("msd", m)])).collect(),
        "aggregation" => ["sum", "concat", "scfa"].iter().map(|a| r(a, &[("aggregation", a)])).collect(),
        "scan" => ["forward", "backward", "shuffle", "dds"].iter().map(|s| r(s, &[("scan", s)])).collect(),
        "position" => {
            let stages = base.model_config(1).stages.num_stages;
            let mut rows = Vec::new();
            for m in 1..=stages {
                for f in m..=stages {
                    let (ms, fs) = (m.to_string(), f.to_string());
                    rows.push(r(&format!("msd@{m} fusion@{f}"), &[("msd_position", &ms), ("fusion_position", &fs)])?);
                }
            }
            Ok(rows)
        }
        "scale" => ["tiny", "small", "base"]
            .iter()
            .map(|s| {
                let auto = "auto";
                r(s, &[("scale", s), ("width", auto), ("num_stages", auto), ("blocks_per_stage", auto), ("state", auto)])
            })
            .collect(),
        "baseline-vs-full" => Ok(vec![r("baseline", NO_PLUGINS)?, r("full", &[])?]),
        other => Err(TrainError::Config(format!("unknown grid `{other}`; expected one of {}", GRIDS.join(", ")))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Leave-one-out average accuracy per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,label,seed,accuracy\n");
    for (i, r) in results.iter().enumerate() {
        for (s, a) in r.seeds.iter().zip(&r.per_seed) {
            let _ = writeln!(out, "{i},{},{s},{a}", r.label);
        }
        let _ = writeln!(out, "{i},{},mean,{}", r.label, r.mean);
    }
    out
}

/// Aligned plain-text rendering of an ablation table.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let lw = results.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<lw$}", "label");
    if let Some(r) = results.first() {
        for s in &r.seeds {
            let _ = write!(out, "  {:>8}", format!("seed {s}"));
        }
    }
    let _ = writeln!(out, "  {:>8}", "mean");
    for r in results {
        let _ = write!(out, "{:<lw$}", r.label);
        for a in &r.per_seed {
            let _ = write!(out, "  {:>8.4}", a);
        }
        let _ = writeln!(out, "  {:>8.4}", r.mean);
    }
    out
}

/// Runs every row under every seed with the full leave-one-out protocol.
/// All rows are validated before any training starts.
pub fn run_ablation_matrix(
    bench: &Benchmark,
    rows: &[AblationRow],
    seeds: &[u64],
    out: Option<&OutputDir>,
) -> Result<Vec<AblationResult>, TrainError> {
    if rows.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one row and one seed".into()));
    }
    for r in rows {
        r.config.validate(bench.num_classes()).map_err(|e| TrainError::Config(format!("row `{}`: {e}", r.label)))?;
    }
    if bench.num_domains() < 3 {
        return Err(TrainError::Protocol("ablation needs at least 3 domains".into()));
    }
    let mut results = Vec::with_capacity(rows.len());
    for r in rows {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..r.config.clone() };
            let report = run_leave_one_out(bench, &cfg, None)?;
            info!("ablation `{}` seed {seed}: {:.4}", r.label, report.average);
            per_seed.push(report.average);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        results.push(AblationResult { label: r.label.clone(), seeds: seeds.to_vec(), per_seed, mean });
    }
    if let Some(dir) = out {
        write(&dir.path().join("ablation.csv"), &ablation_csv(&results))?;
        write(&dir.path().join("ablation.txt"), &ablation_table(&results))?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IndexPlan, PointCloud};
    use rand::seq::SliceRandom;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn cloud(class: usize, domain: usize, i: usize) -> PointCloud {
        let points = (0..64)
            .map(|k| {
                let t = k as f64 * 0.41 + i as f64 * 0.07;
                let r = 0.5 + class as f64;
                [r * t.cos(), r * t.sin(), (k % 5) as f64 * 0.2 * (1.0 + 0.3 * domain as f64)]
            })
            .collect();
        PointCloud { points, class_id: class, domain_id: domain, sample_id: format!("d{domain}c{class}i{i}") }
    }

    fn bench(domains: usize) -> Benchmark {
        let names: Vec<String> = (0..domains).map(|d| format!("dom{d}")).collect();
        let mut datasets = Vec::new();
        for d in 0..domains {
            for split in [Split::Train, Split::Test] {
                let n = if split == Split::Train { 3 } else { 2 };
                let clouds = (0..2).flat_map(|c| (0..n).map(move |i| cloud(c, d, i))).collect();
                datasets.push(DomainDataset::new(d, names[d].clone(), split, clouds, 2));
            }
        }
        Benchmark {
            root: PathBuf::from("/nonexistent"),
            manifest: crate::data::Manifest {
                format_version: 1,
                domains: names,
                classes: vec!["a".into(), "b".into()],
                splits: vec!["train".into(), "test".into()],
                counts: Default::default(),
                points_per_cloud: None,
                generator_seed: None,
            },
            datasets,
        }
    }

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 2, ..TrainConfig::default() };
        for (k, v) in [("width", "8"), ("num_stages", "2"), ("state", "4"), ("groups", "4"), ("neighbors", "4")] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn loo_produces_one_run_per_domain() {
        let b = bench(3);
        let rep = run_leave_one_out(&b, &tiny(), None).unwrap();
        assert_eq!(rep.runs.len(), 3);
        for r in &rep.runs {
            assert!(!r.sources.contains(&r.target));
            assert_eq!(r.sources.len(), 2);
        }
        let csv = metrics_csv(&rep.runs);
        assert_eq!(csv.lines().count(), 1 + 3 * 2 + 3);
    }

    #[test]
    fn too_few_domains_is_protocol_error() {
        let err = run_leave_one_out(&bench(2), &tiny(), None).unwrap_err();
        assert!(matches!(err, TrainError::Protocol(_)));
    }

    #[test]
    fn invalid_grid_rejected_before_training() {
        let mut bad = tiny();
        bad.set("aggregation", "off").unwrap();
        let rows = vec![row(&tiny(), "ok", &[]).unwrap(), AblationRow { label: "bad".into(), config: bad }];
        let err = run_ablation_matrix(&bench(1), &rows, &[0], None).unwrap_err();
        assert!(matches!(err, TrainError::Config(_)), "{err}");
    }

    #[test]
    fn grids_expand_in_order() {
        let base = TrainConfig::default();
        for g in GRIDS {
            let rows = preset_grid(g, &base).unwrap();
            assert!(!rows.is_empty());
            for r in &rows {
                r.config.validate(5).unwrap_or_else(|e| panic!("{g}/{}: {e}", r.label));
            }
        }
        let labels: Vec<String> = preset_grid("modules", &base).unwrap().into_iter().map(|r| r.label).collect();
        assert_eq!(labels, ["baseline", "+CDF", "+GP", "+MSD"]);
        assert!(preset_grid("nope", &base).is_err());
        let baseline = &preset_grid("baseline-vs-full", &base).unwrap()[0].config;
        assert!(!baseline.model_config(5).fusion_enabled());
    }

    #[test]
    fn output_dir_refuses_non_empty_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let target = tmp.path().join("run");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("x"), "1").unwrap();
        assert!(OutputDir::create(&target, false).is_err());
        let dir = OutputDir::create(&target, true).unwrap();
        fs::write(dir.path().join("y"), "2").unwrap();
        let done = dir.commit().unwrap();
        assert!(done.join("y").exists() && !done.join("x").exists());
    }

    fn counts(plan: &IndexPlan, draws: usize, seed: u64) -> Vec<Vec<usize>> {
        let classes = plan.per_class_target.len();
        let sources = plan.participating.iter().flatten().max().map_or(0, |m| m + 1);
        let mut c = vec![vec![0usize; sources]; classes];
        let mut rng = stream(seed, &[tag::SHUFFLE]);
        let mut order: Vec<usize> = (0..plan.slots.len()).collect();
        let mut drawn = 0;
        while drawn < draws {
            order.shuffle(&mut rng);
            for &i in &order {
                for m in &plan.slots[i].members {
                    c[plan.slots[i].class_id][m.source] += 1;
                    drawn += 1;
                }
                if drawn >= draws {
                    break;
                }
            }
        }
        c
    }

    #[test]
    fn balanced_pairing_passes_chi_square() {
        let domains: Vec<DomainDataset> = (0..3)
            .map(|d| {
                let per = [2 + d, 7 - 2 * d.min(2), 4];
                let clouds = (0..3).flat_map(|c| (0..per[c]).map(move |i| cloud(c, d, i))).collect();
                DomainDataset::new(d, format!("d{d}"), Split::Train, clouds, 3)
            })
            .collect();
        let refs: Vec<&DomainDataset> = domains.iter().collect();
        let plan = balanced_resample(&refs, 3, &mut stream(4, &[tag::PLAN])).unwrap();
        let c = counts(&plan, 10_000, 9);
        let total: usize = c.iter().flatten().sum();
        let weight: usize = plan.participating.iter().zip(&plan.per_class_target).map(|(p, m)| p.len() * m).sum();
        let mut stat = 0.0;
        let mut cells = 0;
        for (class, row) in c.iter().enumerate() {
            for &s in &plan.participating[class] {
                let expected = total as f64 * plan.per_class_target[class] as f64 / weight as f64;
                stat += (row[s] as f64 - expected).powi(2) / expected;
                cells += 1;
            }
        }
        let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}, counts {c:?}");
    }
}
