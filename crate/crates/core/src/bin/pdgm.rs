use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use pdgm_core::bench::{bench_csv, scan_bench, BENCH_LENGTHS, BENCH_REPS};
use pdgm_core::data::synth::{generate_benchmark, SynthConfig};
use pdgm_core::data::{dataset_hash, Benchmark, DataError, Split};
use pdgm_core::dds::{cds_order_k, ids_order_k};
use pdgm_core::gradsuite::run_suite;
use pdgm_core::model::{Model, ModelError};
use pdgm_core::train::{
    ablation_table, evaluate, features_csv, preset_grid, run_ablation_matrix, run_leave_one_out, run_single,
    write_run_outputs, OutputDir, TrainConfig, TrainError, GRIDS,
};

#[derive(Parser)]
#[command(name = "pdgm", version, about = "Domain-generalized point cloud classification")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file; `--set` and `--seed` take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, TrainError> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic four-domain benchmark.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SynthConfig::default().train_per_class)]
        train_per_class: usize,
        #[arg(long, default_value_t = SynthConfig::default().test_per_class)]
        test_per_class: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train on source domains and evaluate on one target.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        target: String,
        /// Comma-separated source domains; defaults to all others.
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Leave-one-domain-out training and evaluation.
    Loo {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a preset ablation grid under several seeds.
    Ablate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// One of: modules, dds, mask, aggregation, scan, position, scale, baseline-vs-full.
        #[arg(long)]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on one domain split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks; exits nonzero on any failure.
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Time the selective scan at doubling lengths and write bench.csv.
    ScanBench {
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = BENCH_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 192)]
        width: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
    },
    /// Print the intra- and cross-block scan permutations for three blocks.
    InspectScan {
        #[arg(long = "L")]
        l: usize,
        #[arg(long, default_value_t = 3)]
        blocks: usize,
    },
    /// Write pooled features of a checkpoint on one domain split.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks errors that should exit with status 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || e.downcast_ref::<TrainError>().is_some_and(TrainError::is_validation)
            || matches!(e.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
            || matches!(e.downcast_ref::<DataError>(), Some(DataError::OutputNotEmpty(_)))
    })
}

fn load_bench(root: &Path) -> Result<Benchmark> {
    Benchmark::load(root).with_context(|| format!("loading dataset {}", root.display()))
}

fn domain(bench: &Benchmark, name: &str) -> Result<usize> {
    bench
        .domain_id(name)
        .ok_or_else(|| usage(format!("unknown domain `{name}`; have {}", bench.manifest.domains.join(", "))))
}

fn split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| usage(format!("unknown split `{s}`")))
}

fn default_out(kind: &str, cfg: &TrainConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{kind}-seed{}", cfg.seed))
}

fn eval_split(checkpoint: &Path, data: &Path, dom: &str, sp: &str) -> Result<pdgm_core::train::EvalResult> {
    let model = Model::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let bench = load_bench(data)?;
    let (d, s) = (domain(&bench, dom)?, split(sp)?);
    let ds = bench.get(d, s).ok_or_else(|| usage(format!("{dom} has no {sp} split")))?;
    if model.config.num_classes != bench.num_classes() {
        bail!(usage(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config.num_classes,
            bench.num_classes()
        )));
    }
    Ok(evaluate(&model, ds)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, train_per_class, test_per_class, force } => {
            let m = generate_benchmark(&out, &SynthConfig { seed, train_per_class, test_per_class }, force)?;
            println!(
                "wrote {} domains x {} classes to {} (hash {})",
                m.domains.len(),
                m.classes.len(),
                out.display(),
                dataset_hash(&out)?
            );
        }
        Command::Train { data, target, sources, out, force, cfg } => {
            let cfg = cfg.resolve()?;
            let bench = load_bench(&data)?;
            cfg.validate(bench.num_classes())?;
            let t = domain(&bench, &target)?;
            let src: Vec<usize> = if sources.is_empty() {
                (0..bench.num_domains()).filter(|&d| d != t).collect()
            } else {
                sources.iter().map(|s| domain(&bench, s)).collect::<Result<_>>()?
            };
            let out = out.unwrap_or_else(|| default_out(&format!("train-{target}"), &cfg));
            let dir = OutputDir::create(&out, force)?;
            let start = Instant::now();
            let result = run_single(&bench, &cfg, t, &src)?;
            println!("{target}: accuracy {:.4}", result.0.final_accuracy);
            let hash = dataset_hash(&data).ok();
            write_run_outputs(dir.path(), &cfg, &[result], start.elapsed().as_secs_f64(), hash.as_deref())?;
            println!("outputs in {}", dir.commit()?.display());
        }
        Command::Loo { data, out, force, cfg } => {
            let cfg = cfg.resolve()?;
            let bench = load_bench(&data)?;
            cfg.validate(bench.num_classes())?;
            let dir = OutputDir::create(&out.unwrap_or_else(|| default_out("loo", &cfg)), force)?;
            let report = run_leave_one_out(&bench, &cfg, Some(&dir))?;
            for r in &report.runs {
                println!("{:<12} {:.4}", r.target_name, r.final_accuracy);
            }
            println!("{:<12} {:.4}", "average", report.average);
            println!("outputs in {}", dir.commit()?.display());
        }
        Command::Ablate { data, grid, seeds, out, force, cfg } => {
            let cfg = cfg.resolve()?;
            if !GRIDS.contains(&grid.as_str()) {
                bail!(usage(format!("unknown grid `{grid}`; expected one of {}", GRIDS.join(", "))));
            }
            let rows = preset_grid(&grid, &cfg)?;
            let bench = load_bench(&data)?;
            for r in &rows {
                r.config.validate(bench.num_classes())?;
            }
            let dir = OutputDir::create(&out.unwrap_or_else(|| default_out(&format!("ablate-{grid}"), &cfg)), force)?;
            let results = run_ablation_matrix(&bench, &rows, &seeds, Some(&dir))?;
            print!("{}", ablation_table(&results));
            println!("outputs in {}", dir.commit()?.display());
        }
        Command::Eval { checkpoint, data, domain, split } => {
            let r = eval_split(&checkpoint, &data, &domain, &split)?;
            println!("accuracy {:.4} loss {:.4} mean_mask {:.4}", r.accuracy, r.loss, r.mean_mask);
            for (c, a) in r.per_class.iter().enumerate() {
                if let Some(a) = a {
                    println!("class {c}: {a:.4}");
                }
            }
        }
        Command::GradCheck { seed } => {
            let report = run_suite(seed)?;
            print!("{}", report.render());
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::ScanBench { out, reps, width, state } => {
            let rows = scan_bench(BENCH_LENGTHS, width, state, reps, 0);
            let csv = bench_csv(&rows);
            print!("{csv}");
            fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::InspectScan { l, blocks } => {
            if l == 0 || blocks == 0 {
                bail!(usage("--L and --blocks must be positive"));
            }
            let show = |p: &[usize]| p.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            println!("IDS [{}]", show(&ids_order_k(l, blocks).perm));
            println!("CDS [{}]", show(&cds_order_k(l, blocks).perm));
        }
        Command::ExportFeatures { checkpoint, data, domain, split, out } => {
            let r = eval_split(&checkpoint, &data, &domain, &split)?;
            fs::write(&out, features_csv(&r)).with_context(|| format!("writing {}", out.display()))?;
            println!("{} rows to {}", r.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    info!("pdgm {}", env!("CARGO_PKG_VERSION"));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
