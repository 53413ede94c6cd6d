use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use delora::adapter::AdapterVariant;
use delora::baselines::{fit_gmm_em, llm_detection, per_sample_losses, select_small_loss, train_base, write_baseline_selection};
use delora::checkpoint::{Checkpoint, CheckpointModel};
use delora::data::{load_csv, Dataset, HashingFeaturizer};
use delora::detector::{read_selection, train_detector, write_epoch_logs, write_selection};
use delora::harness::{
    inject_noise, load_data, mix_seed, run_experiment, summarize_sweep, sweep, DataSpec, ExperimentConfig, RunReport,
    SweepGrid, SweepReport,
};
use delora::metrics::{precision_recall, test_accuracy};
use delora::noise::write_records;
use delora::stage2::{read_relabeled, relabel_noisy, train_classifier, write_relabeled, RelabeledSet, Stage2Config};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

/// Noisy-label detection with dual low-rank adapters, and denoised training.
///
/// Every verb reads and writes files, so the stages of `run` can be replayed
/// one at a time. Hyperparameters always come from an experiment config JSON
/// (`--config`); omitted configs mean the defaults. The HTTP relabeler reads
/// its bearer token from the variable named by `api_key_env`
/// (DELORA_API_KEY unless overridden).
#[derive(Parser)]
#[command(name = "delora", version)]
struct Cli {
    /// Featurizer dimension for text CSVs. Defaults to the config's
    /// `data.csv.hash_dim` when the verb takes a config.
    #[arg(long, global = true)]
    hash_dim: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SeedArg {
    /// Run seed, mixed into the configured component seeds as in `run`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test CSVs of the configured data source.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Corrupt the labels of a dataset CSV per the config's noise section.
    InjectNoise {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        /// Noisy dataset CSV; original labels go to the true_label column.
        #[arg(long)]
        out: PathBuf,
        /// Corruption records CSV.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train the detector; writes selection.csv, epoch_logs.jsonl, detector.json.
    Detect {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Few-shot relabel every sample a selection marks noisy.
    Relabel {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 training on the selected clean samples plus relabeled ones.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        /// Relabeled CSV; without it only the clean selection is used.
        #[arg(long)]
        relabeled: Option<PathBuf>,
        /// Classifier checkpoint JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison methods.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Accuracy of a checkpoint on a dataset; with a selection, also its
    /// precision and recall against the dataset's true labels.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Full pipeline over every configured seed; writes report.json.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Grid of runs over h1, h2, detector learning rate and noise ratio.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Grid JSON, e.g. {"h2": [0.5, 1.0], "noise_ratio": [0.2, 0.4]}.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Sweep report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the summary table of a run or sweep report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Small-loss selection with a two-component GMM on per-sample losses.
    Gmm {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint whose losses are used (the combined variant of a
        /// detector). Without it a base classifier is trained for the
        /// detector's warm-up epochs.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean iff the zero-shot pseudo-label equals the observed label.
    Llm {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-entropy training on every observed label.
    Base {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks errors that should exit with the config-error code.
#[derive(Debug)]
struct ConfigFailure;

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("configuration error")
    }
}

impl std::error::Error for ConfigFailure {}

fn load_config(arg: &ConfigArg) -> anyhow::Result<ExperimentConfig> {
    let cfg = match &arg.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    };
    cfg.map_err(|e| anyhow::Error::new(e).context(ConfigFailure))
}

fn load_dataset(path: &Path, classes: Option<&[String]>, hash_dim: Option<usize>) -> anyhow::Result<Dataset> {
    let featurizer = hash_dim.map(HashingFeaturizer::new).transpose()?;
    Ok(load_csv(path, featurizer, classes)?)
}

fn hash_dim(flag: Option<usize>, cfg: &ExperimentConfig) -> Option<usize> {
    match &cfg.data {
        DataSpec::Csv(c) => flag.or(c.hash_dim),
        DataSpec::Synthetic(_) => flag,
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn stage2_config(cfg: &ExperimentConfig, seed: u64) -> Stage2Config {
    Stage2Config {
        seed: mix_seed(cfg.stage2.seed, seed),
        ..cfg.stage2.clone()
    }
}

fn save_classifier(path: &Path, seed: u64, class_names: &[String], model: delora::stage2::ClassifierModel) -> anyhow::Result<()> {
    let ck = Checkpoint {
        seed,
        class_names: class_names.to_vec(),
        model: CheckpointModel::Classifier(model),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(ck.save(path)?)
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!("{:<32} {:>10} {:>10} {:>4}", "metric", "mean", "std", "n");
    for (k, m) in &report.summary {
        println!("{k:<32} {:>10.4} {:>10.4} {:>4}", m.mean, m.std, m.n);
    }
    for s in &report.seeds {
        if let Some(f) = &s.failure {
            println!("seed {} failed in {}: {}", s.seed, f.stage, f.message);
        }
    }
}

fn print_sweep(report: &SweepReport) {
    println!(
        "{:>6} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "point", "ratio", "h1", "h2", "lr", "accuracy"
    );
    for (i, p) in report.points.iter().enumerate() {
        let acc = p.report.mean("test_accuracy").unwrap_or(f64::NAN);
        println!(
            "{i:>6} {:>8} {:>8} {:>8} {:>8} {acc:>10.4}",
            p.noise_ratio, p.h1, p.h2, p.learning_rate
        );
    }
    for b in &report.best {
        println!(
            "best at noise ratio {}: point {} ({:.4})",
            b.noise_ratio, b.point, b.mean_test_accuracy
        );
    }
}

/// Returns the number of failed seeds for verbs that run whole experiments.
fn execute(cli: Cli) -> anyhow::Result<usize> {
    let hd = cli.hash_dim;
    match cli.command {
        Command::GenData {
            config,
            train_out,
            test_out,
        } => {
            let cfg = load_config(&config)?;
            if let DataSpec::Csv(_) = cfg.data {
                return Err(anyhow::anyhow!("gen-data needs a synthetic data section").context(ConfigFailure));
            }
            let data = load_data(&cfg.data)?;
            data.train.write_csv(create(&train_out)?)?;
            data.test.write_csv(create(&test_out)?)?;
            log::info!("wrote {} train and {} test samples", data.train.len(), data.test.len());
        }
        Command::InjectNoise {
            config,
            seed,
            data,
            out,
            records,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let c = inject_noise(&ds, &cfg.noise, &cfg.noise_proxy, seed.seed)?;
            // the clean labels become the truth of the noisy file
            let truth = Dataset::new(
                ds.class_names().to_vec(),
                ds.dim(),
                ds.samples()
                    .iter()
                    .map(|s| delora::data::Sample {
                        true_label: Some(s.observed_label),
                        ..s.clone()
                    })
                    .collect(),
            )?;
            truth.with_observed_labels(&c.observed)?.write_csv(create(&out)?)?;
            if let Some(r) = records {
                write_records(&c.records, create(&r)?)?;
            }
            log::info!("achieved noise ratio {:.4}", c.achieved_ratio);
        }
        Command::Detect {
            config,
            seed,
            data,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let backend = cfg.relabeler.build(seed.seed)?;
            let det_cfg = delora::detector::DetectorConfig {
                seed: mix_seed(cfg.detector.seed, seed.seed),
                ..cfg.detector.clone()
            };
            let mask = ds.clean_mask();
            let out = train_detector(&ds, &det_cfg, cfg.ablation.objectives(), backend.as_ref(), mask.as_deref())?;
            std::fs::create_dir_all(&out_dir)?;
            write_selection(&out.selection, create(&out_dir.join("selection.csv"))?)?;
            write_epoch_logs(&out.logs, create(&out_dir.join("epoch_logs.jsonl"))?)?;
            Checkpoint {
                seed: seed.seed,
                class_names: ds.class_names().to_vec(),
                model: CheckpointModel::DualAdapter(out.model),
            }
            .save(&out_dir.join("detector.json"))?;
            log::info!("{} of {} samples selected clean", out.selection.clean_indices.len(), ds.len());
        }
        Command::Relabel {
            config,
            seed,
            data,
            selection,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let sel = read_selection(open(&selection)?)?;
            let backend = cfg.relabeler.build(seed.seed)?;
            let policy = delora::stage2::DemoPolicy {
                seed: mix_seed(cfg.demos.seed, seed.seed),
                ..cfg.demos
            };
            let rel = relabel_noisy(&sel, &ds, backend.as_ref(), policy)?;
            write_relabeled(&rel, create(&out)?)?;
        }
        Command::Train {
            config,
            seed,
            data,
            selection,
            relabeled,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let sel = read_selection(open(&selection)?)?;
            if sel.len() != ds.len() {
                bail!("selection has {} rows but the dataset has {}", sel.len(), ds.len());
            }
            let rel = match relabeled {
                Some(p) => read_relabeled(open(&p)?)?,
                None => RelabeledSet::default(),
            };
            let model = train_classifier(&ds, &sel.clean_indices, &rel, &stage2_config(&cfg, seed.seed))?;
            save_classifier(&out, seed.seed, ds.class_names(), model)?;
        }
        Command::Baseline(b) => baseline(b, hd)?,
        Command::Evaluate { model, data, selection } => {
            let ck = Checkpoint::load(&model)?;
            let ds = load_dataset(&data, Some(&ck.class_names), hd)?;
            let accuracy = match &ck.model {
                CheckpointModel::Classifier(m) => test_accuracy(m, &ds)?,
                CheckpointModel::DualAdapter(m) => test_accuracy(&m.variant(AdapterVariant::Clean), &ds)?,
            };
            let mut v = serde_json::json!({ "accuracy": accuracy, "samples": ds.len() });
            if let Some(p) = selection {
                let sel = read_selection(open(&p)?)?;
                let Some(mask) = ds.clean_mask() else {
                    bail!("{} has no true_label column", data.display());
                };
                if sel.len() != mask.len() {
                    bail!("selection has {} rows but the dataset has {}", sel.len(), mask.len());
                }
                let (precision, recall) = precision_recall(&sel.clean_indices, &mask)?;
                v["precision"] = precision.into();
                v["recall"] = recall.into();
            }
            print_json(&v)?;
        }
        Command::Run { config, output_dir } => {
            let mut cfg = load_config(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let report = run_experiment(&cfg)?;
            print_summary(&report);
            return Ok(report.failed_seeds());
        }
        Command::Sweep {
            config,
            grid,
            output_dir,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let grid: SweepGrid = serde_json::from_str(&text).map_err(|e| anyhow::Error::new(e).context(ConfigFailure))?;
            let report = sweep(&cfg, &grid)?;
            serde_json::to_writer_pretty(create(&out)?, &report)?;
            print_sweep(&report);
            return Ok(report.points.iter().map(|p| p.report.failed_seeds()).sum());
        }
        Command::Report { report } => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            match RunReport::from_json(&text) {
                Ok(r) => print_summary(&r),
                Err(run_err) => {
                    let Ok(mut s) = serde_json::from_str::<SweepReport>(&text) else {
                        return Err(run_err.into());
                    };
                    s.best = summarize_sweep(&s.points);
                    print_sweep(&s);
                }
            }
        }
    }
    Ok(0)
}

fn baseline(cmd: BaselineCommand, hd: Option<usize>) -> anyhow::Result<()> {
    match cmd {
        BaselineCommand::Gmm {
            config,
            seed,
            data,
            model,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let losses = match model {
                Some(p) => match Checkpoint::load(&p)?.model {
                    CheckpointModel::Classifier(m) => per_sample_losses(&m, &ds)?,
                    CheckpointModel::DualAdapter(m) => per_sample_losses(&m.variant(AdapterVariant::Combined), &ds)?,
                },
                None => {
                    let short = Stage2Config {
                        epochs: cfg.detector.warmup_epochs.max(1),
                        ..stage2_config(&cfg, seed.seed)
                    };
                    per_sample_losses(&train_base(&ds, &short)?, &ds)?
                }
            };
            let fit = fit_gmm_em(&losses, cfg.baselines.gmm_iters, cfg.baselines.gmm_tol)?;
            write_baseline_selection(&select_small_loss(&losses, &fit.gmm), create(&out)?)?;
        }
        BaselineCommand::Llm {
            config,
            seed,
            data,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let backend = cfg.relabeler.build(seed.seed)?;
            write_baseline_selection(&llm_detection(&ds, backend.as_ref())?, create(&out)?)?;
        }
        BaselineCommand::Base {
            config,
            seed,
            data,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data, None, hash_dim(hd, &cfg))?;
            let model = train_base(&ds, &stage2_config(&cfg, seed.seed))?;
            save_classifier(&out, seed.seed, ds.class_names(), model)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            log::error!("{failed} seed(s) failed");
            ExitCode::from(EXIT_STAGE)
        }
        Err(e) => {
            log::error!("{e:#}");
            let config = e.is::<ConfigFailure>()
                || e.chain()
                    .any(|c| c.downcast_ref::<delora::Error>().is_some_and(|d| d.is_config_error()));
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_STAGE })
        }
    }
}
