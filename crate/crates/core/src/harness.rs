//! Experiment configs, the end-to-end pipeline over a list of seeds, ablation
//! switches, sweeps and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterVariant;
use crate::baselines::{
    fit_gmm_em, llm_detection, per_sample_losses, select_small_loss, train_base, write_baseline_selection,
};
use crate::checkpoint::{Checkpoint, CheckpointModel};
use crate::data::{load_csv, split, Dataset, HashingFeaturizer, SplitSpec, SyntheticSpec};
use crate::detector::{
    train_detector, write_epoch_logs, write_selection, DetectorConfig, Memorization, Objectives,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, precision_recall, test_accuracy, MeanStd};
use crate::noise::{
    apply_transition, build_asymmetric, build_symmetric, instance_dependent_corrupt, write_records, Corruption,
    NoiseKind, NoiseSpec,
};
use crate::relabel::{BackendSpec, RelabelBackend};
use crate::rng::Rng;
use crate::stage2::{
    relabel_noisy, train_classifier, write_relabeled, DemoPolicy, RelabeledSet, Stage2Config, TrainMode,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the data comes from. Serialized externally tagged:
/// `{"synthetic": {...}}` or `{"csv": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    Csv(CsvSpec),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub path: PathBuf,
    /// Separate test file; when absent, `path` is split by `split`.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Hash `text` columns into this many buckets; absent for feature CSVs.
    #[serde(default)]
    pub hash_dim: Option<usize>,
    #[serde(default)]
    pub split: SplitSpec,
}

/// Linear classifier whose mistakes drive instance-dependent noise. Kept
/// under-trained so its misclassified pool is large enough.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxySpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProxySpec {
    fn default() -> Self {
        ProxySpec {
            epochs: 2,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_l_lora: bool,
    pub no_l_detector: bool,
    pub no_l_ce: bool,
    /// Stage 2 without the relabeled noisy samples.
    pub no_ns: bool,
    /// No stage 2; the detector's clean variant is evaluated instead.
    pub no_ct: bool,
    /// No detector; plain cross-entropy training on the noisy labels.
    pub no_nld: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        let detector_flags = self.no_l_lora || self.no_l_detector || self.no_l_ce || self.no_ns || self.no_ct;
        if self.no_nld && detector_flags {
            return Err(Error::config("no_nld cannot be combined with other ablation flags"));
        }
        if self.no_ct && self.no_ns {
            return Err(Error::config("no_ns has no effect when no_ct skips stage 2"));
        }
        if self.no_l_lora && self.no_l_detector && self.no_l_ce {
            return Err(Error::config("the detector needs at least one loss term"));
        }
        Ok(())
    }

    pub fn objectives(&self) -> Objectives {
        Objectives {
            ce: !self.no_l_ce,
            lora: !self.no_l_lora,
            detector: !self.no_l_detector,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    pub enabled: bool,
    pub gmm_iters: usize,
    pub gmm_tol: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            enabled: true,
            gmm_iters: 200,
            gmm_tol: 1e-8,
        }
    }
}

fn default_noise() -> NoiseSpec {
    NoiseSpec {
        kind: NoiseKind::Symmetric,
        ratio: 0.4,
        seed: 0,
    }
}

fn default_relabeler() -> BackendSpec {
    BackendSpec::SyntheticOracle { accuracy: 0.9, seed: 0 }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub noise_proxy: ProxySpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default = "default_relabeler")]
    pub relabeler: BackendSpec,
    #[serde(default)]
    pub demos: DemoPolicy,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub baselines: BaselineSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Artifacts are written here when set.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            data: DataSpec::default(),
            noise: default_noise(),
            noise_proxy: ProxySpec::default(),
            detector: DetectorConfig::default(),
            stage2: Stage2Config::default(),
            relabeler: default_relabeler(),
            demos: DemoPolicy::default(),
            ablation: Ablation::default(),
            baselines: BaselineSpec::default(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if let DataSpec::Csv(c) = &self.data {
            c.split.validate()?;
            if c.hash_dim == Some(0) {
                return Err(Error::config("hash_dim must be positive"));
            }
        }
        if self.noise_proxy.epochs == 0 || self.noise_proxy.batch_size == 0 || !(self.noise_proxy.learning_rate > 0.0) {
            return Err(Error::config("noise_proxy needs positive epochs, batch_size and learning_rate"));
        }
        self.noise.validate()?;
        self.detector.validate()?;
        self.stage2.validate()?;
        self.relabeler.validate()?;
        self.ablation.validate()?;
        Ok(())
    }
}

/// Mixes a run seed into a configured base seed. Run seed 0 leaves it as is.
pub fn mix_seed(base: u64, run_seed: u64) -> u64 {
    base ^ run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

pub fn load_data(spec: &DataSpec) -> Result<DataSplits> {
    match spec {
        DataSpec::Synthetic(s) => {
            let (train, test) = s.generate()?;
            Ok(DataSplits {
                train,
                validation: None,
                test,
            })
        }
        DataSpec::Csv(c) => {
            let featurizer = c.hash_dim.map(HashingFeaturizer::new).transpose()?;
            let full = load_csv(&c.path, featurizer, None)?;
            match &c.test_path {
                Some(tp) => {
                    let test = load_csv(tp, featurizer, Some(full.class_names()))?;
                    Ok(DataSplits {
                        train: full,
                        validation: None,
                        test,
                    })
                }
                None => {
                    let (train, validation, test) = split(&full, &c.split)?;
                    if test.is_empty() {
                        return Err(Error::config("the split leaves no test samples"));
                    }
                    Ok(DataSplits {
                        train,
                        validation: (!validation.is_empty()).then_some(validation),
                        test,
                    })
                }
            }
        }
    }
}

/// Corrupts the observed labels of `train` per `spec`, with the run seed mixed
/// into the noise seed.
pub fn inject_noise(train: &Dataset, spec: &NoiseSpec, proxy: &ProxySpec, run_seed: u64) -> Result<Corruption> {
    spec.validate()?;
    let seed = mix_seed(spec.seed, run_seed);
    let mut rng = Rng::derive(seed, "noise");
    let labels = train.observed_labels();
    let k = train.num_classes();
    match spec.kind {
        NoiseKind::Symmetric => apply_transition(&labels, &build_symmetric(k, spec.ratio)?, &mut rng),
        NoiseKind::Asymmetric => apply_transition(&labels, &build_asymmetric(k, spec.ratio)?, &mut rng),
        NoiseKind::InstanceDependent => {
            let cfg = Stage2Config {
                epochs: proxy.epochs,
                learning_rate: proxy.learning_rate,
                batch_size: proxy.batch_size,
                seed: crate::rng::derive_seed(seed, "noise/proxy"),
                ..Stage2Config::default()
            };
            let model = train_base(train, &cfg)?;
            let features: Vec<Vec<f64>> = train.samples().iter().map(|s| s.features.clone()).collect();
            instance_dependent_corrupt(&features, &labels, &model, spec.ratio, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub small_loss_precision: Option<f64>,
    pub small_loss_recall: Option<f64>,
    pub llm_precision: Option<f64>,
    pub llm_recall: Option<f64>,
    pub base_noisy_accuracy: f64,
    /// Base model on the uncorrupted training labels.
    pub base_clean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub achieved_noise_ratio: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub clean_selected: Option<usize>,
    pub relabeled: Option<usize>,
    /// Fraction of relabels that recover the true label.
    pub relabel_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub memorization: Option<Memorization>,
    pub baselines: Option<BaselineMetrics>,
    pub backend_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<SeedMetrics>,
    pub failure: Option<SeedFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    /// Mean and population std over the seeds that finished.
    pub summary: BTreeMap<String, MeanStd>,
    /// Relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn failed_seeds(&self) -> usize {
        self.seeds.iter().filter(|s| s.failure.is_some()).count()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|m| m.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Artifacts {
    root: Option<PathBuf>,
    written: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let path = root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let mut buf = Vec::new();
        f(&mut buf)?;
        std::fs::write(&path, buf).map_err(|e| Error::file(&path, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

fn stage<T>(name: &'static str, r: Result<T>) -> Staged<T> {
    r.map_err(|e| (name, e))
}

fn run_seed(config: &ExperimentConfig, data: &DataSplits, seed: u64, art: &mut Artifacts) -> Staged<SeedMetrics> {
    let dir = format!("seed_{seed}");
    let corruption = stage("noise", inject_noise(&data.train, &config.noise, &config.noise_proxy, seed))?;
    let noisy = stage("noise", data.train.with_observed_labels(&corruption.observed))?;
    stage(
        "artifacts",
        art.write(&format!("{dir}/corruption.csv"), |b| write_records(&corruption.records, b)),
    )?;
    let clean_mask = noisy.clean_mask();
    let has_clean = clean_mask.as_ref().is_some_and(|m| m.iter().any(|&c| c));
    let stage2_cfg = Stage2Config {
        seed: mix_seed(config.stage2.seed, seed),
        ..config.stage2.clone()
    };
    let class_names = noisy.class_names().to_vec();
    let save_classifier = |art: &mut Artifacts, model: &crate::stage2::ClassifierModel| {
        let ck = Checkpoint {
            seed,
            class_names: class_names.clone(),
            model: CheckpointModel::Classifier(model.clone()),
        };
        art.write(&format!("{dir}/classifier.json"), |b| {
            b.extend_from_slice(ck.to_json()?.as_bytes());
            Ok(())
        })
    };

    if config.ablation.no_nld {
        let model = stage("stage2", train_base(&noisy, &stage2_cfg))?;
        stage("artifacts", save_classifier(art, &model))?;
        return Ok(SeedMetrics {
            achieved_noise_ratio: corruption.achieved_ratio,
            precision: None,
            recall: None,
            clean_selected: None,
            relabeled: None,
            relabel_accuracy: None,
            test_accuracy: stage("evaluate", test_accuracy(&model, &data.test))?,
            validation_accuracy: data
                .validation
                .as_ref()
                .map(|v| test_accuracy(&model, v))
                .transpose()
                .map_err(|e| ("evaluate", e))?,
            memorization: None,
            baselines: None,
            backend_calls: 0,
        });
    }

    let backend: Box<dyn RelabelBackend> = stage("relabeler", config.relabeler.build(seed))?;
    let det_cfg = DetectorConfig {
        seed: mix_seed(config.detector.seed, seed),
        ..config.detector.clone()
    };
    let out = stage(
        "detector",
        train_detector(
            &noisy,
            &det_cfg,
            config.ablation.objectives(),
            backend.as_ref(),
            clean_mask.as_deref(),
        ),
    )?;
    let sel = &out.selection;
    stage(
        "artifacts",
        art.write(&format!("{dir}/selection.csv"), |b| write_selection(sel, b)),
    )?;
    stage(
        "artifacts",
        art.write(&format!("{dir}/epoch_logs.jsonl"), |b| write_epoch_logs(&out.logs, b)),
    )?;
    let det_ck = Checkpoint {
        seed,
        class_names: class_names.clone(),
        model: CheckpointModel::DualAdapter(out.model.clone()),
    };
    stage(
        "artifacts",
        art.write(&format!("{dir}/detector.json"), |b| {
            b.extend_from_slice(det_ck.to_json()?.as_bytes());
            Ok(())
        }),
    )?;
    let (precision, recall) = match &clean_mask {
        Some(mask) if has_clean => {
            let (p, r) = stage("evaluate", precision_recall(&sel.clean_indices, mask))?;
            (Some(p), Some(r))
        }
        _ => (None, None),
    };

    let baselines = if config.baselines.enabled {
        Some(run_baselines(config, data, &noisy, &out, backend.as_ref(), &stage2_cfg, &dir, art)?)
    } else {
        None
    };

    let (test_acc, val_acc, relabeled) = if config.ablation.no_ct {
        let clean = out.model.variant(AdapterVariant::Clean);
        let acc = stage("evaluate", test_accuracy(&clean, &data.test))?;
        let val = data
            .validation
            .as_ref()
            .map(|v| test_accuracy(&clean, v))
            .transpose()
            .map_err(|e| ("evaluate", e))?;
        (acc, val, None)
    } else {
        let rel = if config.ablation.no_ns {
            RelabeledSet::default()
        } else {
            let policy = DemoPolicy {
                seed: mix_seed(config.demos.seed, seed),
                ..config.demos
            };
            stage("relabel", relabel_noisy(sel, &noisy, backend.as_ref(), policy))?
        };
        stage(
            "artifacts",
            art.write(&format!("{dir}/relabeled.csv"), |b| write_relabeled(&rel, b)),
        )?;
        let model = stage(
            "stage2",
            train_classifier(&noisy, &sel.clean_indices, &rel, &stage2_cfg),
        )?;
        stage("artifacts", save_classifier(art, &model))?;
        let acc = stage("evaluate", test_accuracy(&model, &data.test))?;
        let val = data
            .validation
            .as_ref()
            .map(|v| test_accuracy(&model, v))
            .transpose()
            .map_err(|e| ("evaluate", e))?;
        (acc, val, Some(rel))
    };

    let relabel_accuracy = relabeled.as_ref().filter(|r| !r.is_empty()).and_then(|r| {
        let hits = r
            .entries
            .iter()
            .map(|&(i, y)| noisy.sample(i).true_label.map(|t| t == y))
            .collect::<Option<Vec<bool>>>()?;
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    });

    Ok(SeedMetrics {
        achieved_noise_ratio: corruption.achieved_ratio,
        precision,
        recall,
        clean_selected: Some(sel.clean_indices.len()),
        relabeled: relabeled.as_ref().map(|r| r.len()),
        relabel_accuracy,
        test_accuracy: test_acc,
        validation_accuracy: val_acc,
        memorization: out.logs.last().and_then(|l| l.memorization),
        baselines,
        backend_calls: backend.backend_calls(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_baselines(
    config: &ExperimentConfig,
    data: &DataSplits,
    noisy: &Dataset,
    out: &crate::detector::DetectorOutput,
    backend: &dyn RelabelBackend,
    stage2_cfg: &Stage2Config,
    dir: &str,
    art: &mut Artifacts,
) -> Staged<BaselineMetrics> {
    let mask = noisy.clean_mask().filter(|m| m.iter().any(|&c| c));
    let pr = |clean: &[usize]| -> Staged<(Option<f64>, Option<f64>)> {
        match &mask {
            Some(m) => {
                let (p, r) = stage("evaluate", precision_recall(clean, m))?;
                Ok((Some(p), Some(r)))
            }
            None => Ok((None, None)),
        }
    };

    let warm = stage("baseline", out.warmup_snapshot.restore(out.model.base()))?;
    let losses = stage(
        "baseline",
        per_sample_losses(&warm.variant(AdapterVariant::Combined), noisy),
    )?;
    let (sl_p, sl_r) = match fit_gmm_em(&losses, config.baselines.gmm_iters, config.baselines.gmm_tol) {
        Ok(fit) => {
            let sl = select_small_loss(&losses, &fit.gmm);
            stage(
                "artifacts",
                art.write(&format!("{dir}/small_loss.csv"), |b| write_baseline_selection(&sl, b)),
            )?;
            pr(&sl.clean_indices)?
        }
        Err(Error::Degenerate(msg)) => {
            log::warn!("small-loss baseline skipped: {msg}");
            (None, None)
        }
        Err(e) => return Err(("baseline", e)),
    };

    let llm = stage("baseline", llm_detection(noisy, backend))?;
    stage(
        "artifacts",
        art.write(&format!("{dir}/llm_detection.csv"), |b| write_baseline_selection(&llm, b)),
    )?;
    let (llm_p, llm_r) = pr(&llm.clean_indices)?;

    let base_noisy = stage("baseline", train_base(noisy, stage2_cfg))?;
    let base_clean = stage("baseline", train_base(&data.train, stage2_cfg))?;
    Ok(BaselineMetrics {
        small_loss_precision: sl_p,
        small_loss_recall: sl_r,
        llm_precision: llm_p,
        llm_recall: llm_r,
        base_noisy_accuracy: stage("evaluate", test_accuracy(&base_noisy, &data.test))?,
        base_clean_accuracy: stage("evaluate", test_accuracy(&base_clean, &data.test))?,
    })
}

fn summarize(results: &[SeedResult]) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            cols.entry(k.to_string()).or_default().push(v);
        }
    };
    for m in results.iter().filter_map(|r| r.metrics.as_ref()) {
        push("achieved_noise_ratio", Some(m.achieved_noise_ratio));
        push("precision", m.precision);
        push("recall", m.recall);
        push("test_accuracy", Some(m.test_accuracy));
        push("validation_accuracy", m.validation_accuracy);
        push("relabel_accuracy", m.relabel_accuracy);
        if let Some(mem) = &m.memorization {
            push("memorization.clean_on_clean", mem.clean_on_clean);
            push("memorization.clean_on_noisy", mem.clean_on_noisy);
            push("memorization.noisy_on_clean", mem.noisy_on_clean);
            push("memorization.noisy_on_noisy", mem.noisy_on_noisy);
        }
        if let Some(b) = &m.baselines {
            push("small_loss.precision", b.small_loss_precision);
            push("small_loss.recall", b.small_loss_recall);
            push("llm_detection.precision", b.llm_precision);
            push("llm_detection.recall", b.llm_recall);
            push("base_noisy.test_accuracy", Some(b.base_noisy_accuracy));
            push("base_clean.test_accuracy", Some(b.base_clean_accuracy));
        }
    }
    cols.into_iter()
        .filter_map(|(k, v)| mean_std(&v).map(|m| (k, m)))
        .collect()
}

/// Adapter ranks are bounded by the data shape, which is only known here.
fn check_ranks(config: &ExperimentConfig, train: &Dataset) -> Result<()> {
    let max = train.num_classes().min(train.dim());
    if !config.ablation.no_nld && config.detector.rank > max {
        return Err(Error::config(format!(
            "detector rank {} exceeds min(classes, dim) = {max}",
            config.detector.rank
        )));
    }
    if config.stage2.mode == TrainMode::Peft && config.stage2.peft_rank > max {
        return Err(Error::config(format!(
            "peft_rank {} exceeds min(classes, dim) = {max}",
            config.stage2.peft_rank
        )));
    }
    Ok(())
}

/// Runs every seed of `config`. Invalid configs and unreadable data fail the
/// whole run; a failure inside one seed is recorded and the others continue.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let data = load_data(&config.data)?;
    check_ranks(config, &data.train)?;
    let mut art = Artifacts {
        root: config.output_dir.clone(),
        written: Vec::new(),
    };
    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let result = match run_seed(config, &data, seed, &mut art) {
            Ok(m) => SeedResult {
                seed,
                metrics: Some(m),
                failure: None,
            },
            Err((stage, e)) => {
                log::error!("seed {seed} failed in {stage}: {e}");
                SeedResult {
                    seed,
                    metrics: None,
                    failure: Some(SeedFailure {
                        stage: stage.to_string(),
                        message: e.to_string(),
                    }),
                }
            }
        };
        art.write(&format!("seed_{seed}/metrics.json"), |b| {
            b.extend_from_slice(serde_json::to_string_pretty(&result)?.as_bytes());
            Ok(())
        })?;
        results.push(result);
    }
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        summary: summarize(&results),
        seeds: results,
        artifacts: Vec::new(),
        wall_clock_secs: 0.0,
    };
    art.written.push("report.json".into());
    report.artifacts = art.written.clone();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    art.write("report.json", |b| {
        b.extend_from_slice(report.to_json()?.as_bytes());
        Ok(())
    })?;
    Ok(report)
}

/// Values to sweep; an empty list keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub noise_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h1: f64,
    pub h2: f64,
    pub learning_rate: f64,
    pub noise_ratio: f64,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepBest {
    pub noise_ratio: f64,
    /// Index into `points`.
    pub point: usize,
    pub mean_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Best point by mean test accuracy for each noise ratio; the earliest
    /// point wins ties.
    pub best: Vec<SweepBest>,
}

fn or_base(values: &[f64], base: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product over the grid, in `noise_ratio`, `h1`, `h2`,
/// `learning_rate` order (the last varies fastest).
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepReport> {
    base.validate()?;
    let ratios = or_base(&grid.noise_ratio, base.noise.ratio);
    let h1s = or_base(&grid.h1, base.detector.h1);
    let h2s = or_base(&grid.h2, base.detector.h2);
    let lrs = or_base(&grid.learning_rate, base.detector.learning_rate);
    let mut configs = Vec::new();
    for &noise_ratio in &ratios {
        for &h1 in &h1s {
            for &h2 in &h2s {
                for &learning_rate in &lrs {
                    let mut cfg = base.clone();
                    cfg.noise.ratio = noise_ratio;
                    cfg.detector.h1 = h1;
                    cfg.detector.h2 = h2;
                    cfg.detector.learning_rate = learning_rate;
                    cfg.output_dir = base.output_dir.as_ref().map(|d| d.join(format!("point_{}", configs.len())));
                    cfg.validate()?;
                    configs.push(cfg);
                }
            }
        }
    }
    let mut points = Vec::with_capacity(configs.len());
    for cfg in configs {
        let report = run_experiment(&cfg)?;
        points.push(SweepPoint {
            h1: cfg.detector.h1,
            h2: cfg.detector.h2,
            learning_rate: cfg.detector.learning_rate,
            noise_ratio: cfg.noise.ratio,
            report,
        });
    }
    let best = summarize_sweep(&points);
    Ok(SweepReport { points, best })
}

pub fn summarize_sweep(points: &[SweepPoint]) -> Vec<SweepBest> {
    let mut best: Vec<SweepBest> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let Some(acc) = p.report.mean("test_accuracy") else {
            continue;
        };
        match best.iter_mut().find(|b| b.noise_ratio == p.noise_ratio) {
            Some(b) if acc > b.mean_test_accuracy => {
                b.point = i;
                b.mean_test_accuracy = acc;
            }
            Some(_) => {}
            None => best.push(SweepBest {
                noise_ratio: p.noise_ratio,
                point: i,
                mean_test_accuracy: acc,
            }),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSpec::Synthetic(SyntheticSpec {
                num_classes: 3,
                dim: 8,
                train_per_class: 60,
                test_per_class: 20,
                separation: 3.0,
                seed: 1,
            }),
            detector: DetectorConfig {
                rank: 2,
                total_epochs: 4,
                ..DetectorConfig::default()
            },
            seeds: vec![0, 1],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_json_roundtrip_and_rejections() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        let minimal = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(minimal, cfg);
        for bad in [
            r#"{}"#,
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "unknown": 0}"#,
            r#"{"schema_version": 1, "detector": {"lr": 1}}"#,
            r#"{"schema_version": 1, "seeds": []}"#,
            r#"{"schema_version": 1, "ablation": {"no_nld": true, "no_ns": true}}"#,
            r#"{"schema_version": 1, "ablation": {"no_ct": true, "no_ns": true}}"#,
            r#"{"schema_version": 1, "noise": {"kind": "symmetric", "ratio": 1.0, "seed": 0}}"#,
        ] {
            let err = ExperimentConfig::from_json(bad).unwrap_err();
            assert!(err.is_config_error(), "{bad}: {err:?}");
        }
    }

    #[test]
    fn rank_above_data_shape_is_a_config_error() {
        let mut cfg = small();
        cfg.detector.rank = 4;
        assert!(run_experiment(&cfg).unwrap_err().is_config_error());
        cfg.detector.rank = 2;
        cfg.stage2.mode = TrainMode::Peft;
        assert!(run_experiment(&cfg).unwrap_err().is_config_error());
        cfg.ablation.no_nld = true;
        cfg.stage2.peft_rank = 3;
        assert!(run_experiment(&cfg).is_ok());
    }

    #[test]
    fn mix_seed_identity_at_zero() {
        assert_eq!(mix_seed(42, 0), 42);
        assert_ne!(mix_seed(42, 1), mix_seed(42, 2));
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let cfg = small();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.seeds, b.seeds);
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.failed_seeds(), 0);
        for s in &a.seeds {
            let m = s.metrics.as_ref().unwrap();
            for v in [m.precision.unwrap(), m.recall.unwrap(), m.test_accuracy] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(m.baselines.is_some());
        }
        assert_eq!(a.summary["test_accuracy"].n, 2);
    }

    #[test]
    fn no_nld_equals_base_training() {
        let mut cfg = small();
        cfg.ablation.no_nld = true;
        let r = run_experiment(&cfg).unwrap();
        let data = load_data(&cfg.data).unwrap();
        for s in &r.seeds {
            let m = s.metrics.as_ref().unwrap();
            assert!(m.precision.is_none() && m.recall.is_none() && m.baselines.is_none());
            let c = inject_noise(&data.train, &cfg.noise, &cfg.noise_proxy, s.seed).unwrap();
            let noisy = data.train.with_observed_labels(&c.observed).unwrap();
            let s2 = Stage2Config {
                seed: mix_seed(cfg.stage2.seed, s.seed),
                ..cfg.stage2.clone()
            };
            let base = train_base(&noisy, &s2).unwrap();
            assert_eq!(m.test_accuracy, test_accuracy(&base, &data.test).unwrap());
        }
    }

    #[test]
    fn stage_failure_is_recorded_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.json");
        std::fs::write(&cache, "not json").unwrap();
        let mut cfg = small();
        cfg.relabeler = BackendSpec::CachedFile {
            path: cache,
            fallback: None,
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.failed_seeds(), 2);
        assert!(r.summary.is_empty());
        assert_eq!(r.seeds[0].failure.as_ref().unwrap().stage, "relabeler");
    }

    #[test]
    fn instance_dependent_noise_target_and_exhaustion() {
        let data = load_data(&DataSpec::default()).unwrap();
        let n = data.train.len();
        let mut spec = NoiseSpec {
            kind: NoiseKind::InstanceDependent,
            ratio: 0.01,
            seed: 3,
        };
        let c = inject_noise(&data.train, &spec, &ProxySpec::default(), 0).unwrap();
        assert_eq!(c.num_corrupted(), (n as f64 * 0.01).floor() as usize);
        // a linear proxy on this benchmark errs on far fewer than 40% of samples
        spec.ratio = 0.4;
        let c = inject_noise(&data.train, &spec, &ProxySpec::default(), 0).unwrap();
        assert!(c.num_corrupted() > 0 && c.num_corrupted() < 800);
        assert_eq!(c.achieved_ratio, c.num_corrupted() as f64 / n as f64);
        assert!(c.records.iter().all(|r| r.corrupted == (r.original != r.observed)));
    }

    #[test]
    fn sweep_counts_and_best() {
        let mut cfg = small();
        cfg.seeds = vec![0];
        cfg.baselines.enabled = false;
        let grid = SweepGrid {
            h2: vec![0.5, 1.0],
            noise_ratio: vec![0.2, 0.4],
            ..SweepGrid::default()
        };
        let r = sweep(&cfg, &grid).unwrap();
        assert_eq!(r.points.len(), 4);
        assert_eq!(r.best.len(), 2);
        for b in &r.best {
            let same: Vec<f64> = r
                .points
                .iter()
                .filter(|p| p.noise_ratio == b.noise_ratio)
                .map(|p| p.report.mean("test_accuracy").unwrap())
                .collect();
            assert_eq!(b.mean_test_accuracy, same.iter().cloned().fold(f64::MIN, f64::max));
        }
        assert_eq!(summarize_sweep(&r.points), r.best);

        let one = sweep(&cfg, &SweepGrid::default()).unwrap();
        assert_eq!(one.points.len(), 1);
        assert_eq!(one.points[0].report.seeds, run_experiment(&cfg).unwrap().seeds);
    }
}
