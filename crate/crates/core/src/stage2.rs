//! Stage two: a fresh classifier trained on the selected clean samples with
//! cross-entropy and on relabeled noisy samples with reversed cross-entropy.
//!
//! Both losses are sums normalized by the total sample count `N`. Reversed
//! cross-entropy against a one-hot target with `log 0` replaced by `A < 0` is
//! `-A (1 - p_y)`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapter::{FrozenBase, LowRankAdapter};
use crate::data::Dataset;
use crate::detector::SelectionResult;
use crate::error::{Error, Result};
use crate::math::{self, ce_logit_grad, ce_unchecked, Matrix, Predictor, ProbVector};
use crate::relabel::{relabel_with_demos, select_demos, RelabelBackend, RelabelRequest};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every weight is trainable.
    Full,
    /// One low-rank adapter over a frozen base.
    Peft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stand-in for `log 0` in reversed cross-entropy.
    pub rce_log_zero: f64,
    pub seed: u64,
    pub use_noisy_samples: bool,
    pub mode: TrainMode,
    pub peft_rank: usize,
    pub peft_init_std: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 6,
            learning_rate: 0.1,
            batch_size: 32,
            rce_log_zero: -4.0,
            seed: 0,
            use_noisy_samples: true,
            mode: TrainMode::Full,
            peft_rank: 4,
            peft_init_std: 0.01,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("stage-2 epochs must be at least 1"));
        }
        if !(self.rce_log_zero < 0.0) || !self.rce_log_zero.is_finite() {
            return Err(Error::config("rce_log_zero must be negative"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("stage-2 learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("stage-2 batch_size must be positive"));
        }
        if self.mode == TrainMode::Peft && self.peft_rank == 0 {
            return Err(Error::config("peft_rank must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierModel {
    Full { weight: Matrix },
    Peft { base: FrozenBase, adapter: LowRankAdapter },
}

impl ClassifierModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        ClassifierModel::Full {
            weight: Matrix::zeros(num_classes, dim),
        }
    }

    pub fn weight(&self) -> Matrix {
        match self {
            ClassifierModel::Full { weight } => weight.clone(),
            ClassifierModel::Peft { base, adapter } => base.w0().add(&adapter.delta()).expect("adapter shape"),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierModel::Full { weight } => weight.rows(),
            ClassifierModel::Peft { base, .. } => base.num_classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ClassifierModel::Full { weight } => weight.cols(),
            ClassifierModel::Peft { base, .. } => base.dim(),
        }
    }

    /// Trainable parameters, flattened.
    pub fn to_params(&self) -> Vec<f64> {
        match self {
            ClassifierModel::Full { weight } => weight.values().to_vec(),
            ClassifierModel::Peft { adapter, .. } => adapter.to_vec(),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.to_params().len() {
            return Err(Error::contract("parameter vector length mismatch"));
        }
        Ok(match self {
            ClassifierModel::Full { weight } => ClassifierModel::Full {
                weight: Matrix::from_vec(weight.rows(), weight.cols(), params.to_vec())?,
            },
            ClassifierModel::Peft { base, adapter } => {
                let na = adapter.a().values().len();
                let (ar, ac) = adapter.a().shape();
                let (br, bc) = adapter.b().shape();
                ClassifierModel::Peft {
                    base: base.clone(),
                    adapter: LowRankAdapter::new(
                        Matrix::from_vec(ar, ac, params[..na].to_vec())?,
                        Matrix::from_vec(br, bc, params[na..].to_vec())?,
                    )?,
                }
            }
        })
    }

    /// Maps a weight-space gradient onto the trainable parameters.
    fn pull_back(&self, g: &Matrix) -> Vec<f64> {
        match self {
            ClassifierModel::Full { .. } => g.values().to_vec(),
            ClassifierModel::Peft { adapter, .. } => {
                let (ga, gb) = adapter.pullback(g);
                [ga.values(), gb.values()].concat()
            }
        }
    }
}

impl Predictor for ClassifierModel {
    fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        math::softmax(&self.weight().matvec(x)?)
    }
}

/// Relabeled noisy samples `(index, new label)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelabeledSet {
    pub entries: Vec<(usize, usize)>,
}

impl RelabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelabelRow {
    index: usize,
    relabel: usize,
}

/// `index,relabel` with the class index.
pub fn write_relabeled<W: Write>(set: &RelabeledSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for &(index, relabel) in &set.entries {
        w.serialize(RelabelRow { index, relabel })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_relabeled<R: Read>(reader: R) -> Result<RelabeledSet> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut entries = Vec::new();
    for (i, row) in rdr.deserialize::<RelabelRow>().enumerate() {
        let row = row.map_err(|e| Error::Ingestion {
            line: i + 2,
            message: e.to_string(),
        })?;
        entries.push((row.index, row.relabel));
    }
    Ok(RelabeledSet { entries })
}

fn check_batch(model: &ClassifierModel, dataset: &Dataset, pairs: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    if model.num_classes() != dataset.num_classes() || model.dim() != dataset.dim() {
        return Err(Error::contract("classifier shape differs from dataset"));
    }
    for (i, y) in pairs {
        if i >= dataset.len() || y >= dataset.num_classes() {
            return Err(Error::contract(format!("pair ({i}, {y}) out of range")));
        }
    }
    Ok(())
}

fn check_n(n_total: usize) -> Result<()> {
    if n_total == 0 {
        return Err(Error::contract("N_total must be positive"));
    }
    Ok(())
}

/// `(1/N) Σ CE` over clean samples with their observed labels.
pub fn loss_clean(model: &ClassifierModel, dataset: &Dataset, batch: &[usize], n_total: usize) -> Result<f64> {
    check_n(n_total)?;
    check_batch(model, dataset, batch.iter().map(|&i| (i, 0)))?;
    let w = model.weight();
    let mut sum = 0.0;
    for &i in batch {
        let s = dataset.sample(i);
        sum += ce_unchecked(&math::softmax_unchecked(&w.matvec(&s.features)?), s.observed_label);
    }
    Ok(sum / n_total as f64)
}

/// `(1/N) Σ -A (1 - p_y)` over relabeled pairs.
pub fn loss_reversed_ce(
    model: &ClassifierModel,
    dataset: &Dataset,
    batch: &[(usize, usize)],
    n_total: usize,
    log_zero: f64,
) -> Result<f64> {
    check_n(n_total)?;
    check_batch(model, dataset, batch.iter().copied())?;
    let w = model.weight();
    let mut sum = 0.0;
    for &(i, y) in batch {
        let p = math::softmax_unchecked(&w.matvec(&dataset.sample(i).features)?);
        sum += -log_zero * (1.0 - p[y]);
    }
    Ok(sum / n_total as f64)
}

/// `d/dz [-A (1 - p_y)] = A p_y (e_y - p)`.
fn rce_logit_grad(p: &[f64], y: usize, log_zero: f64) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(k, &pk)| log_zero * p[y] * (if k == y { 1.0 } else { 0.0 } - pk))
        .collect()
}

/// Weight-space gradient of `scale * (Σ CE + Σ RCE)`.
fn weight_grad(
    w: &Matrix,
    dataset: &Dataset,
    clean: &[usize],
    relabeled: &[(usize, usize)],
    scale: f64,
    log_zero: f64,
) -> Result<Matrix> {
    let mut g = Matrix::zeros(w.rows(), w.cols());
    for &i in clean {
        let s = dataset.sample(i);
        let p = math::softmax_unchecked(&w.matvec(&s.features)?);
        g.add_outer(scale, &ce_logit_grad(&p, s.observed_label), &s.features);
    }
    for &(i, y) in relabeled {
        let x = &dataset.sample(i).features;
        let p = math::softmax_unchecked(&w.matvec(x)?);
        g.add_outer(scale, &rce_logit_grad(&p, y, log_zero), x);
    }
    Ok(g)
}

/// Gradient of `loss_clean + loss_reversed_ce` on the trainable parameters.
pub fn grad_stage2(
    model: &ClassifierModel,
    dataset: &Dataset,
    clean: &[usize],
    relabeled: &[(usize, usize)],
    n_total: usize,
    log_zero: f64,
) -> Result<Vec<f64>> {
    check_n(n_total)?;
    check_batch(
        model,
        dataset,
        clean.iter().map(|&i| (i, 0)).chain(relabeled.iter().copied()),
    )?;
    let g = weight_grad(&model.weight(), dataset, clean, relabeled, 1.0 / n_total as f64, log_zero)?;
    Ok(model.pull_back(&g))
}

fn initial_model(k: usize, d: usize, config: &Stage2Config) -> Result<ClassifierModel> {
    Ok(match config.mode {
        TrainMode::Full => ClassifierModel::zeros(k, d),
        TrainMode::Peft => ClassifierModel::Peft {
            base: FrozenBase::new(Matrix::zeros(k, d)),
            adapter: LowRankAdapter::init(
                k,
                d,
                config.peft_rank,
                config.peft_init_std,
                &mut Rng::derive(config.seed, "stage2/init"),
            )?,
        },
    })
}

/// Seeded minibatch SGD on `L_clean + L_rce` over the union of both sets.
/// Each step uses the batch mean of the per-sample gradients, the unbiased
/// estimate of the full objective's gradient when `N = |D_c| + |D_o|`.
pub fn train_classifier(
    dataset: &Dataset,
    clean: &[usize],
    relabeled: &RelabeledSet,
    config: &Stage2Config,
) -> Result<ClassifierModel> {
    config.validate()?;
    if clean.is_empty() {
        return Err(Error::Degenerate("stage 2 needs at least one clean sample".into()));
    }
    let relabeled: &[(usize, usize)] = if config.use_noisy_samples {
        &relabeled.entries
    } else {
        &[]
    };
    let mut model = initial_model(dataset.num_classes(), dataset.dim(), config)?;
    check_batch(
        &model,
        dataset,
        clean.iter().map(|&i| (i, 0)).chain(relabeled.iter().copied()),
    )?;
    // clean items carry no override label
    let mut items: Vec<(usize, Option<usize>)> = clean
        .iter()
        .map(|&i| (i, None))
        .chain(relabeled.iter().map(|&(i, y)| (i, Some(y))))
        .collect();
    let mut rng = Rng::derive(config.seed, "stage2/shuffle");
    let (mut cb, mut rb) = (Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        rng.shuffle(&mut items);
        for batch in items.chunks(config.batch_size) {
            cb.clear();
            rb.clear();
            for &(i, y) in batch {
                match y {
                    None => cb.push(i),
                    Some(y) => rb.push((i, y)),
                }
            }
            let g = weight_grad(
                &model.weight(),
                dataset,
                &cb,
                &rb,
                1.0 / batch.len() as f64,
                config.rce_log_zero,
            )?;
            let grad = model.pull_back(&g);
            let params: Vec<f64> = model
                .to_params()
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - config.learning_rate * g)
                .collect();
            model = model.with_params(&params)?;
        }
    }
    if !model.to_params().iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("stage-2 weights became non-finite".into()));
    }
    Ok(model)
}

/// Cross-entropy training on every sample with its observed label.
pub fn train_base(dataset: &Dataset, config: &Stage2Config) -> Result<ClassifierModel> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    train_classifier(dataset, &all, &RelabeledSet::default(), config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoPolicy {
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DemoPolicy {
    fn default() -> Self {
        DemoPolicy { per_class: 1, seed: 0 }
    }
}

/// Few-shot relabels every sample the detector marked noisy, with
/// demonstrations drawn from the clean selection. Samples the backend cannot
/// label are dropped with a warning.
pub fn relabel_noisy(
    selection: &SelectionResult,
    dataset: &Dataset,
    backend: &dyn RelabelBackend,
    policy: DemoPolicy,
) -> Result<RelabeledSet> {
    if selection.len() != dataset.len() {
        return Err(Error::contract("selection and dataset differ in length"));
    }
    if selection.noisy_indices.is_empty() {
        return Ok(RelabeledSet::default());
    }
    let demos = if selection.clean_indices.is_empty() {
        Vec::new()
    } else {
        select_demos(
            dataset,
            &selection.clean_indices,
            policy.per_class,
            &mut Rng::derive(policy.seed, "stage2/demos"),
        )?
    };
    let mut entries = Vec::with_capacity(selection.noisy_indices.len());
    for &i in &selection.noisy_indices {
        let s = dataset.sample(i);
        let text = s.prompt_text();
        let req = RelabelRequest {
            sample_id: &s.id,
            text: &text,
            options: dataset.class_names(),
            demos: &demos,
            true_label: s.true_label,
        };
        match relabel_with_demos(backend, &req) {
            Ok(y) => entries.push((i, y)),
            Err(e @ Error::PseudoLabelUnavailable { .. }) => log::warn!("{e}; dropped from the relabeled set"),
            Err(e) => return Err(e),
        }
    }
    Ok(RelabeledSet { entries })
}
