//! Stage one: train the dual-adapter detector and split the training set into
//! clean and noisy samples.
//!
//! The noisy-variant cross-entropy of a sample is its threshold `φ`. A sample
//! is clean when the clean-variant cross-entropy is below it, equivalently when
//! `p_c = sigmoid(CE_noisy - CE_clean) > 0.5`.
//!
//! Training runs `warmup_epochs` epochs of `L_ce + L_lora` and then
//! `L_ce + L_lora + L_det` until `total_epochs`. The epoch counter `t` starts
//! at 1 and runs through both phases.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::adapter::{param_change, take_snapshot, AdapterVariant, DualAdapterModel, DualGrads, ParamSnapshot};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, ce_logit_grad, ce_unchecked, Matrix, PROB_CLAMP};
use crate::metrics::{memorization_ratio, precision_recall};
use crate::relabel::{pseudo_label, RelabelBackend, RelabelRequest};
use crate::rng::Rng;

/// How the `L_lora` gradient is spread over the minibatch steps of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraGranularity {
    /// Each step carries `1 / n_batches` of the penalty gradient, so one epoch
    /// applies it once.
    Epoch,
    /// Each step carries the full penalty gradient.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub h1: f64,
    pub h2: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub negative_resample: bool,
    pub rank: usize,
    pub adapter_init_std: f64,
    /// Zero gives `w0 = 0`.
    pub base_init_std: f64,
    pub lora_granularity: LoraGranularity,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            h1: 0.5,
            h2: 2.0,
            warmup_epochs: 2,
            total_epochs: 8,
            learning_rate: 0.3,
            batch_size: 32,
            seed: 0,
            negative_resample: true,
            rank: 4,
            adapter_init_std: 0.01,
            base_init_std: 0.0,
            lora_granularity: LoraGranularity::Epoch,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.h1 > 0.0 && self.h2 > 0.0) || !self.h1.is_finite() || !self.h2.is_finite() {
            return bad("h1 and h2 must be positive");
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad("warmup_epochs must be smaller than total_epochs");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.rank == 0 {
            return bad("rank must be positive");
        }
        if !(self.adapter_init_std >= 0.0) || !(self.base_init_std >= 0.0) {
            return bad("init standard deviations must be non-negative");
        }
        Ok(())
    }
}

/// Which stage-one loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub ce: bool,
    pub lora: bool,
    pub detector: bool,
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives {
            ce: true,
            lora: true,
            detector: true,
        }
    }
}

/// `t^h1`.
pub fn tau1(t: usize, h1: f64) -> f64 {
    (t as f64).powf(h1)
}

/// `t^-h2`.
pub fn tau2(t: usize, h2: f64) -> f64 {
    (t as f64).powf(-h2)
}

/// Positive pairs (observed label agrees with a pseudo-label) and negative
/// pairs (a deliberately wrong label).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PosNegSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub clean_indices: Vec<usize>,
    pub noisy_indices: Vec<usize>,
    pub phi: Vec<f64>,
    pub p_clean: Vec<f64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn is_clean(&self, i: usize) -> bool {
        self.p_clean[i] > 0.5
    }

    /// Builds the partition from per-sample scores.
    pub fn from_scores(phi: Vec<f64>, p_clean: Vec<f64>) -> Result<Self> {
        if phi.len() != p_clean.len() {
            return Err(Error::contract("phi and p_clean differ in length"));
        }
        let (clean_indices, noisy_indices) = (0..p_clean.len()).partition(|&i| p_clean[i] > 0.5);
        Ok(SelectionResult {
            clean_indices,
            noisy_indices,
            phi,
            p_clean,
        })
    }
}

/// `CE(forward(x, Noisy), y)`.
pub fn threshold_phi(model: &DualAdapterModel, x: &[f64], y: usize) -> Result<f64> {
    math::cross_entropy(&model.forward(x, AdapterVariant::Noisy)?, y)
}

/// `sigmoid(ce_noisy - ce_clean)`, kept strictly on the correct side of 0.5
/// when the difference is nonzero but too small to survive rounding.
pub fn clean_probability_from_ce(ce_clean: f64, ce_noisy: f64) -> f64 {
    let u = ce_noisy - ce_clean;
    let p = math::sigmoid(u);
    if p == 0.5 && u > 0.0 {
        f64::from_bits(0.5f64.to_bits() + 1)
    } else if p == 0.5 && u < 0.0 {
        f64::from_bits(0.5f64.to_bits() - 1)
    } else {
        p
    }
}

pub fn clean_probability(model: &DualAdapterModel, x: &[f64], y: usize) -> Result<f64> {
    let ce_c = math::cross_entropy(&model.forward(x, AdapterVariant::Clean)?, y)?;
    let ce_n = threshold_phi(model, x, y)?;
    Ok(clean_probability_from_ce(ce_c, ce_n))
}

struct Views {
    clean: Matrix,
    noisy: Matrix,
    combined: Matrix,
}

impl Views {
    fn new(model: &DualAdapterModel) -> Self {
        Views {
            clean: model.effective_weight(AdapterVariant::Clean),
            noisy: model.effective_weight(AdapterVariant::Noisy),
            combined: model.effective_weight(AdapterVariant::Combined),
        }
    }
}

fn probs(w: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    Ok(math::softmax(&w.matvec(x)?)?.as_slice().to_vec())
}

/// Scores every sample against its observed label.
pub fn select_clean(model: &DualAdapterModel, dataset: &Dataset) -> Result<SelectionResult> {
    let views = Views::new(model);
    let mut phi = Vec::with_capacity(dataset.len());
    let mut p_clean = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let ce_c = ce_unchecked(&probs(&views.clean, &s.features)?, s.observed_label);
        let ce_n = ce_unchecked(&probs(&views.noisy, &s.features)?, s.observed_label);
        phi.push(ce_n);
        p_clean.push(clean_probability_from_ce(ce_c, ce_n));
    }
    SelectionResult::from_scores(phi, p_clean)
}

fn check_t(t: usize) -> Result<()> {
    if t < 1 {
        return Err(Error::contract("epoch index t starts at 1"));
    }
    Ok(())
}

/// `τ1(t) Δσ_c + τ2(t) Δσ_n` against the snapshot.
pub fn loss_lora(model: &DualAdapterModel, snapshot: &ParamSnapshot, t: usize, h1: f64, h2: f64) -> Result<f64> {
    check_t(t)?;
    let dc = param_change(model.clean(), snapshot.clean())?;
    let dn = param_change(model.noisy(), snapshot.noisy())?;
    Ok(tau1(t, h1) * dc + tau2(t, h2) * dn)
}

fn unit_direction(theta: &Matrix, theta0: &Matrix, tau: f64) -> Result<Matrix> {
    let mut d = theta.sub(theta0)?;
    let norm = d.frobenius_norm();
    d.scale(tau / norm.max(1e-12));
    Ok(d)
}

/// Gradient of [`loss_lora`] with the snapshot held fixed; zero at the kink.
pub fn grad_loss_lora(
    model: &DualAdapterModel,
    snapshot: &ParamSnapshot,
    t: usize,
    h1: f64,
    h2: f64,
) -> Result<DualGrads> {
    check_t(t)?;
    let (t1, t2) = (tau1(t, h1), tau2(t, h2));
    Ok(DualGrads {
        clean_a: unit_direction(model.clean().a(), snapshot.clean().a(), t1)?,
        clean_b: unit_direction(model.clean().b(), snapshot.clean().b(), t1)?,
        noisy_a: unit_direction(model.noisy().a(), snapshot.noisy().a(), t2)?,
        noisy_b: unit_direction(model.noisy().b(), snapshot.noisy().b(), t2)?,
    })
}

fn check_indices(dataset: &Dataset, idx: impl IntoIterator<Item = usize>) -> Result<()> {
    for i in idx {
        if i >= dataset.len() {
            return Err(Error::contract(format!("sample index {i} out of range")));
        }
    }
    Ok(())
}

fn ce_combined_terms(views: &Views, dataset: &Dataset, batch: &[usize], grad: Option<&mut Matrix>) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = grad;
    for &i in batch {
        let s = dataset.sample(i);
        let p = probs(&views.combined, &s.features)?;
        loss += ce_unchecked(&p, s.observed_label);
        if let Some(g) = grad.as_deref_mut() {
            g.add_outer(scale, &ce_logit_grad(&p, s.observed_label), &s.features);
        }
    }
    Ok(loss * scale)
}

/// Mean combined-variant cross-entropy over `batch`.
pub fn loss_ce_combined(model: &DualAdapterModel, dataset: &Dataset, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    check_indices(dataset, batch.iter().copied())?;
    ce_combined_terms(&Views::new(model), dataset, batch, None)
}

pub fn grad_ce_combined(model: &DualAdapterModel, dataset: &Dataset, batch: &[usize]) -> Result<DualGrads> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    check_indices(dataset, batch.iter().copied())?;
    let (k, d) = (model.num_classes(), model.dim());
    let mut g = Matrix::zeros(k, d);
    ce_combined_terms(&Views::new(model), dataset, batch, Some(&mut g))?;
    Ok(model.pullback(&g, &g))
}

fn u_bounds() -> (f64, f64) {
    let lo = (PROB_CLAMP / (1.0 - PROB_CLAMP)).ln();
    (lo, -lo)
}

/// Mean over positives of `-ln p_c` and mean over negatives of `-ln(1 - p_c)`,
/// with `p_c` clamped to `[1e-12, 1 - 1e-12]`. Empty sets contribute 0. The
/// weight-space gradients for the clean and noisy adapters are accumulated
/// into `grads` when given.
fn detector_terms(
    views: &Views,
    dataset: &Dataset,
    positives: &[usize],
    negatives: &[(usize, usize)],
    mut grads: Option<(&mut Matrix, &mut Matrix)>,
) -> Result<(f64, f64)> {
    let (lo, hi) = u_bounds();
    let mut term = |i: usize, y: usize, positive: bool, scale: f64| -> Result<f64> {
        let x = &dataset.sample(i).features;
        let pc = probs(&views.clean, x)?;
        let pn = probs(&views.noisy, x)?;
        let u = ce_unchecked(&pn, y) - ce_unchecked(&pc, y);
        let uc = u.clamp(lo, hi);
        // loss as a function of u, and its derivative
        let (loss, dl_du) = if positive {
            (math::softplus(-uc), -(1.0 - math::sigmoid(uc)))
        } else {
            (math::softplus(uc), math::sigmoid(uc))
        };
        if let Some((gc, gn)) = grads.as_mut() {
            if (lo..=hi).contains(&u) {
                // u = ce_n - ce_c
                gc.add_outer(-dl_du * scale, &ce_logit_grad(&pc, y), x);
                gn.add_outer(dl_du * scale, &ce_logit_grad(&pn, y), x);
            }
        }
        Ok(loss)
    };
    let mut pos = 0.0;
    if !positives.is_empty() {
        let scale = 1.0 / positives.len() as f64;
        for &i in positives {
            pos += term(i, dataset.sample(i).observed_label, true, scale)?;
        }
        pos *= scale;
    }
    let mut neg = 0.0;
    if !negatives.is_empty() {
        let scale = 1.0 / negatives.len() as f64;
        for &(i, y) in negatives {
            neg += term(i, y, false, scale)?;
        }
        neg *= scale;
    }
    Ok((pos, neg))
}

fn check_sets(dataset: &Dataset, sets: &PosNegSets) -> Result<()> {
    if sets.positives.is_empty() {
        return Err(Error::Undefined("detector loss needs at least one positive sample".into()));
    }
    check_indices(dataset, sets.positives.iter().copied().chain(sets.negatives.iter().map(|p| p.0)))?;
    if let Some(&(i, y)) = sets
        .negatives
        .iter()
        .find(|&&(i, y)| y >= dataset.num_classes() || y == dataset.sample(i).observed_label)
    {
        return Err(Error::contract(format!("negative label {y} for sample {i} is invalid")));
    }
    Ok(())
}

pub fn loss_detector(model: &DualAdapterModel, dataset: &Dataset, sets: &PosNegSets) -> Result<f64> {
    check_sets(dataset, sets)?;
    let (p, n) = detector_terms(&Views::new(model), dataset, &sets.positives, &sets.negatives, None)?;
    Ok(p + n)
}

pub fn grad_loss_detector(model: &DualAdapterModel, dataset: &Dataset, sets: &PosNegSets) -> Result<DualGrads> {
    check_sets(dataset, sets)?;
    let (k, d) = (model.num_classes(), model.dim());
    let (mut gc, mut gn) = (Matrix::zeros(k, d), Matrix::zeros(k, d));
    detector_terms(
        &Views::new(model),
        dataset,
        &sets.positives,
        &sets.negatives,
        Some((&mut gc, &mut gn)),
    )?;
    Ok(model.pullback(&gc, &gn))
}

/// Zero-shot pseudo-label per sample; `None` where the backend gave up.
pub fn compute_pseudo_labels(dataset: &Dataset, backend: &dyn RelabelBackend) -> Result<Vec<Option<usize>>> {
    let mut out = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        let text = s.prompt_text();
        let req = RelabelRequest {
            sample_id: &s.id,
            text: &text,
            options: dataset.class_names(),
            demos: &[],
            true_label: s.true_label,
        };
        match pseudo_label(backend, &req) {
            Ok(y) => out.push(Some(y)),
            Err(e @ Error::PseudoLabelUnavailable { .. }) => {
                log::warn!("{e}; excluded from the positive set");
                out.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One uniformly random wrong label per sample.
pub fn draw_negatives(dataset: &Dataset, rng: &mut Rng) -> Vec<(usize, usize)> {
    let k = dataset.num_classes();
    dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (i, rng.other_label(k, s.observed_label)))
        .collect()
}

fn positives_from(dataset: &Dataset, pseudo: &[Option<usize>]) -> Vec<usize> {
    (0..dataset.len())
        .filter(|&i| pseudo[i] == Some(dataset.sample(i).observed_label))
        .collect()
}

pub fn build_sets(dataset: &Dataset, backend: &dyn RelabelBackend, rng: &mut Rng) -> Result<PosNegSets> {
    let pseudo = compute_pseudo_labels(dataset, backend)?;
    Ok(PosNegSets {
        positives: positives_from(dataset, &pseudo),
        negatives: draw_negatives(dataset, rng),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Full,
}

/// Memorization ratios of each adapter variant on truly clean and truly
/// noisy samples. `None` where the subset is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Memorization {
    pub clean_on_clean: Option<f64>,
    pub clean_on_noisy: Option<f64>,
    pub noisy_on_clean: Option<f64>,
    pub noisy_on_noisy: Option<f64>,
    pub combined_on_clean: Option<f64>,
    pub combined_on_noisy: Option<f64>,
}

impl Memorization {
    pub fn measure(model: &DualAdapterModel, dataset: &Dataset, clean_mask: &[bool]) -> Result<Self> {
        let (clean, noisy): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| clean_mask[i]);
        let ratio = |v: AdapterVariant, subset: &[usize]| -> Result<Option<f64>> {
            if subset.is_empty() {
                return Ok(None);
            }
            memorization_ratio(&model.variant(v), dataset, subset).map(Some)
        };
        Ok(Memorization {
            clean_on_clean: ratio(AdapterVariant::Clean, &clean)?,
            clean_on_noisy: ratio(AdapterVariant::Clean, &noisy)?,
            noisy_on_clean: ratio(AdapterVariant::Noisy, &clean)?,
            noisy_on_noisy: ratio(AdapterVariant::Noisy, &noisy)?,
            combined_on_clean: ratio(AdapterVariant::Combined, &clean)?,
            combined_on_noisy: ratio(AdapterVariant::Combined, &noisy)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over the epoch's minibatches.
    pub l_ce: Option<f64>,
    /// Value at the end of the epoch against the previous epoch's snapshot.
    pub l_lora: f64,
    /// Mean over the epoch's minibatches; absent during warm-up.
    pub l_detector: Option<f64>,
    pub tau1: f64,
    pub tau2: f64,
    pub delta_sigma_clean: f64,
    pub delta_sigma_noisy: f64,
    pub clean_selected: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub memorization: Option<Memorization>,
}

pub struct DetectorOutput {
    pub model: DualAdapterModel,
    pub selection: SelectionResult,
    pub logs: Vec<EpochLog>,
    /// Parameters at the end of the last warm-up epoch.
    pub warmup_snapshot: ParamSnapshot,
    pub pseudo_labels: Vec<Option<usize>>,
    pub positives: Vec<usize>,
}

/// Trains a fresh detector on `dataset`. `clean_mask`, when known, only feeds
/// the per-epoch diagnostics.
pub fn train_detector(
    dataset: &Dataset,
    config: &DetectorConfig,
    objectives: Objectives,
    backend: &dyn RelabelBackend,
    clean_mask: Option<&[bool]>,
) -> Result<DetectorOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if clean_mask.is_some_and(|m| m.len() != dataset.len()) {
        return Err(Error::contract("clean mask length differs from dataset"));
    }
    let n = dataset.len();
    let mut model = DualAdapterModel::init(
        dataset.num_classes(),
        dataset.dim(),
        config.rank,
        config.adapter_init_std,
        config.base_init_std,
        &mut Rng::derive(config.seed, "detector/init"),
    )?;
    let mut shuffle_rng = Rng::derive(config.seed, "detector/shuffle");
    let mut negative_rng = Rng::derive(config.seed, "detector/negatives");

    let pseudo_labels = if objectives.detector {
        compute_pseudo_labels(dataset, backend)?
    } else {
        vec![None; n]
    };
    let positives = positives_from(dataset, &pseudo_labels);
    let mut is_positive = vec![false; n];
    for &i in &positives {
        is_positive[i] = true;
    }
    if objectives.detector && positives.is_empty() {
        log::warn!("positive set is empty; the detector loss keeps only its negative term");
    }

    let mut snapshot = take_snapshot(&model, 0);
    let mut warmup_snapshot = None;
    let mut negative_label: Option<Vec<usize>> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let n_batches = n.div_ceil(config.batch_size);
    let lora_scale = match config.lora_granularity {
        LoraGranularity::Epoch => 1.0 / n_batches as f64,
        LoraGranularity::Step => 1.0,
    };
    let mut logs = Vec::with_capacity(config.total_epochs);

    for t in 1..=config.total_epochs {
        let phase = if t <= config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Full
        };
        let det_active = phase == Phase::Full && objectives.detector;
        if det_active && (negative_label.is_none() || config.negative_resample) {
            negative_label = Some(draw_negatives(dataset, &mut negative_rng).into_iter().map(|p| p.1).collect());
        }
        shuffle_rng.shuffle(&mut order);
        let (mut ce_sum, mut det_sum) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let views = Views::new(&model);
            let (k, d) = (model.num_classes(), model.dim());
            let mut gc = Matrix::zeros(k, d);
            let mut gn = Matrix::zeros(k, d);
            if objectives.ce {
                let mut g = Matrix::zeros(k, d);
                ce_sum += ce_combined_terms(&views, dataset, batch, Some(&mut g))?;
                gc.add_scaled(1.0, &g)?;
                gn.add_scaled(1.0, &g)?;
            }
            if det_active {
                let neg = negative_label.as_ref().expect("negatives drawn");
                let pos: Vec<usize> = batch.iter().copied().filter(|&i| is_positive[i]).collect();
                let negs: Vec<(usize, usize)> = batch.iter().map(|&i| (i, neg[i])).collect();
                let (p, q) = detector_terms(&views, dataset, &pos, &negs, Some((&mut gc, &mut gn)))?;
                det_sum += p + q;
            }
            let mut grads = model.pullback(&gc, &gn);
            if objectives.lora {
                let g = grad_loss_lora(&model, &snapshot, t, config.h1, config.h2)?;
                grads.add_scaled(lora_scale, &g);
            }
            model.sgd_step(config.learning_rate, &grads);
        }
        if !model.to_params().iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "detector parameters became non-finite in epoch {t}; lower the learning rate"
            )));
        }

        let dsc = param_change(model.clean(), snapshot.clean())?;
        let dsn = param_change(model.noisy(), snapshot.noisy())?;
        let (t1, t2) = (tau1(t, config.h1), tau2(t, config.h2));
        snapshot = take_snapshot(&model, t);
        if t == config.warmup_epochs {
            warmup_snapshot = Some(snapshot.clone());
        }
        let interim = select_clean(&model, dataset)?;
        let (precision, recall, memorization) = match clean_mask {
            Some(mask) if mask.iter().any(|&c| c) => {
                let (p, r) = precision_recall(&interim.clean_indices, mask)?;
                (Some(p), Some(r), Some(Memorization::measure(&model, dataset, mask)?))
            }
            _ => (None, None, None),
        };
        let log = EpochLog {
            epoch: t,
            phase,
            l_ce: objectives.ce.then(|| ce_sum / n_batches as f64),
            l_lora: t1 * dsc + t2 * dsn,
            l_detector: det_active.then(|| det_sum / n_batches as f64),
            tau1: t1,
            tau2: t2,
            delta_sigma_clean: dsc,
            delta_sigma_noisy: dsn,
            clean_selected: interim.clean_indices.len(),
            precision,
            recall,
            memorization,
        };
        log::debug!("detector epoch {t}: {log:?}");
        logs.push(log);
    }

    let selection = select_clean(&model, dataset)?;
    let warmup_snapshot = match warmup_snapshot {
        Some(s) => s,
        // warm-up length 0: the initial parameters
        None => take_snapshot(
            &DualAdapterModel::init(
                dataset.num_classes(),
                dataset.dim(),
                config.rank,
                config.adapter_init_std,
                config.base_init_std,
                &mut Rng::derive(config.seed, "detector/init"),
            )?,
            0,
        ),
    };
    Ok(DetectorOutput {
        model,
        selection,
        logs,
        warmup_snapshot,
        pseudo_labels,
        positives,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionRow {
    index: usize,
    phi: f64,
    p_clean: f64,
    is_clean: bool,
}

/// `index,phi,p_clean,is_clean`.
pub fn write_selection<W: Write>(sel: &SelectionResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for i in 0..sel.len() {
        w.serialize(SelectionRow {
            index: i,
            phi: sel.phi[i],
            p_clean: sel.p_clean[i],
            is_clean: sel.is_clean(i),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Rows must be in index order `0..n` and `is_clean` must agree with
/// `p_clean > 0.5`.
pub fn read_selection<R: std::io::Read>(reader: R) -> Result<SelectionResult> {
    let mut rdr = csv::Reader::from_reader(reader);
    let (mut phi, mut p_clean) = (Vec::new(), Vec::new());
    for (i, row) in rdr.deserialize::<SelectionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Ingestion {
            line,
            message: e.to_string(),
        })?;
        let fail = |m: &str| Error::Ingestion {
            line,
            message: m.to_string(),
        };
        if row.index != i {
            return Err(fail("rows must be in index order"));
        }
        if !row.phi.is_finite() || !(0.0..=1.0).contains(&row.p_clean) {
            return Err(fail("phi must be finite and p_clean in [0,1]"));
        }
        if row.is_clean != (row.p_clean > 0.5) {
            return Err(fail("is_clean disagrees with p_clean"));
        }
        phi.push(row.phi);
        p_clean.push(row.p_clean);
    }
    SelectionResult::from_scores(phi, p_clean)
}

/// One JSON object per line.
pub fn write_epoch_logs<W: Write>(logs: &[EpochLog], mut writer: W) -> Result<()> {
    for log in logs {
        serde_json::to_writer(&mut writer, log)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_epoch_logs<R: BufRead>(reader: R) -> Result<Vec<EpochLog>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{FrozenBase, LowRankAdapter};
    use crate::data::{gen_gaussian_clusters, Sample};
    use crate::math::grad_check;
    use crate::relabel::SyntheticOracle;

    fn random_model(seed: u64, k: usize, d: usize) -> DualAdapterModel {
        let mut rng = Rng::new(seed);
        let adapter = |rng: &mut Rng| {
            LowRankAdapter::new(Matrix::gaussian(2, d, 0.6, rng), Matrix::gaussian(k, 2, 0.6, rng)).unwrap()
        };
        let clean = adapter(&mut rng);
        let noisy = adapter(&mut rng);
        DualAdapterModel::new(FrozenBase::new(Matrix::gaussian(k, d, 0.3, &mut rng)), clean, noisy).unwrap()
    }

    /// A model whose clean and noisy logits are fixed per class.
    fn logit_model(clean: &[f64], noisy: &[f64]) -> DualAdapterModel {
        let k = clean.len();
        let col = |v: &[f64]| Matrix::from_vec(k, 1, v.to_vec()).unwrap();
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        DualAdapterModel::new(
            FrozenBase::new(Matrix::zeros(k, 1)),
            LowRankAdapter::new(a.clone(), col(clean)).unwrap(),
            LowRankAdapter::new(a, col(noisy)).unwrap(),
        )
        .unwrap()
    }

    fn one_sample_dataset(labels: &[usize], k: usize) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| Sample {
                id: format!("s{i}"),
                features: vec![1.0],
                observed_label: y,
                true_label: Some(y),
                text: None,
            })
            .collect();
        Dataset::new((0..k).map(|c| c.to_string()).collect(), 1, samples).unwrap()
    }

    #[test]
    fn phi_examples() {
        let mut rng = Rng::new(0);
        let fresh = DualAdapterModel::init(4, 3, 1, 0.01, 0.0, &mut rng).unwrap();
        assert!((threshold_phi(&fresh, &[1.0, 2.0, 3.0], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let m = logit_model(&[0.0, 0.0], &[3f64.ln(), 0.0]);
        assert!((threshold_phi(&m, &[1.0], 1).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = logit_model(&[0.0, 0.0], &[0.0, 200.0]);
        assert!(threshold_phi(&sharp, &[1.0], 1).unwrap() < 1e-12);
    }

    #[test]
    fn clean_probability_examples() {
        assert_eq!(clean_probability_from_ce(0.7, 0.7), 0.5);
        assert!((clean_probability_from_ce(0.0, 3f64.ln()) - 0.75).abs() < 1e-15);
        // differences too small for the sigmoid to resolve
        assert!(clean_probability_from_ce(1.0, 1.0 + 1e-16 * 4.0) > 0.5);
        assert!(clean_probability_from_ce(1.0 + 4e-16, 1.0) < 0.5);
        let m = logit_model(&[3f64.ln(), 0.0], &[0.0, 0.0]);
        // CE_c = ln(4/3), CE_n = ln 2 → p = (3/4) / (3/4 + 1/2)
        assert!((clean_probability(&m, &[1.0], 0).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn selection_tie_and_hand_case() {
        let tie = logit_model(&[1.0, 0.0, 2.0], &[1.0, 0.0, 2.0]);
        let ds = one_sample_dataset(&[0, 1, 2, 0], 3);
        let sel = select_clean(&tie, &ds).unwrap();
        assert!(sel.clean_indices.is_empty());
        assert!(sel.p_clean.iter().all(|&p| p == 0.5));
        assert_eq!(sel.noisy_indices.len(), 4);

        // sample 0 (label 0): CE_c small, phi large; sample 1 (label 1): reversed
        let m = logit_model(&[2.0, 0.0], &[0.0, 1.0]);
        let ds = one_sample_dataset(&[0, 1], 2);
        let sel = select_clean(&m, &ds).unwrap();
        assert_eq!(sel.clean_indices, [0]);
        assert_eq!(sel.noisy_indices, [1]);
    }

    #[test]
    fn selection_consistency_on_random_model() {
        let ds = gen_gaussian_clusters(3, 5, 60, 1.0, 4).unwrap();
        let model = random_model(5, 3, 5);
        let sel = select_clean(&model, &ds).unwrap();
        for (i, s) in ds.samples().iter().enumerate() {
            let ce_c = math::cross_entropy(&model.forward(&s.features, AdapterVariant::Clean).unwrap(), s.observed_label).unwrap();
            let phi = threshold_phi(&model, &s.features, s.observed_label).unwrap();
            assert_eq!(phi, sel.phi[i]);
            assert_eq!(ce_c < phi, sel.p_clean[i] > 0.5);
            assert_eq!(sel.clean_indices.contains(&i), ce_c < phi);
        }
        assert_eq!(sel.clean_indices.len() + sel.noisy_indices.len(), ds.len());
    }

    #[test]
    fn lora_loss_examples() {
        let model = random_model(6, 3, 4);
        let snap = take_snapshot(&model, 0);
        assert_eq!(loss_lora(&model, &snap, 3, 0.5, 1.0).unwrap(), 0.0);
        assert!(loss_lora(&model, &snap, 0, 0.5, 1.0).is_err());
        assert_eq!(tau1(1, 3.7), 1.0);
        assert_eq!(tau2(1, 0.2), 1.0);
        assert_eq!(tau1(4, 0.5) * 2.0 + tau2(4, 1.0) * 3.0, 4.75);

        // clean moves by norm 2 (B), noisy by 3 (A)
        let base = logit_model(&[0.0, 0.0], &[0.0, 0.0]);
        let snap = take_snapshot(&base, 3);
        let moved = DualAdapterModel::new(
            base.base().clone(),
            LowRankAdapter::new(base.clean().a().clone(), Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap()).unwrap(),
            LowRankAdapter::new(Matrix::from_rows(&[vec![4.0]]).unwrap(), base.noisy().b().clone()).unwrap(),
        )
        .unwrap();
        assert_eq!(loss_lora(&moved, &snap, 4, 0.5, 1.0).unwrap(), 4.75);
        let g = grad_loss_lora(&moved, &snap, 4, 0.5, 1.0).unwrap();
        assert_eq!(g.clean_b.values(), &[2.0, 0.0]);
        assert_eq!(g.noisy_a.values(), &[0.25]);
        assert_eq!(g.clean_a.values(), &[0.0]);
    }

    #[test]
    fn lora_gradient_linear_in_tau_and_zero_at_kink() {
        let model = random_model(7, 3, 4);
        let snap = take_snapshot(&model, 0);
        let g = grad_loss_lora(&model, &snap, 2, 1.0, 1.0).unwrap();
        assert!(g.to_vec().iter().all(|&v| v == 0.0));
        let other = random_model(8, 3, 4);
        let g1 = grad_loss_lora(&other, &snap, 2, 1.0, 1.0).unwrap().to_vec();
        let g2 = grad_loss_lora(&other, &snap, 4, 1.0, 1.0).unwrap().to_vec();
        // τ1 doubles from 2 to 4 with h1 = 1
        let nc = other.clean().to_vec().len();
        for (a, b) in g1[..nc].iter().zip(&g2[..nc]) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ds = gen_gaussian_clusters(3, 4, 6, 1.0, 9).unwrap();
        let mut rng = Rng::new(10);
        for trial in 0..3 {
            let model = random_model(100 + trial, 3, 4);
            let snap = take_snapshot(&random_model(200 + trial, 3, 4), 1);
            let batch: Vec<usize> = (0..ds.len()).filter(|i| i % 2 == 0).collect();
            let sets = PosNegSets {
                positives: vec![0, 3, 5, 11],
                negatives: draw_negatives(&ds, &mut rng),
            };
            let at = |p: &[f64]| model.with_params(p).unwrap();
            let x0 = model.to_params();
            let e = grad_check(
                |p| loss_ce_combined(&at(p), &ds, &batch).unwrap(),
                |p| grad_ce_combined(&at(p), &ds, &batch).unwrap().to_vec(),
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "ce {e}");
            let e = grad_check(
                |p| loss_lora(&at(p), &snap, 3, 0.7, 1.3).unwrap(),
                |p| grad_loss_lora(&at(p), &snap, 3, 0.7, 1.3).unwrap().to_vec(),
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "lora {e}");
            let e = grad_check(
                |p| loss_detector(&at(p), &ds, &sets).unwrap(),
                |p| grad_loss_detector(&at(p), &ds, &sets).unwrap().to_vec(),
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(e < 1e-4, "detector {e}");
        }
    }

    #[test]
    fn detector_loss_examples() {
        // p_c = 0.5 for both pairs
        let m = logit_model(&[0.0, 0.0], &[0.0, 0.0]);
        let ds = one_sample_dataset(&[0], 2);
        let sets = PosNegSets {
            positives: vec![0],
            negatives: vec![(0, 1)],
        };
        assert!((loss_detector(&m, &ds, &sets).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);

        // clean variant certain of class 0, noisy variant certain of class 1
        let m = logit_model(&[100.0, -100.0], &[-100.0, 100.0]);
        let l = loss_detector(&m, &ds, &sets).unwrap();
        assert!(l < 1e-11, "{l}");
        let g = grad_loss_detector(&m, &ds, &sets).unwrap();
        assert!(g.to_vec().iter().all(|&v| v == 0.0));

        let empty = PosNegSets {
            positives: vec![],
            negatives: vec![(0, 1)],
        };
        assert!(loss_detector(&m, &ds, &empty).is_err());
        let bad_neg = PosNegSets {
            positives: vec![0],
            negatives: vec![(0, 0)],
        };
        assert!(loss_detector(&m, &ds, &bad_neg).is_err());
    }

    #[test]
    fn ce_combined_examples() {
        let mut rng = Rng::new(1);
        let fresh = DualAdapterModel::init(4, 2, 1, 0.01, 0.0, &mut rng).unwrap();
        let ds = gen_gaussian_clusters(4, 2, 2, 1.0, 0).unwrap();
        assert!((loss_ce_combined(&fresh, &ds, &[0, 3, 5]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let sharp = logit_model(&[300.0, 0.0], &[0.0, 0.0]);
        let ds1 = one_sample_dataset(&[0, 0], 2);
        assert!(loss_ce_combined(&sharp, &ds1, &[0, 1]).unwrap() < 1e-12);
        assert!(loss_ce_combined(&sharp, &ds1, &[]).is_err());
        // CE 0.2 and 0.6: p = e^-0.2 and e^-0.6 on K = 2
        let logit = |ce: f64| {
            let p: f64 = (-ce).exp();
            (p / (1.0 - p)).ln()
        };
        let a = logit_model(&[logit(0.2), 0.0], &[0.0, 0.0]);
        let b = logit_model(&[logit(0.6), 0.0], &[0.0, 0.0]);
        let mean = (loss_ce_combined(&a, &ds1, &[0]).unwrap() + loss_ce_combined(&b, &ds1, &[0]).unwrap()) / 2.0;
        assert!((mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn sets_with_oracle() {
        let ds = gen_gaussian_clusters(2, 2, 50, 1.0, 1).unwrap();
        let perfect = SyntheticOracle::new(1.0, 0).unwrap();
        let sets = build_sets(&ds, &perfect, &mut Rng::new(2)).unwrap();
        assert_eq!(sets.positives.len(), ds.len());
        for &(i, y) in &sets.negatives {
            assert_eq!(y, 1 - ds.sample(i).observed_label);
        }
        let big = gen_gaussian_clusters(4, 2, 2500, 1.0, 1).unwrap();
        let oracle = SyntheticOracle::new(0.8, 7).unwrap();
        let sets = build_sets(&big, &oracle, &mut Rng::new(2)).unwrap();
        let frac = sets.positives.len() as f64 / big.len() as f64;
        assert!((frac - 0.8).abs() < 0.012, "{frac}");
    }

    #[test]
    fn config_validation() {
        let mut c = DetectorConfig::default();
        assert!(c.validate().is_ok());
        c.total_epochs = c.warmup_epochs;
        assert!(c.validate().unwrap_err().is_config_error());
        let c = DetectorConfig { h2: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let parsed: DetectorConfig = serde_json::from_str(r#"{"h1": 1.5}"#).unwrap();
        assert_eq!(parsed.h1, 1.5);
        assert_eq!(parsed.total_epochs, 8);
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"h3": 1}"#).is_err());
    }

    #[test]
    fn duplicated_point_is_selected_clean() {
        let samples = (0..64)
            .map(|i| Sample {
                id: format!("s{i}"),
                features: vec![1.0, -0.5, 0.25],
                observed_label: 2,
                true_label: Some(2),
                text: None,
            })
            .collect();
        let ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], 3, samples).unwrap();
        let oracle = SyntheticOracle::new(1.0, 0).unwrap();
        let cfg = DetectorConfig {
            learning_rate: 0.3,
            total_epochs: 10,
            rank: 2,
            ..Default::default()
        };
        let out = train_detector(&ds, &cfg, Objectives::default(), &oracle, ds.clean_mask().as_deref()).unwrap();
        assert!(out.selection.p_clean.iter().all(|&p| p > 0.5), "{:?}", &out.selection.p_clean[..3]);
    }

    #[test]
    fn training_is_deterministic_and_logs_schedule() {
        let ds = gen_gaussian_clusters(3, 6, 40, 2.0, 3).unwrap();
        let noisy = ds
            .with_observed_labels(&ds.observed_labels().iter().enumerate().map(|(i, &y)| if i % 5 == 0 { (y + 1) % 3 } else { y }).collect::<Vec<_>>())
            .unwrap();
        let oracle = SyntheticOracle::new(0.9, 1).unwrap();
        let cfg = DetectorConfig {
            seed: 4,
            rank: 3,
            ..Default::default()
        };
        let mask = noisy.clean_mask().unwrap();
        let a = train_detector(&noisy, &cfg, Objectives::default(), &oracle, Some(&mask)).unwrap();
        let b = train_detector(&noisy, &cfg, Objectives::default(), &oracle, Some(&mask)).unwrap();
        assert_eq!(a.selection, b.selection);
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.logs.len(), 8);
        for w in a.logs.windows(2) {
            assert!(w[1].tau1 > w[0].tau1);
            assert!(w[1].tau2 < w[0].tau2);
        }
        assert!(a.logs[..2].iter().all(|l| l.phase == Phase::Warmup && l.l_detector.is_none()));
        assert!(a.logs[2..].iter().all(|l| l.phase == Phase::Full && l.l_detector.is_some()));
        assert_eq!(a.warmup_snapshot.epoch(), 2);
        assert_eq!(a.model.base().w0(), &Matrix::zeros(3, 6));

        let mut buf = Vec::new();
        write_epoch_logs(&a.logs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 8);
        assert_eq!(read_epoch_logs(buf.as_slice()).unwrap(), a.logs);
    }

    #[test]
    fn selection_csv_roundtrip() {
        let sel = SelectionResult::from_scores(vec![0.1, 2.5, 0.7], vec![0.9, 0.2, 0.5]).unwrap();
        let mut buf = Vec::new();
        write_selection(&sel, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,phi,p_clean,is_clean\n0,0.1,0.9,true\n"));
        assert_eq!(read_selection(buf.as_slice()).unwrap(), sel);
        assert!(read_selection("index,phi,p_clean,is_clean\n0,1,0.9,false\n".as_bytes()).is_err());
        assert!(read_selection("index,phi,p_clean,is_clean\n1,1,0.9,true\n".as_bytes()).is_err());
    }
}
