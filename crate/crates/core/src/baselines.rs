//! Comparison selectors: small-loss selection through a two-component 1-D
//! Gaussian mixture, and direct agreement with a pseudo-labeler.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::compute_pseudo_labels;
use crate::error::{Error, Result};
use crate::math::{self, Predictor};
use crate::relabel::RelabelBackend;

pub use crate::stage2::train_base;

pub const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

impl Component {
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * (2.0 * std::f64::consts::PI * self.variance).ln() - d * d / (2.0 * self.variance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm1d {
    pub components: [Component; 2],
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Gmm1d {
    /// Index of the component with the smaller mean (0 on ties).
    pub fn low_component(&self) -> usize {
        usize::from(self.components[1].mean < self.components[0].mean)
    }

    /// Posterior of component `k` at `x`.
    pub fn posterior(&self, x: f64, k: usize) -> f64 {
        let l0 = self.components[0].log_density(x);
        let l1 = self.components[1].log_density(x);
        let (lk, other) = if k == 0 { (l0, l1) } else { (l1, l0) };
        1.0 / (1.0 + (other - lk).exp())
    }

    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .map(|&x| log_sum_exp(self.components[0].log_density(x), self.components[1].log_density(x)))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm1d,
    /// Log-likelihood after initialization and after each accepted iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(VARIANCE_FLOOR))
}

/// EM for a two-component mixture, initialized by splitting the sorted values
/// at the median. Stops after `iters` iterations or when the log-likelihood
/// gains less than `tol`. An iteration that would lower the log-likelihood
/// (only possible through rounding) is discarded and ends the fit.
pub fn fit_gmm_em(values: &[f64], iters: usize, tol: f64) -> Result<GmmFit> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("GMM input contains non-finite values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.len() < 2 || sorted.first() == sorted.last() {
        return Err(Error::Degenerate("GMM needs at least two distinct values".into()));
    }
    let half = sorted.len() / 2;
    let (lo, hi) = sorted.split_at(half);
    let (m0, v0) = moments(lo);
    let (m1, v1) = moments(hi);
    let w0 = lo.len() as f64 / sorted.len() as f64;
    let mut gmm = Gmm1d {
        components: [
            Component {
                mean: m0,
                variance: v0,
                weight: w0,
            },
            Component {
                mean: m1,
                variance: v1,
                weight: 1.0 - w0,
            },
        ],
    };
    let mut trace = vec![gmm.log_likelihood(values)];
    let mut iterations = 0;
    let n = values.len() as f64;
    for _ in 0..iters {
        let mut r_sum = [0.0; 2];
        let mut rx_sum = [0.0; 2];
        let resp: Vec<f64> = values.iter().map(|&x| gmm.posterior(x, 0)).collect();
        for (&x, &r0) in values.iter().zip(&resp) {
            r_sum[0] += r0;
            r_sum[1] += 1.0 - r0;
            rx_sum[0] += r0 * x;
            rx_sum[1] += (1.0 - r0) * x;
        }
        if r_sum.iter().any(|&r| r <= 0.0) {
            // one component lost all mass; nothing left to refine
            break;
        }
        let means = [rx_sum[0] / r_sum[0], rx_sum[1] / r_sum[1]];
        let mut var_sum = [0.0; 2];
        for (&x, &r0) in values.iter().zip(&resp) {
            var_sum[0] += r0 * (x - means[0]).powi(2);
            var_sum[1] += (1.0 - r0) * (x - means[1]).powi(2);
        }
        let next = Gmm1d {
            components: [0, 1].map(|k| Component {
                mean: means[k],
                variance: (var_sum[k] / r_sum[k]).max(VARIANCE_FLOOR),
                weight: r_sum[k] / n,
            }),
        };
        let ll = next.log_likelihood(values);
        let prev = *trace.last().expect("trace starts non-empty");
        if !(ll >= prev) {
            break;
        }
        gmm = next;
        trace.push(ll);
        iterations += 1;
        if ll - prev < tol {
            break;
        }
    }
    Ok(GmmFit {
        gmm,
        log_likelihood: trace,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    SmallLoss,
    LlmDetection,
}

impl std::fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMethod::SmallLoss => "small_loss",
            BaselineMethod::LlmDetection => "llm_detection",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSelection {
    pub method: BaselineMethod,
    pub clean_indices: Vec<usize>,
    pub noisy_indices: Vec<usize>,
    /// Clean score per sample; clean iff score > 0.5.
    pub score: Vec<f64>,
}

impl BaselineSelection {
    pub fn from_scores(method: BaselineMethod, score: Vec<f64>) -> Self {
        let (clean_indices, noisy_indices) = (0..score.len()).partition(|&i| score[i] > 0.5);
        BaselineSelection {
            method,
            clean_indices,
            noisy_indices,
            score,
        }
    }
}

/// Clean where the posterior of the lower-mean component exceeds 0.5.
pub fn select_small_loss(losses: &[f64], gmm: &Gmm1d) -> BaselineSelection {
    let low = gmm.low_component();
    let score = losses.iter().map(|&l| gmm.posterior(l, low)).collect();
    BaselineSelection::from_scores(BaselineMethod::SmallLoss, score)
}

/// Per-sample cross-entropy of `model` against observed labels.
pub fn per_sample_losses<P: Predictor + ?Sized>(model: &P, dataset: &Dataset) -> Result<Vec<f64>> {
    dataset
        .samples()
        .iter()
        .map(|s| math::cross_entropy(&model.predict(&s.features)?, s.observed_label))
        .collect()
}

/// Clean where the zero-shot pseudo-label equals the observed label. Samples
/// the backend cannot label count as noisy.
pub fn llm_detection(dataset: &Dataset, backend: &dyn RelabelBackend) -> Result<BaselineSelection> {
    let pseudo = compute_pseudo_labels(dataset, backend)?;
    let score = dataset
        .samples()
        .iter()
        .zip(&pseudo)
        .map(|(s, p)| if *p == Some(s.observed_label) { 1.0 } else { 0.0 })
        .collect();
    Ok(BaselineSelection::from_scores(BaselineMethod::LlmDetection, score))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaselineRow {
    method: BaselineMethod,
    index: usize,
    score: f64,
    is_clean: bool,
}

/// `method,index,score,is_clean`.
pub fn write_baseline_selection<W: Write>(sel: &BaselineSelection, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, &score) in sel.score.iter().enumerate() {
        w.serialize(BaselineRow {
            method: sel.method,
            index: i,
            score,
            is_clean: score > 0.5,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_baseline_selection<R: Read>(reader: R) -> Result<BaselineSelection> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut method = None;
    let mut score = Vec::new();
    for (i, row) in rdr.deserialize::<BaselineRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Ingestion {
            line,
            message: e.to_string(),
        })?;
        let fail = |m: &str| Error::Ingestion {
            line,
            message: m.to_string(),
        };
        if *method.get_or_insert(row.method) != row.method {
            return Err(fail("mixed methods in one file"));
        }
        if row.index != i || !row.score.is_finite() || row.is_clean != (row.score > 0.5) {
            return Err(fail("row out of order or inconsistent"));
        }
        score.push(row.score);
    }
    let method = method.ok_or_else(|| Error::Ingestion {
        line: 1,
        message: "no rows".into(),
    })?;
    Ok(BaselineSelection::from_scores(method, score))
}
