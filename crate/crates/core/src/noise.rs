//! Label-noise injection with ground-truth corruption records.
//!
//! Transition matrices use keep-probability `1 - ε` on the diagonal, so `ε`
//! is the expected corruption rate.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Predictor};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    InstanceDependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::config(format!("noise ratio {} outside [0, 1)", self.ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    t: Matrix,
}

impl TransitionMatrix {
    /// Checks square shape, entries in `[0,1]` and rows summing to 1.
    pub fn new(t: Matrix) -> Result<Self> {
        if t.rows() != t.cols() || t.rows() < 2 {
            return Err(Error::contract("transition matrix must be K x K with K >= 2"));
        }
        for i in 0..t.rows() {
            let row = t.row(i);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::contract(format!("row {i} has entries outside [0,1]")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("row {i} does not sum to 1")));
            }
        }
        Ok(TransitionMatrix { t })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn num_classes(&self) -> usize {
        self.t.rows()
    }

    /// Expected fraction of corrupted labels under a uniform class prior.
    pub fn mean_flip_probability(&self) -> f64 {
        let k = self.num_classes();
        (0..k).map(|i| 1.0 - self.t.get(i, i)).sum::<f64>() / k as f64
    }
}

fn check_args(k: usize, eps: f64) -> Result<()> {
    if k < 2 {
        return Err(Error::contract("need at least two classes"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("noise ratio {eps} outside [0, 1)")));
    }
    Ok(())
}

/// Diagonal `1 - ε`, every other entry `ε / (K - 1)`.
pub fn build_symmetric(k: usize, eps: f64) -> Result<TransitionMatrix> {
    check_args(k, eps)?;
    let off = eps / (k - 1) as f64;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t.set(i, j, if i == j { 1.0 - eps } else { off });
        }
    }
    TransitionMatrix::new(t)
}

/// Pairwise flips to the next class: `T[i][i] = 1 - ε`, `T[i][(i+1) % K] = ε`.
pub fn build_asymmetric(k: usize, eps: f64) -> Result<TransitionMatrix> {
    check_args(k, eps)?;
    let mut t = Matrix::zeros(k, k);
    for i in 0..k {
        t.set(i, i, 1.0 - eps);
        t.set(i, (i + 1) % k, eps);
    }
    TransitionMatrix::new(t)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub index: usize,
    pub original: usize,
    pub observed: usize,
    pub corrupted: bool,
}

impl CorruptionRecord {
    pub fn new(index: usize, original: usize, observed: usize) -> Self {
        CorruptionRecord {
            index,
            original,
            observed,
            corrupted: original != observed,
        }
    }
}

/// Result of one noise injection.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub observed: Vec<usize>,
    pub records: Vec<CorruptionRecord>,
    /// Corrupted fraction actually produced.
    pub achieved_ratio: f64,
}

impl Corruption {
    fn from_labels(original: &[usize], observed: Vec<usize>) -> Self {
        let records: Vec<CorruptionRecord> = original
            .iter()
            .zip(&observed)
            .enumerate()
            .map(|(i, (&o, &y))| CorruptionRecord::new(i, o, y))
            .collect();
        let n_bad = records.iter().filter(|r| r.corrupted).count();
        let achieved_ratio = if original.is_empty() {
            0.0
        } else {
            n_bad as f64 / original.len() as f64
        };
        Corruption {
            observed,
            records,
            achieved_ratio,
        }
    }

    pub fn num_corrupted(&self) -> usize {
        self.records.iter().filter(|r| r.corrupted).count()
    }
}

/// Redraws each label from its row of `t` by inverse-CDF sampling.
pub fn apply_transition(labels: &[usize], t: &TransitionMatrix, rng: &mut Rng) -> Result<Corruption> {
    let k = t.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let observed = labels
        .iter()
        .map(|&y| {
            let u = rng.next_f64();
            let row = t.matrix().row(y);
            let mut acc = 0.0;
            for (j, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return j;
                }
            }
            // u landed in the rounding gap at the top of the row
            row.iter().rposition(|&p| p > 0.0).unwrap_or(y)
        })
        .collect();
    Ok(Corruption::from_labels(labels, observed))
}

/// Flips samples the proxy misclassifies to the proxy's argmax, drawing them
/// in random order until `floor(n * ε)` are corrupted. If the misclassified
/// pool is smaller, all of it is used and a warning is logged.
pub fn instance_dependent_corrupt<P: Predictor + ?Sized>(
    features: &[Vec<f64>],
    labels: &[usize],
    proxy: &P,
    eps: f64,
    rng: &mut Rng,
) -> Result<Corruption> {
    if features.len() != labels.len() {
        return Err(Error::contract("features and labels differ in length"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("noise ratio {eps} outside [0, 1)")));
    }
    let n = labels.len();
    let target = (n as f64 * eps).floor() as usize;
    let mut pool = Vec::new();
    for (i, (x, &y)) in features.iter().zip(labels).enumerate() {
        let pred = proxy.predict(x)?.argmax();
        if pred != y {
            pool.push((i, pred));
        }
    }
    rng.shuffle(&mut pool);
    if pool.len() < target {
        log::warn!(
            "misclassified pool has {} samples, fewer than the {} requested; achieved ratio {:.4}",
            pool.len(),
            target,
            pool.len() as f64 / n as f64
        );
    }
    let mut observed = labels.to_vec();
    for &(i, pred) in pool.iter().take(target) {
        observed[i] = pred;
    }
    Ok(Corruption::from_labels(labels, observed))
}

/// Rebuilds the original label array from records.
pub fn reconstruct_original(records: &[CorruptionRecord]) -> Result<Vec<usize>> {
    let mut out = vec![None; records.len()];
    for r in records {
        match out.get_mut(r.index) {
            Some(slot @ None) => *slot = Some(r.original),
            _ => return Err(Error::contract(format!("record index {} duplicated or out of range", r.index))),
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
}

pub fn write_records<W: Write>(records: &[CorruptionRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `index,original,observed,corrupted` and checks that the flag agrees
/// with the labels.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<CorruptionRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<CorruptionRecord>().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion {
            line: i + 2,
            message: e.to_string(),
        })?;
        if rec.corrupted != (rec.original != rec.observed) {
            return Err(Error::Ingestion {
                line: i + 2,
                message: "corrupted flag disagrees with labels".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
