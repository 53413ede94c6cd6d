//! Selection precision/recall, accuracy and memorization ratios.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::Predictor;

/// `(|D_c ∩ clean| / |D_c|, |D_c ∩ clean| / |clean|)`. An empty selection has
/// precision 1.
pub fn precision_recall(selected: &[usize], clean_mask: &[bool]) -> Result<(f64, f64)> {
    let n_clean = clean_mask.iter().filter(|&&c| c).count();
    if n_clean == 0 {
        return Err(Error::Undefined("recall is undefined without truly clean samples".into()));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= clean_mask.len()) {
        return Err(Error::contract(format!("selected index {bad} out of range")));
    }
    let hits = selected.iter().filter(|&&i| clean_mask[i]).count();
    let precision = if selected.is_empty() {
        log::warn!("empty clean selection; precision reported as 1.0");
        1.0
    } else {
        hits as f64 / selected.len() as f64
    };
    Ok((precision, hits as f64 / n_clean as f64))
}

/// Fraction of samples whose argmax (lowest index on ties) equals the
/// observed label.
pub fn test_accuracy<P: Predictor + ?Sized>(model: &P, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::contract("accuracy on an empty test set"));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    agreement(model, test, &all)
}

/// Fraction of `subset` whose argmax equals the observed label.
pub fn memorization_ratio<P: Predictor + ?Sized>(model: &P, data: &Dataset, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Undefined("memorization ratio of an empty subset".into()));
    }
    agreement(model, data, subset)
}

fn agreement<P: Predictor + ?Sized>(model: &P, data: &Dataset, subset: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for &i in subset {
        let s = data.sample(i);
        if model.predict(&s.features)?.argmax() == s.observed_label {
            hits += 1;
        }
    }
    Ok(hits as f64 / subset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}
