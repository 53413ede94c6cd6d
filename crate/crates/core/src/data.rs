//! Samples, synthetic Gaussian clusters, CSV ingestion and splits.
//!
//! Two CSV layouts are understood, both with a header row:
//!
//! * text: `text,label` with optional `id` and `true_label` columns. Text is
//!   featurized by [`HashingFeaturizer`].
//! * features: `f0,...,f{d-1},label` with optional `id` and `true_label`.
//!
//! Labels are class names. When every label in the file parses as a
//! non-negative integer the integer is the class index; otherwise classes are
//! numbered in order of first appearance.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv::fnv1a64;
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub observed_label: usize,
    pub true_label: Option<usize>,
    /// Raw text, kept for prompting a relabeler.
    pub text: Option<String>,
}

impl Sample {
    /// `None` when the true label is unknown.
    pub fn is_clean(&self) -> Option<bool> {
        self.true_label.map(|t| t == self.observed_label)
    }

    /// Text shown to a relabeler. Feature-only samples get a short numeric
    /// summary.
    pub fn prompt_text(&self) -> String {
        match &self.text {
            Some(t) => t.clone(),
            None => {
                let parts: Vec<String> = self.features.iter().map(|v| format!("{v:.3}")).collect();
                format!("features [{}]", parts.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let k = class_names.len();
        if k < 2 {
            return Err(Error::contract("a dataset needs at least two classes"));
        }
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::contract(format!(
                    "sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.observed_label >= k || s.true_label.is_some_and(|t| t >= k) {
                return Err(Error::contract(format!("sample {} has a label >= {k}", s.id)));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("sample {} has non-finite features", s.id)));
            }
        }
        Ok(Dataset {
            class_names,
            dim,
            samples,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.observed_label).collect()
    }

    /// True labels, if every sample has one.
    pub fn true_labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.true_label).collect()
    }

    /// Per-sample ground-truth cleanliness, if every sample has a true label.
    pub fn clean_mask(&self) -> Option<Vec<bool>> {
        self.samples.iter().map(Sample::is_clean).collect()
    }

    /// Replaces observed labels, keeping everything else.
    pub fn with_observed_labels(&self, labels: &[usize]) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::contract("label array length differs from dataset"));
        }
        let mut out = self.clone();
        for (s, &y) in out.samples.iter_mut().zip(labels) {
            if y >= self.num_classes() {
                return Err(Error::contract(format!("label {y} out of range")));
            }
            s.observed_label = y;
        }
        Ok(out)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            dim: self.dim,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Writes the text layout `id,text,label,true_label` when every sample
    /// carries text, else the feature layout `id,f0..f{d-1},label,true_label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let text = !self.samples.is_empty() && self.samples.iter().all(|s| s.text.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        if text {
            header.push("text".into());
        } else {
            header.extend((0..self.dim).map(|j| format!("f{j}")));
        }
        header.push("label".into());
        header.push("true_label".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.id.clone()];
            match &s.text {
                Some(t) if text => row.push(t.clone()),
                _ => row.extend(s.features.iter().map(|v| v.to_string())),
            }
            row.push(self.class_names[s.observed_label].clone());
            row.push(s.true_label.map(|t| self.class_names[t].clone()).unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Hashed bag-of-words: lowercase tokens split on anything that is not
/// alphanumeric, bucket `fnv1a64(token) mod dim`, counts L2-normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingFeaturizer {
    pub dim: usize,
}

impl HashingFeaturizer {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("featurizer dimension must be positive"));
        }
        Ok(HashingFeaturizer { dim })
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    /// All zeros for text without tokens.
    pub fn featurize(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in Self::tokens(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Class `k` has mean `separation * e_{k mod d}` and identity covariance.
/// Samples are ordered class by class with ids `s{index}`.
pub fn gen_gaussian_clusters(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 || n_per_class == 0 {
        return Err(Error::contract(
            "need at least 2 classes, a positive dimension and samples per class",
        ));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::contract("separation must be positive"));
    }
    let mut rng = Rng::derive(seed, "clusters");
    let mut samples = Vec::with_capacity(num_classes * n_per_class);
    for k in 0..num_classes {
        for _ in 0..n_per_class {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            x[k % dim] += separation;
            samples.push(Sample {
                id: format!("s{}", samples.len()),
                features: x,
                observed_label: k,
                true_label: Some(k),
                text: None,
            });
        }
    }
    let names = (0..num_classes).map(|k| k.to_string()).collect();
    Dataset::new(names, dim, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The standard benchmark.
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            dim: 32,
            train_per_class: 500,
            test_per_class: 100,
            separation: 3.0,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    /// Train and test sets drawn from independent streams.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let train = gen_gaussian_clusters(
            self.num_classes,
            self.dim,
            self.train_per_class,
            self.separation,
            derive_seed(self.seed, "train"),
        )?;
        let mut test = gen_gaussian_clusters(
            self.num_classes,
            self.dim,
            self.test_per_class,
            self.separation,
            derive_seed(self.seed, "test"),
        )?;
        for s in &mut test.samples {
            s.id = format!("t{}", &s.id[1..]);
        }
        Ok((train, test))
    }
}

fn ingestion(line: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        line,
        message: message.into(),
    }
}

/// Reads either CSV layout. `classes` fixes the label vocabulary (labels
/// outside it are rejected); otherwise it is inferred from the file.
pub fn read_dataset_csv<R: Read>(
    reader: R,
    featurizer: Option<HashingFeaturizer>,
    classes: Option<&[String]>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| ingestion(1, format!("unreadable header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(ingestion(1, "empty file"));
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let label_col = col("label").ok_or_else(|| ingestion(1, "missing column 'label'"))?;
    let id_col = col("id");
    let true_col = col("true_label");
    let text_col = col("text");
    let feature_cols: Vec<usize> = match text_col {
        Some(_) => Vec::new(),
        None => {
            let mut cols = Vec::new();
            while let Some(c) = col(&format!("f{}", cols.len())) {
                cols.push(c);
            }
            if cols.is_empty() {
                return Err(ingestion(1, "missing column 'text' (or feature columns f0..)"));
            }
            cols
        }
    };
    let dim = match (text_col, featurizer) {
        (Some(_), Some(f)) => f.dim,
        (Some(_), None) => return Err(Error::contract("text data needs a featurizer")),
        (None, _) => feature_cols.len(),
    };

    struct Row {
        id: String,
        features: Vec<f64>,
        label: String,
        true_label: Option<String>,
        text: Option<String>,
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ingestion(line, e.to_string()))?;
        let field = |c: usize| {
            rec.get(c)
                .map(str::to_string)
                .ok_or_else(|| ingestion(line, format!("missing field {}", c + 1)))
        };
        let label = field(label_col)?.trim().to_string();
        if label.is_empty() {
            return Err(ingestion(line, "empty label"));
        }
        let true_label = match true_col {
            Some(c) => Some(field(c)?.trim().to_string()).filter(|s| !s.is_empty()),
            None => None,
        };
        let id = match id_col {
            Some(c) => field(c)?,
            None => format!("s{i}"),
        };
        let (features, text) = match (text_col, featurizer) {
            (Some(c), Some(f)) => {
                let text = field(c)?;
                let x = f.featurize(&text);
                if x.iter().all(|&v| v == 0.0) {
                    log::warn!("line {line}: text has no tokens, using a zero vector");
                }
                (x, Some(text))
            }
            _ => {
                let mut x = Vec::with_capacity(dim);
                for &c in &feature_cols {
                    let raw = field(c)?;
                    let v: f64 = raw
                        .trim()
                        .parse()
                        .map_err(|_| ingestion(line, format!("bad feature value '{raw}'")))?;
                    if !v.is_finite() {
                        return Err(ingestion(line, "non-finite feature value"));
                    }
                    x.push(v);
                }
                (x, None)
            }
        };
        rows.push(Row {
            id,
            features,
            label,
            true_label,
            text,
        });
    }
    if rows.is_empty() {
        return Err(ingestion(2, "no data rows"));
    }

    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let all = rows
                .iter()
                .flat_map(|r| std::iter::once(&r.label).chain(r.true_label.as_ref()));
            infer_classes(all)
        }
    };
    let index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    if class_names.len() < 2 {
        return Err(ingestion(1, "fewer than two classes"));
    }
    let mut samples = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let line = i + 2;
        let lookup = |l: &str| {
            index
                .get(l)
                .copied()
                .ok_or_else(|| ingestion(line, format!("unknown label '{l}'")))
        };
        samples.push(Sample {
            id: r.id,
            features: r.features,
            observed_label: lookup(&r.label)?,
            true_label: r.true_label.as_deref().map(lookup).transpose()?,
            text: r.text,
        });
    }
    Dataset::new(class_names, dim, samples)
}

fn infer_classes<'a>(labels: impl Iterator<Item = &'a String> + Clone) -> Vec<String> {
    let ints: Option<Vec<usize>> = labels.clone().map(|l| l.parse::<usize>().ok()).collect();
    match ints {
        // Bounded so a stray huge integer cannot allocate a giant vocabulary.
        Some(v) if v.iter().all(|&i| i < 1 << 16) && v.iter().zip(labels.clone()).all(|(i, l)| i.to_string() == *l) => {
            let k = v.iter().max().map_or(0, |m| m + 1).max(2);
            (0..k).map(|i| i.to_string()).collect()
        }
        _ => {
            let mut names: Vec<String> = Vec::new();
            for l in labels {
                if !names.contains(l) {
                    names.push(l.clone());
                }
            }
            names
        }
    }
}

pub fn load_csv(
    path: &Path,
    featurizer: Option<HashingFeaturizer>,
    classes: Option<&[String]>,
) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_dataset_csv(std::io::BufReader::new(file), featurizer, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            validation: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.validation, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must lie in [0,1] and sum to 1"));
        }
        Ok(())
    }
}

/// Seeded shuffle, then contiguous train/validation/test cuts. A split with a
/// positive fraction that rounds to zero samples is an error.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(spec.seed, "split").shuffle(&mut order);
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.validation * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, frac, count) in [
        ("train", spec.train, n_train),
        ("validation", spec.validation, n_val),
        ("test", spec.test, n_test),
    ] {
        if frac > 0.0 && count == 0 {
            return Err(Error::Degenerate(format!("{name} split is empty after rounding")));
        }
    }
    Ok((
        dataset.subset(&order[..n_train]),
        dataset.subset(&order[n_train..n_train + n_val]),
        dataset.subset(&order[n_train + n_val..]),
    ))
}
