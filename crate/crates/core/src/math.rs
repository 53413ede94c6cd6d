//! Dense row-major matrices, softmax / cross-entropy, and a central-difference
//! gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(repr: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(repr.rows, repr.cols, repr.values)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr {
            rows: m.rows,
            cols: m.cols,
            values: m.values,
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::contract("matrix shape overflows"))?;
        if values.len() != expected {
            return Err(Error::contract(format!(
                "{rows}x{cols} matrix needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite matrix entry at {pos}")));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut crate::rng::Rng) -> Self {
        let values = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Matrix { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        out.accumulate_product(self, other)?;
        Ok(out)
    }

    /// `self += a * b`, adding the products for each entry in ascending
    /// inner-index order. Two accumulations in sequence therefore produce
    /// the same bits as one product over the concatenated inner dimension.
    pub fn accumulate_product(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.rows {
            return Err(Error::contract(format!(
                "matmul: {}x{} times {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        if self.rows != a.rows || self.cols != b.cols {
            return Err(Error::contract(format!(
                "matmul accumulator is {}x{}, product is {}x{}",
                self.rows, self.cols, a.rows, b.cols
            )));
        }
        for i in 0..a.rows {
            let out_row = &mut self.values[i * b.cols..(i + 1) * b.cols];
            for k in 0..a.cols {
                let aik = a.values[i * a.cols + k];
                let b_row = &b.values[k * b.cols..(k + 1) * b.cols];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(())
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::contract(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect())
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += alpha * o;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * u v^T` for column vector `u` (rows) and `v` (cols).
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let coef = alpha * ur;
            if coef == 0.0 {
                continue;
            }
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += coef * vc;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// `sqrt(sum (a - b)^2)`.
pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.check_same_shape(b, "frobenius_distance")?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// A categorical distribution over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("empty probability vector"));
        }
        if entries.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("probability outside [0, 1]"));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("probabilities sum to {total}")));
        }
        Ok(ProbVector(entries))
    }

    pub fn uniform(k: usize) -> Self {
        ProbVector(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::contract("softmax of empty logits"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::contract("softmax of non-finite logits"));
    }
    Ok(ProbVector(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &ProbVector, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(ce_unchecked(probs.as_slice(), label))
}

pub(crate) fn ce_unchecked(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_CLAMP).ln()
}

/// Gradient of [`cross_entropy`] of a softmax with respect to its logits:
/// `p - onehot(label)`, or zero when the clamp is active.
pub(crate) fn ce_logit_grad(probs: &[f64], label: usize) -> Vec<f64> {
    if probs[label] < PROB_CLAMP {
        return vec![0.0; probs.len()];
    }
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    g
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Anything that maps a feature vector to class probabilities.
pub trait Predictor {
    fn predict(&self, x: &[f64]) -> Result<ProbVector>;
}

/// Compares an analytic gradient against central differences.
///
/// Each coordinate is probed at `point +/- step`; the per-coordinate error is
/// `|g - g_fd| / max(1, |g|, |g_fd|)` and the maximum over coordinates is
/// returned.
pub fn grad_check<L, G>(loss_fn: L, grad_fn: G, point: &[f64], step: f64) -> Result<f64>
where
    L: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let analytic = grad_fn(point);
    if analytic.len() != point.len() {
        return Err(Error::contract(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss_fn(&probe);
        probe[i] = orig - step;
        let down = loss_fn(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[2.0], &[4.0]]));
        let c = m(&[&[1.5], &[-2.0], &[7.0]]);
        assert_eq!(matmul(&Matrix::zeros(2, 3), &c).unwrap(), Matrix::zeros(2, 1));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn matrix_rejects_bad_values() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let parsed: std::result::Result<Matrix, _> =
            serde_json::from_str(r#"{"rows":2,"cols":2,"values":[1,2,3]}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 && p[1].is_finite());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&onehot, 1).unwrap(), 0.0);
        let uniform = ProbVector::uniform(4);
        assert!((cross_entropy(&uniform, 3).unwrap() - 4f64.ln()).abs() < 1e-12);
        let clamped = cross_entropy(&onehot, 0).unwrap();
        assert!((clamped - 27.631021115928547).abs() < 1e-9);
        assert!(cross_entropy(&onehot, 3).is_err());
    }

    #[test]
    fn frobenius_examples() {
        let a = m(&[&[3.0, 4.0]]);
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(frobenius_distance(&a, &Matrix::zeros(1, 2)).unwrap(), 5.0);
        let mut rng = Rng::new(1);
        let x = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let y = Matrix::gaussian(3, 4, 1.0, &mut rng);
        assert_eq!(
            frobenius_distance(&x, &y).unwrap(),
            frobenius_distance(&y, &x).unwrap()
        );
        assert!(frobenius_distance(&x, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_wrong_gradient() {
        let point = [0.3, -1.2, 2.5];
        let loss = |t: &[f64]| 0.5 * t.iter().map(|v| v * v).sum::<f64>();
        let exact = grad_check(loss, |t: &[f64]| t.to_vec(), &point, 1e-5).unwrap();
        assert!(exact < 1e-8, "{exact}");
        // 2θ vs θ: worst coordinate θ=2.5 gives |5 - 2.5| / 5 = 0.5
        let wrong = grad_check(loss, |t: &[f64]| t.iter().map(|v| 2.0 * v).collect(), &point, 1e-5)
            .unwrap();
        assert!((wrong - 0.5).abs() < 1e-6, "{wrong}");
    }

    #[test]
    fn grad_check_softmax_ce() {
        let mut rng = Rng::new(9);
        let point: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let label = 2;
        let loss = |z: &[f64]| ce_unchecked(&softmax_unchecked(z), label);
        let grad = |z: &[f64]| ce_logit_grad(&softmax_unchecked(z), label);
        assert!(grad_check(loss, grad, &point, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn grad_check_reports_non_finite_probe() {
        let err = grad_check(
            |t: &[f64]| if t[1] > 0.5 { f64::NAN } else { t[0] },
            |_: &[f64]| vec![1.0, 0.0],
            &[0.0, 0.5],
            0.1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coordinate: 1 }));
        assert!(grad_check(|_: &[f64]| 0.0, |_: &[f64]| vec![0.0], &[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..10),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(
            logits in prop::collection::vec(-30.0f64..30.0, 2..8),
            pick in 0usize..8,
        ) {
            let p = softmax(&logits).unwrap();
            let label = pick % p.len();
            let ce = cross_entropy(&p, label).unwrap();
            prop_assert!(ce >= 0.0);
            prop_assert_eq!(ce == 0.0, p[label] == 1.0);
        }

        #[test]
        fn frobenius_triangle_inequality(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Matrix::gaussian(3, 5, 2.0, &mut rng);
            let b = Matrix::gaussian(3, 5, 2.0, &mut rng);
            let c = Matrix::gaussian(3, 5, 2.0, &mut rng);
            let ab = frobenius_distance(&a, &b).unwrap();
            let bc = frobenius_distance(&b, &c).unwrap();
            let ac = frobenius_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
