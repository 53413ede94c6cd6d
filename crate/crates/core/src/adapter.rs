//! Frozen base weight with a clean and a noisy rank-`r` adapter.
//!
//! The classifier is a single `K x d` weight applied to feature vectors
//! (no bias). Each adapter contributes `Δw = B A` with `B: K x r` and
//! `A: r x d`; only the four adapter matrices are trainable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, frobenius_distance, Matrix, Predictor, ProbVector};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterRepr", into = "AdapterRepr")]
pub struct LowRankAdapter {
    a: Matrix,
    b: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRepr {
    a: Matrix,
    b: Matrix,
}

impl TryFrom<AdapterRepr> for LowRankAdapter {
    type Error = Error;

    fn try_from(r: AdapterRepr) -> Result<Self> {
        LowRankAdapter::new(r.a, r.b)
    }
}

impl From<LowRankAdapter> for AdapterRepr {
    fn from(l: LowRankAdapter) -> Self {
        AdapterRepr { a: l.a, b: l.b }
    }
}

impl LowRankAdapter {
    /// `a` is `r x n`, `b` is `m x r`, with `1 <= r <= min(m, n)`.
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let r = a.rows();
        if b.cols() != r {
            return Err(Error::contract(format!(
                "adapter B has {} columns but A has {r} rows",
                b.cols()
            )));
        }
        if r == 0 || r > b.rows().min(a.cols()) {
            return Err(Error::contract(format!(
                "adapter rank {r} outside 1..={}",
                b.rows().min(a.cols())
            )));
        }
        Ok(LowRankAdapter { a, b })
    }

    /// `B = 0`, `A ~ N(0, init_std^2)`.
    pub fn init(m: usize, n: usize, rank: usize, init_std: f64, rng: &mut Rng) -> Result<Self> {
        let a = Matrix::gaussian(rank, n, init_std, rng);
        LowRankAdapter::new(a, Matrix::zeros(m, rank))
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(m, n)` of the update this adapter produces.
    pub fn update_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn delta(&self) -> Matrix {
        // shapes are validated at construction
        self.b.matmul(&self.a).expect("adapter shapes")
    }

    /// Gradients on `(A, B)` given the gradient `g` on the full weight.
    pub fn pullback(&self, g: &Matrix) -> (Matrix, Matrix) {
        let grad_a = self.b.transpose().matmul(g).expect("adapter shapes");
        let grad_b = g.matmul(&self.a.transpose()).expect("adapter shapes");
        (grad_a, grad_b)
    }

    pub(crate) fn step(&mut self, lr: f64, grad_a: &Matrix, grad_b: &Matrix) {
        self.a.add_scaled(-lr, grad_a).expect("adapter shapes");
        self.b.add_scaled(-lr, grad_b).expect("adapter shapes");
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [self.a.values(), self.b.values()].concat()
    }

    pub(crate) fn param_count(&self) -> usize {
        self.a.values().len() + self.b.values().len()
    }

    pub(crate) fn load_slice(&mut self, params: &[f64]) {
        let na = self.a.values().len();
        self.a.values_mut().copy_from_slice(&params[..na]);
        self.b.values_mut().copy_from_slice(&params[na..]);
    }
}

/// The pretrained weight `w0`. There is no mutable access once built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrozenBase {
    w0: Matrix,
}

impl FrozenBase {
    pub fn new(w0: Matrix) -> Self {
        FrozenBase { w0 }
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn num_classes(&self) -> usize {
        self.w0.rows()
    }

    pub fn dim(&self) -> usize {
        self.w0.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    /// `w0 + Δw_c`
    Clean,
    /// `w0 + Δw_n`
    Noisy,
    /// `w0 + Δw_c + Δw_n`
    Combined,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 3] = [
        AdapterVariant::Clean,
        AdapterVariant::Noisy,
        AdapterVariant::Combined,
    ];

    fn uses_clean(self) -> bool {
        matches!(self, AdapterVariant::Clean | AdapterVariant::Combined)
    }

    fn uses_noisy(self) -> bool {
        matches!(self, AdapterVariant::Noisy | AdapterVariant::Combined)
    }
}

impl std::fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterVariant::Clean => "clean",
            AdapterVariant::Noisy => "noisy",
            AdapterVariant::Combined => "combined",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualAdapterModel {
    base: FrozenBase,
    clean: LowRankAdapter,
    noisy: LowRankAdapter,
}

/// Gradients for the four trainable matrices. Adapters that do not take part
/// in a loss keep exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct DualGrads {
    pub clean_a: Matrix,
    pub clean_b: Matrix,
    pub noisy_a: Matrix,
    pub noisy_b: Matrix,
}

impl DualGrads {
    pub fn zeros_like(model: &DualAdapterModel) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        DualGrads {
            clean_a: z(model.clean.a()),
            clean_b: z(model.clean.b()),
            noisy_a: z(model.noisy.a()),
            noisy_b: z(model.noisy.b()),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &DualGrads) {
        let pairs = [
            (&mut self.clean_a, &other.clean_a),
            (&mut self.clean_b, &other.clean_b),
            (&mut self.noisy_a, &other.noisy_a),
            (&mut self.noisy_b, &other.noisy_b),
        ];
        for (dst, src) in pairs {
            dst.add_scaled(alpha, src).expect("gradient shapes");
        }
    }

    /// Flattened in the order of [`DualAdapterModel::to_params`].
    pub fn to_vec(&self) -> Vec<f64> {
        [
            self.clean_a.values(),
            self.clean_b.values(),
            self.noisy_a.values(),
            self.noisy_b.values(),
        ]
        .concat()
    }

    pub fn clean_norm(&self) -> f64 {
        (self.clean_a.frobenius_norm().powi(2) + self.clean_b.frobenius_norm().powi(2)).sqrt()
    }

    pub fn noisy_norm(&self) -> f64 {
        (self.noisy_a.frobenius_norm().powi(2) + self.noisy_b.frobenius_norm().powi(2)).sqrt()
    }
}

impl DualAdapterModel {
    pub fn new(base: FrozenBase, clean: LowRankAdapter, noisy: LowRankAdapter) -> Result<Self> {
        let shape = base.w0().shape();
        if clean.update_shape() != shape || noisy.update_shape() != shape {
            return Err(Error::contract("adapter update shape differs from w0"));
        }
        if clean.rank() != noisy.rank() {
            return Err(Error::contract("clean and noisy adapters differ in rank"));
        }
        Ok(DualAdapterModel { base, clean, noisy })
    }

    /// Fresh model: `w0` zero (or Gaussian when `base_init_std > 0`), both
    /// adapters with `B = 0` and Gaussian `A`.
    pub fn init(
        num_classes: usize,
        dim: usize,
        rank: usize,
        adapter_init_std: f64,
        base_init_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w0 = if base_init_std > 0.0 {
            Matrix::gaussian(num_classes, dim, base_init_std, rng)
        } else {
            Matrix::zeros(num_classes, dim)
        };
        let clean = LowRankAdapter::init(num_classes, dim, rank, adapter_init_std, rng)?;
        let noisy = LowRankAdapter::init(num_classes, dim, rank, adapter_init_std, rng)?;
        DualAdapterModel::new(FrozenBase::new(w0), clean, noisy)
    }

    pub fn base(&self) -> &FrozenBase {
        &self.base
    }

    pub fn clean(&self) -> &LowRankAdapter {
        &self.clean
    }

    pub fn noisy(&self) -> &LowRankAdapter {
        &self.noisy
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// `w0` plus the `B A` products of the adapters the variant selects.
    pub fn effective_weight(&self, variant: AdapterVariant) -> Matrix {
        let (m, n) = self.base.w0().shape();
        let mut delta = Matrix::zeros(m, n);
        if variant.uses_clean() {
            delta
                .accumulate_product(self.clean.b(), self.clean.a())
                .expect("adapter shapes");
        }
        if variant.uses_noisy() {
            delta
                .accumulate_product(self.noisy.b(), self.noisy.a())
                .expect("adapter shapes");
        }
        self.base.w0().add(&delta).expect("adapter shapes")
    }

    pub fn forward(&self, x: &[f64], variant: AdapterVariant) -> Result<ProbVector> {
        let logits = self.effective_weight(variant).matvec(x)?;
        math::softmax(&logits)
    }

    /// Distributes weight-space gradients onto the adapters. `g_clean` is the
    /// gradient reaching `Δw_c`, `g_noisy` the one reaching `Δw_n`.
    pub fn pullback(&self, g_clean: &Matrix, g_noisy: &Matrix) -> DualGrads {
        let (clean_a, clean_b) = self.clean.pullback(g_clean);
        let (noisy_a, noisy_b) = self.noisy.pullback(g_noisy);
        DualGrads {
            clean_a,
            clean_b,
            noisy_a,
            noisy_b,
        }
    }

    /// Plain gradient step `θ -= lr * grad` on the four adapter matrices.
    pub fn sgd_step(&mut self, lr: f64, grads: &DualGrads) {
        self.clean.step(lr, &grads.clean_a, &grads.clean_b);
        self.noisy.step(lr, &grads.noisy_a, &grads.noisy_b);
    }

    /// Adapter parameters as one vector: clean A, clean B, noisy A, noisy B.
    pub fn to_params(&self) -> Vec<f64> {
        [self.clean.to_vec(), self.noisy.to_vec()].concat()
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let nc = self.clean.param_count();
        if params.len() != nc + self.noisy.param_count() {
            return Err(Error::contract("parameter vector length mismatch"));
        }
        let mut out = self.clone();
        out.clean.load_slice(&params[..nc]);
        out.noisy.load_slice(&params[nc..]);
        Ok(out)
    }

    pub fn variant(&self, variant: AdapterVariant) -> VariantView<'_> {
        VariantView {
            model: self,
            variant,
            weight: self.effective_weight(variant),
        }
    }
}

/// A model viewed through one adapter configuration, with the effective weight
/// computed once.
pub struct VariantView<'a> {
    model: &'a DualAdapterModel,
    variant: AdapterVariant,
    weight: Matrix,
}

impl VariantView<'_> {
    pub fn variant(&self) -> AdapterVariant {
        self.variant
    }

    pub fn model(&self) -> &DualAdapterModel {
        self.model
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }
}

impl Predictor for VariantView<'_> {
    fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        math::softmax(&self.weight.matvec(x)?)
    }
}

/// Gradient of `CE(forward(x, variant), y)` on the adapters.
pub fn backward_ce(
    model: &DualAdapterModel,
    x: &[f64],
    y: usize,
    variant: AdapterVariant,
) -> Result<DualGrads> {
    if y >= model.num_classes() {
        return Err(Error::contract(format!("label {y} out of range")));
    }
    let probs = model.forward(x, variant)?;
    let g_logits = math::ce_logit_grad(probs.as_slice(), y);
    let (m, n) = model.base().w0().shape();
    let mut g = Matrix::zeros(m, n);
    g.add_outer(1.0, &g_logits, x);
    let zero = Matrix::zeros(m, n);
    let g_clean = if variant.uses_clean() { &g } else { &zero };
    let g_noisy = if variant.uses_noisy() { &g } else { &zero };
    Ok(model.pullback(g_clean, g_noisy))
}

/// Copies of all four adapter matrices at the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    clean: LowRankAdapter,
    noisy: LowRankAdapter,
    epoch: usize,
}

impl ParamSnapshot {
    pub fn clean(&self) -> &LowRankAdapter {
        &self.clean
    }

    pub fn noisy(&self) -> &LowRankAdapter {
        &self.noisy
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Rebuilds a model with the snapshot's adapters on the given base.
    pub fn restore(&self, base: &FrozenBase) -> Result<DualAdapterModel> {
        DualAdapterModel::new(base.clone(), self.clean.clone(), self.noisy.clone())
    }
}

pub fn take_snapshot(model: &DualAdapterModel, epoch: usize) -> ParamSnapshot {
    ParamSnapshot {
        clean: model.clean.clone(),
        noisy: model.noisy.clone(),
        epoch,
    }
}

/// `‖B_t − B_{t−1}‖_F + ‖A_t − A_{t−1}‖_F` (sum of the two norms).
pub fn param_change(current: &LowRankAdapter, previous: &LowRankAdapter) -> Result<f64> {
    Ok(frobenius_distance(current.b(), previous.b())? + frobenius_distance(current.a(), previous.a())?)
}
