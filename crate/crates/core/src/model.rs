//! The quadratic-activation shallow network `f_θ(x) = Σᵢ aᵢ (wᵢᵀx)²`.
//!
//! Parameters are stored flattened as `(a₁, w₁, a₂, w₂, …)`, so the ambient
//! dimension is `m(d+1)`. Because the activation is quadratic, every
//! prediction is `xᵀQ(θ)x` with `Q(θ) = Σᵢ aᵢ wᵢ wᵢᵀ`; the Q-chart uses the
//! isometric half-vectorization of `Q` (off-diagonals weighted by √2), in
//! which predictions are linear.
//!
//! All derivatives are closed form.

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network parameters `θ = ((a₁, w₁), …, (a_m, w_m))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaJson", into = "ThetaJson")]
pub struct Theta {
    m: usize,
    d: usize,
    params: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct UnitJson {
    a: f64,
    w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaJson {
    m: usize,
    d: usize,
    units: Vec<UnitJson>,
}

impl TryFrom<ThetaJson> for Theta {
    type Error = Error;

    fn try_from(json: ThetaJson) -> Result<Self> {
        if json.units.len() != json.m {
            return Err(Error::Validation(format!("m = {} but {} units given", json.m, json.units.len())));
        }
        let a: Vec<f64> = json.units.iter().map(|u| u.a).collect();
        let w: Vec<Vec<f64>> = json.units.into_iter().map(|u| u.w).collect();
        let theta = Theta::new(&a, &w)?;
        if theta.d != json.d {
            return Err(Error::Validation(format!("d = {} but weight vectors have length {}", json.d, theta.d)));
        }
        Ok(theta)
    }
}

impl From<Theta> for ThetaJson {
    fn from(theta: Theta) -> Self {
        let units = (0..theta.m)
            .map(|i| UnitJson { a: theta.a(i), w: theta.w(i).iter().copied().collect() })
            .collect();
        ThetaJson { m: theta.m, d: theta.d, units }
    }
}

impl Theta {
    pub fn new(a: &[f64], w: &[Vec<f64>]) -> Result<Self> {
        let m = a.len();
        if m == 0 || w.len() != m {
            return Err(Error::Validation(format!("need m >= 1 units with matching weights (a: {}, w: {})", m, w.len())));
        }
        let d = w[0].len();
        if d == 0 || w.iter().any(|wi| wi.len() != d) {
            return Err(Error::Validation("weight vectors must share a positive length d".into()));
        }
        let mut params = DVector::zeros(m * (d + 1));
        for i in 0..m {
            params[i * (d + 1)] = a[i];
            for (l, &v) in w[i].iter().enumerate() {
                params[i * (d + 1) + 1 + l] = v;
            }
        }
        Theta::from_flat(m, d, params)
    }

    pub fn from_flat(m: usize, d: usize, params: DVector<f64>) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Validation(format!("need m >= 1 and d >= 1, got m = {m}, d = {d}")));
        }
        if params.len() != m * (d + 1) {
            return Err(Error::Dimension(format!("expected {} parameters for m = {m}, d = {d}, got {}", m * (d + 1), params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("parameters must be finite".into()));
        }
        Ok(Theta { m, d, params })
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        Theta { m, d, params: DVector::zeros(m * (d + 1)) }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Ambient dimension `m(d+1)`.
    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Offset of unit `i`'s `a` coefficient in the flattened vector.
    pub fn offset(&self, i: usize) -> usize {
        i * (self.d + 1)
    }

    pub fn a(&self, i: usize) -> f64 {
        self.params[self.offset(i)]
    }

    pub fn set_a(&mut self, i: usize, value: f64) {
        let o = self.offset(i);
        self.params[o] = value;
    }

    pub fn w(&self, i: usize) -> DVectorView<'_, f64> {
        self.params.rows(self.offset(i) + 1, self.d)
    }

    pub fn w_mut(&mut self, i: usize) -> DVectorViewMut<'_, f64> {
        let o = self.offset(i) + 1;
        self.params.rows_mut(o, self.d)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.params
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.params
    }

    /// Same shape, new flattened parameters (unchecked for finiteness).
    pub fn with_params(&self, params: DVector<f64>) -> Theta {
        debug_assert_eq!(params.len(), self.params.len());
        Theta { m: self.m, d: self.d, params }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    #[serde(rename = "quadratic")]
    Quadratic,
}

/// Positively homogeneous activation `σ(ct) = c^p σ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub kind: ActivationKind,
    pub degree: f64,
}

impl Activation {
    pub const fn quadratic() -> Self {
        Activation { kind: ActivationKind::Quadratic, degree: 2.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            ActivationKind::Quadratic => t * t,
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::quadratic()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Inputs `X` (one sample per row), targets or ±1 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetJson", into = "DatasetJson")]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub task: Task,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetJson {
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    task: Task,
}

impl TryFrom<DatasetJson> for Dataset {
    type Error = Error;

    fn try_from(json: DatasetJson) -> Result<Self> {
        let n = json.x.len();
        let d = json.x.first().map(Vec::len).unwrap_or(0);
        if json.x.iter().any(|r| r.len() != d) {
            return Err(Error::Validation("ragged input matrix".into()));
        }
        let flat: Vec<f64> = json.x.into_iter().flatten().collect();
        Dataset::new(DMatrix::from_row_slice(n, d, &flat), DVector::from_vec(json.y), json.task)
    }
}

impl From<Dataset> for DatasetJson {
    fn from(data: Dataset) -> Self {
        let x = data.x.row_iter().map(|r| r.iter().copied().collect()).collect();
        DatasetJson { x, y: data.y.iter().copied().collect(), task: data.task }
    }
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, task: Task) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Validation("dataset needs n >= 1 samples of dimension d >= 1".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        if task == Task::Classification {
            if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
                return Err(Error::Validation(format!("classification labels must be ±1, found {bad}")));
            }
        }
        Ok(Dataset { x, y, task })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `(1/(2n)) Σ (f − y)²`
    Squared,
    /// `(1/n) Σ log(1 + exp(−y f))`
    Logistic,
}

/// Dimension of `Sym(d)`.
pub fn sym_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Isometric half-vectorization: upper triangle row by row, off-diagonal
/// entries scaled by √2 so that `⟨vech(A), vech(B)⟩ = ⟨A, B⟩_F`.
pub fn vech(q: &DMatrix<f64>) -> DVector<f64> {
    let d = q.nrows();
    let mut out = DVector::zeros(sym_dim(d));
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            out[k] = if i == j { q[(i, i)] } else { std::f64::consts::SQRT_2 * 0.5 * (q[(i, j)] + q[(j, i)]) };
            k += 1;
        }
    }
    out
}

/// Inverse of [`vech`].
pub fn unvech(q: &DVector<f64>, d: usize) -> Result<DMatrix<f64>> {
    if q.len() != sym_dim(d) {
        return Err(Error::Dimension(format!("vech of a {d}x{d} matrix has length {}, got {}", sym_dim(d), q.len())));
    }
    let mut out = DMatrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            if i == j {
                out[(i, i)] = q[k];
            } else {
                let v = q[k] / std::f64::consts::SQRT_2;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
            k += 1;
        }
    }
    Ok(out)
}

/// `d` such that `sym_dim(d) == len`, if any.
pub fn dim_from_vech_len(len: usize) -> Option<usize> {
    (1..=len).find(|&d| sym_dim(d) == len)
}

/// A point of the Q-chart: the symmetric matrix and its isometric vech.
#[derive(Debug, Clone, PartialEq)]
pub struct QCoordinates {
    pub matrix: DMatrix<f64>,
    pub vector: DVector<f64>,
}

impl QCoordinates {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::Dimension("Q must be a non-empty square matrix".into()));
        }
        let asym = crate::numerics::max_asymmetry(&matrix);
        if asym > 1e-12 * matrix.amax().max(1.0) {
            return Err(Error::NotSymmetric { max_asymmetry: asym });
        }
        let vector = vech(&matrix);
        let matrix = unvech(&vector, matrix.nrows())?;
        Ok(QCoordinates { matrix, vector })
    }

    pub fn from_vector(vector: DVector<f64>) -> Result<Self> {
        let d = dim_from_vech_len(vector.len())
            .ok_or_else(|| Error::Dimension(format!("{} is not a triangular number", vector.len())))?;
        let matrix = unvech(&vector, d)?;
        Ok(QCoordinates { matrix, vector })
    }

    pub fn d(&self) -> usize {
        self.matrix.nrows()
    }
}

fn check_shapes(theta: &Theta, x: &DMatrix<f64>) -> Result<()> {
    if theta.d() != x.ncols() {
        return Err(Error::Dimension(format!("theta has d = {} but inputs have d = {}", theta.d(), x.ncols())));
    }
    Ok(())
}

/// Finite-sample realization `Φ_X(θ) = (f_θ(x_k))_k`.
pub fn realize(theta: &Theta, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_shapes(theta, x)?;
    let mut out = DVector::zeros(x.nrows());
    for (k, row) in x.row_iter().enumerate() {
        let mut f = 0.0;
        for i in 0..theta.m() {
            let s = row.transpose().dot(&theta.w(i));
            f += theta.a(i) * s * s;
        }
        out[k] = f;
    }
    Ok(out)
}

/// `Q(θ) = Σᵢ aᵢ wᵢ wᵢᵀ`.
pub fn q_matrix(theta: &Theta) -> QCoordinates {
    let d = theta.d();
    let mut q = DMatrix::zeros(d, d);
    for i in 0..theta.m() {
        let w = theta.w(i);
        q.ger(theta.a(i), &w, &w, 1.0);
    }
    let q = (&q + q.transpose()) * 0.5;
    let vector = vech(&q);
    QCoordinates { matrix: q, vector }
}

/// Jacobian of `θ ↦ vech(Q(θ))`, shape `d(d+1)/2 × m(d+1)`.
pub fn q_jacobian(theta: &Theta) -> DMatrix<f64> {
    let (m, d) = (theta.m(), theta.d());
    let mut jac = DMatrix::zeros(sym_dim(d), theta.dim());
    for i in 0..m {
        let o = theta.offset(i);
        let w = theta.w(i).clone_owned();
        jac.set_column(o, &vech(&(&w * w.transpose())));
        let a = theta.a(i);
        for l in 0..d {
            let mut e = DVector::zeros(d);
            e[l] = 1.0;
            let dq = (&e * w.transpose() + &w * e.transpose()) * a;
            jac.set_column(o + 1 + l, &vech(&dq));
        }
    }
    jac
}

/// Design matrix of the Q-chart: row `k` is `vech(x_k x_kᵀ)`, so that the
/// predictions are `A q`.
pub fn design_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = x.shape();
    let mut a = DMatrix::zeros(n, sym_dim(d));
    for (k, row) in x.row_iter().enumerate() {
        let xk = row.transpose();
        a.set_row(k, &vech(&(&xk * xk.transpose())).transpose());
    }
    a
}

/// Predictions from Q-coordinates, `(x_kᵀ Q x_k)_k`.
pub fn realize_q(q: &QCoordinates, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if q.d() != x.ncols() {
        return Err(Error::Dimension(format!("Q is {0}x{0} but inputs have d = {1}", q.d(), x.ncols())));
    }
    Ok(design_matrix(x) * &q.vector)
}

/// Jacobian `DΦ_X(θ)`: row `k` holds `(wᵢᵀx_k)²` in the `aᵢ` slot and
/// `2aᵢ(wᵢᵀx_k)x_k` in the `wᵢ` slots.
pub fn prediction_jacobian(theta: &Theta, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shapes(theta, x)?;
    let (n, d) = x.shape();
    let mut jac = DMatrix::zeros(n, theta.dim());
    for (k, row) in x.row_iter().enumerate() {
        for i in 0..theta.m() {
            let o = theta.offset(i);
            let s = row.transpose().dot(&theta.w(i));
            jac[(k, o)] = s * s;
            let coef = 2.0 * theta.a(i) * s;
            for l in 0..d {
                jac[(k, o + 1 + l)] = coef * row[l];
            }
        }
    }
    Ok(jac)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and its first and second derivatives with respect to each
/// prediction, normalization included.
pub(crate) struct LossTerms {
    pub value: f64,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
}

pub(crate) fn loss_terms(pred: &DVector<f64>, data: &Dataset, kind: LossKind) -> Result<LossTerms> {
    let n = data.n();
    if pred.len() != n {
        return Err(Error::Dimension(format!("{} predictions for {n} samples", pred.len())));
    }
    if kind == LossKind::Logistic {
        if let Some(bad) = data.y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::Validation(format!("logistic loss needs ±1 labels, found {bad}")));
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d1 = DVector::zeros(n);
    let mut d2 = DVector::zeros(n);
    for k in 0..n {
        let (f, y) = (pred[k], data.y[k]);
        match kind {
            LossKind::Squared => {
                let r = f - y;
                value += 0.5 * r * r;
                d1[k] = r * inv_n;
                d2[k] = inv_n;
            }
            LossKind::Logistic => {
                let margin = y * f;
                value += softplus(-margin);
                d1[k] = -y * sigmoid(-margin) * inv_n;
                d2[k] = sigmoid(margin) * sigmoid(-margin) * inv_n;
            }
        }
    }
    Ok(LossTerms { value: value * inv_n, d1, d2 })
}

/// Loss as a function of the prediction vector.
pub fn loss_from_predictions(pred: &DVector<f64>, data: &Dataset, kind: LossKind) -> Result<f64> {
    Ok(loss_terms(pred, data, kind)?.value)
}

pub fn loss(theta: &Theta, data: &Dataset, kind: LossKind) -> Result<f64> {
    loss_from_predictions(&realize(theta, &data.x)?, data, kind)
}

pub fn loss_q(q: &QCoordinates, data: &Dataset, kind: LossKind) -> Result<f64> {
    loss_from_predictions(&realize_q(q, &data.x)?, data, kind)
}

pub fn grad_theta(theta: &Theta, data: &Dataset, kind: LossKind) -> Result<DVector<f64>> {
    let pred = realize(theta, &data.x)?;
    let terms = loss_terms(&pred, data, kind)?;
    let jac = prediction_jacobian(theta, &data.x)?;
    Ok(jac.transpose() * terms.d1)
}

/// Loss and gradient in one pass.
pub fn loss_and_grad_theta(theta: &Theta, data: &Dataset, kind: LossKind) -> Result<(f64, DVector<f64>)> {
    let pred = realize(theta, &data.x)?;
    let terms = loss_terms(&pred, data, kind)?;
    let jac = prediction_jacobian(theta, &data.x)?;
    Ok((terms.value, jac.transpose() * terms.d1))
}

/// Exact Hessian in θ: Gauss–Newton part `Jᵀ diag(ℓ″) J` plus the
/// per-sample curvature of the predictions weighted by `ℓ′`.
pub fn hess_theta(theta: &Theta, data: &Dataset, kind: LossKind) -> Result<DMatrix<f64>> {
    let pred = realize(theta, &data.x)?;
    let terms = loss_terms(&pred, data, kind)?;
    let jac = prediction_jacobian(theta, &data.x)?;
    let weighted = DMatrix::from_fn(jac.nrows(), jac.ncols(), |k, j| jac[(k, j)] * terms.d2[k]);
    let mut hess = jac.transpose() * weighted;
    let d = theta.d();
    for (k, row) in data.x.row_iter().enumerate() {
        let g = terms.d1[k];
        if g == 0.0 {
            continue;
        }
        let xk = row.transpose();
        for i in 0..theta.m() {
            let o = theta.offset(i);
            let s = xk.dot(&theta.w(i));
            let a = theta.a(i);
            for l in 0..d {
                let aw = g * 2.0 * s * xk[l];
                hess[(o, o + 1 + l)] += aw;
                hess[(o + 1 + l, o)] += aw;
                for r in 0..d {
                    hess[(o + 1 + l, o + 1 + r)] += g * 2.0 * a * xk[l] * xk[r];
                }
            }
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

pub fn grad_q(q: &QCoordinates, data: &Dataset, kind: LossKind) -> Result<DVector<f64>> {
    let design = design_matrix(&data.x);
    if design.ncols() != q.vector.len() {
        return Err(Error::Dimension("Q and data dimensions differ".into()));
    }
    let terms = loss_terms(&(&design * &q.vector), data, kind)?;
    Ok(design.transpose() * terms.d1)
}

/// `Aᵀ diag(ℓ″) A`; for squared loss this is `(1/n) AᵀA` regardless of `q`.
pub fn hess_q(q: &QCoordinates, data: &Dataset, kind: LossKind) -> Result<DMatrix<f64>> {
    let design = design_matrix(&data.x);
    if design.ncols() != q.vector.len() {
        return Err(Error::Dimension("Q and data dimensions differ".into()));
    }
    let terms = loss_terms(&(&design * &q.vector), data, kind)?;
    let weighted = DMatrix::from_fn(design.nrows(), design.ncols(), |k, j| design[(k, j)] * terms.d2[k]);
    let hess = design.transpose() * weighted;
    Ok((&hess + hess.transpose()) * 0.5)
}
