//! Pointwise quotient geometry.
//!
//! At a parameter point the ambient space splits into the vertical space
//! (tangent to the scaling orbit) and its Euclidean orthogonal complement,
//! the horizontal space. The function-induced metric is the pullback
//! `g_θ = (1/n) JᵀJ` of the (normalized) Euclidean inner product on sample
//! predictions through `J = DΦ_X(θ)`.
//!
//! The vertical space is always the orbit-tangent span. For quadratic
//! units with `m ≥ 2` the Jacobian kernel is generically larger than that
//! span: `Q = W diag(a) Wᵀ` is also invariant under the continuous
//! (pseudo-)orthogonal mixing of hidden units, which adds `m(m−1)/2`
//! kernel directions. [`regularity_check`] reports this discrepancy, and the
//! metric restricted to the horizontal space is then singular;
//! [`MetricInversion::RangeRestricted`] inverts it on its range instead.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, Dataset, LossKind, QCoordinates, Theta};
use crate::numerics::{self, SubspaceBasis, SymSpectrum};
use crate::symmetry::{self, OrbitTangentBasis};

/// Relative threshold below which metric eigenvalues count as zero.
pub const METRIC_RANGE_TOL: f64 = 1e-10;

/// Default angle tolerance for the kernel-vs-orbit comparison.
pub const DEFAULT_ANGLE_TOL: f64 = 1e-6;

/// Two hidden weight vectors collide when `|cos ∠(wᵢ, wⱼ)| > 1 − COLLISION_TOL`.
pub const COLLISION_TOL: f64 = 1e-8;

/// `DΦ_X(θ)`, one row per sample.
pub fn jacobian(theta: &Theta, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    model::prediction_jacobian(theta, x)
}

/// Pullback metric `(1/n) JᵀJ`.
pub fn pullback_metric(jacobian: &DMatrix<f64>) -> DMatrix<f64> {
    let n = jacobian.nrows().max(1) as f64;
    let g = jacobian.transpose() * jacobian / n;
    (&g + g.transpose()) * 0.5
}

#[derive(Debug, Clone)]
pub struct GeometryAtPoint {
    pub jacobian: DMatrix<f64>,
    pub orbit: OrbitTangentBasis,
    pub vertical: SubspaceBasis,
    pub horizontal: SubspaceBasis,
    pub metric: DMatrix<f64>,
    pub kernel: SubspaceBasis,
}

impl GeometryAtPoint {
    pub fn project_vertical(&self, v: &DVector<f64>) -> DVector<f64> {
        self.vertical.project(v)
    }

    pub fn project_horizontal(&self, v: &DVector<f64>) -> DVector<f64> {
        self.horizontal.project(v)
    }

    /// `g_θ(u, v)`.
    pub fn metric_form(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        u.dot(&(&self.metric * v))
    }

    /// `Bᵀ g_θ B` for the horizontal basis `B`.
    pub fn restricted_metric(&self) -> DMatrix<f64> {
        let b = &self.horizontal.columns;
        let r = b.transpose() * &self.metric * b;
        (&r + r.transpose()) * 0.5
    }
}

/// Orthonormalized orbit tangents. The tangents sit on disjoint unit
/// blocks, so normalizing the non-negligible ones is enough.
fn vertical_basis(orbit: &OrbitTangentBasis, ambient: usize, tol: f64) -> SubspaceBasis {
    let max_norm = orbit.vectors.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let cols: Vec<DVector<f64>> = orbit
        .vectors
        .iter()
        .filter(|v| max_norm > 0.0 && v.norm() > tol * max_norm)
        .map(|v| v.normalize())
        .collect();
    if cols.is_empty() {
        return SubspaceBasis::empty(ambient, tol);
    }
    SubspaceBasis { columns: DMatrix::from_columns(&cols), tol_used: tol }
}

pub fn decompose(theta: &Theta, x: &DMatrix<f64>, p: f64, tol: f64) -> Result<GeometryAtPoint> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("rank tolerance must be positive, got {tol}")));
    }
    let jacobian = jacobian(theta, x)?;
    let orbit = symmetry::orbit_tangent_basis(theta, p);
    let vertical = vertical_basis(&orbit, theta.dim(), tol);
    let horizontal = numerics::orthogonal_complement(&vertical)?;
    let metric = pullback_metric(&jacobian);
    let kernel = numerics::nullspace(&jacobian, tol)?;
    Ok(GeometryAtPoint { jacobian, orbit, vertical, horizontal, metric, kernel })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UnitFlags {
    pub vanishing_a: bool,
    pub vanishing_w: bool,
    /// First other unit whose weight vector is (anti-)parallel to this one.
    pub collision_with: Option<usize>,
}

impl UnitFlags {
    pub fn any(&self) -> bool {
        self.vanishing_a || self.vanishing_w || self.collision_with.is_some()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub kernel_dim: usize,
    pub orbit_dim: usize,
    pub max_principal_angle: f64,
    pub unit_flags: Vec<UnitFlags>,
    pub is_regular: bool,
}

impl RegularityReport {
    pub fn has_unit_flags(&self) -> bool {
        self.unit_flags.iter().any(UnitFlags::any)
    }
}

/// Vanishing-neuron and collision flags, per unit. For the quadratic
/// activation anti-parallel weights also collide, since `w` and `−w`
/// realize the same feature.
pub fn unit_flags(theta: &Theta) -> Vec<UnitFlags> {
    let m = theta.m();
    let a_scale = (0..m).map(|i| theta.a(i).abs()).fold(1.0, f64::max);
    let norms: Vec<f64> = (0..m).map(|i| theta.w(i).norm()).collect();
    let w_scale = norms.iter().copied().fold(1.0, f64::max);
    let mut flags = vec![UnitFlags::default(); m];
    for i in 0..m {
        flags[i].vanishing_a = theta.a(i).abs() <= symmetry::VANISHING_TOL * a_scale;
        flags[i].vanishing_w = norms[i] <= symmetry::VANISHING_TOL * w_scale;
    }
    for i in 0..m {
        if flags[i].vanishing_w {
            continue;
        }
        flags[i].collision_with = (0..m).find(|&j| {
            j != i && !flags[j].vanishing_w && {
                let cos = theta.w(i).dot(&theta.w(j)) / (norms[i] * norms[j]);
                cos.abs() > 1.0 - COLLISION_TOL
            }
        });
    }
    flags
}

pub fn regularity_check(theta: &Theta, x: &DMatrix<f64>, p: f64, tol: f64, angle_tol: f64) -> Result<RegularityReport> {
    let geom = decompose(theta, x, p, tol)?;
    let orbit_dim = numerics::rank(&geom.orbit.as_matrix(), tol);
    let kernel_dim = geom.kernel.dim();
    let angles = numerics::principal_angles(&geom.kernel, &geom.vertical)?;
    let max_principal_angle = angles.iter().copied().fold(0.0, f64::max);
    let unit_flags = unit_flags(theta);
    let is_regular = kernel_dim == orbit_dim
        && max_principal_angle <= angle_tol
        && !unit_flags.iter().any(UnitFlags::any);
    Ok(RegularityReport { kernel_dim, orbit_dim, max_principal_angle, unit_flags, is_regular })
}

/// How the restricted metric `BᵀgB` is inverted when lifting gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricInversion {
    /// Require `BᵀgB` positive definite; fail otherwise.
    #[default]
    Strict,
    /// Invert `BᵀgB` on its positive eigenspace. The result is the lift that
    /// is also orthogonal to every Jacobian-kernel direction.
    RangeRestricted,
}

/// Horizontal lift of the quotient gradient: the unique `u ∈ ℋ_θ` with
/// `g_θ(u, v) = D𝓛(θ)[v]` for all horizontal `v`.
pub fn horizontal_lift_gradient(theta: &Theta, data: &Dataset, kind: LossKind, geom: &GeometryAtPoint) -> Result<DVector<f64>> {
    horizontal_lift_gradient_with(theta, data, kind, geom, MetricInversion::Strict)
}

pub fn horizontal_lift_gradient_with(
    theta: &Theta,
    data: &Dataset,
    kind: LossKind,
    geom: &GeometryAtPoint,
    inversion: MetricInversion,
) -> Result<DVector<f64>> {
    let grad = model::grad_theta(theta, data, kind)?;
    lift_vector(&grad, geom, inversion)
}

/// Solves `(BᵀgB) z = Bᵀ grad` and returns `B z`.
pub(crate) fn lift_vector(grad: &DVector<f64>, geom: &GeometryAtPoint, inversion: MetricInversion) -> Result<DVector<f64>> {
    let b = &geom.horizontal.columns;
    if b.ncols() == 0 {
        return Ok(DVector::zeros(grad.len()));
    }
    let rhs = b.transpose() * grad;
    let spec = numerics::sym_eig(&geom.restricted_metric())?;
    let (lmin, lmax) = (spec.min(), spec.max());
    let cutoff = METRIC_RANGE_TOL * lmax.max(0.0);
    if inversion == MetricInversion::Strict && !(lmax > 0.0 && lmin > cutoff) {
        return Err(Error::SingularMetric { lambda_min: lmin, at_time: None });
    }
    let v = &spec.eigenvectors;
    let coeffs = v.transpose() * rhs;
    let mut z = DVector::zeros(b.ncols());
    for (k, &lambda) in spec.eigenvalues.iter().enumerate() {
        if lambda > cutoff && lambda > 0.0 {
            z.axpy(coeffs[k] / lambda, &v.column(k), 1.0);
        }
    }
    Ok(b * z)
}

/// Effective-curvature summary of a Hessian relative to a metric.
#[derive(Debug, Clone, Serialize)]
pub struct CurvatureSummary {
    pub lambda_min_eff: f64,
    pub lambda_max_eff: f64,
    /// `λ_max / λ_min`; `None` when `λ_min ≤ 0` (unbounded).
    pub kappa_eff: Option<f64>,
    /// Trace of the raw Hessian.
    pub trace: f64,
    /// Frobenius norm of the raw Hessian.
    pub frobenius: f64,
    /// Generalized spectrum, ascending.
    pub spectrum: Vec<f64>,
}

impl CurvatureSummary {
    pub fn from_parts(hess: &DMatrix<f64>, spectrum: Vec<f64>) -> Self {
        let lambda_min_eff = spectrum.first().copied().unwrap_or(f64::NAN);
        let lambda_max_eff = spectrum.last().copied().unwrap_or(f64::NAN);
        let kappa_eff = (lambda_min_eff > 0.0).then(|| lambda_max_eff / lambda_min_eff);
        CurvatureSummary {
            lambda_min_eff,
            lambda_max_eff,
            kappa_eff,
            trace: hess.trace(),
            frobenius: hess.norm(),
            spectrum,
        }
    }
}

/// Generalized spectrum of `(hess, metric)` on the metric's positive
/// eigenspace (eigenvalues above `rel_tol · λ_max(metric)`).
pub fn effective_spectrum(hess: &DMatrix<f64>, metric: &DMatrix<f64>, rel_tol: f64) -> Result<SymSpectrum> {
    let m_spec = numerics::sym_eig(metric)?;
    let lmax = m_spec.max();
    if !(lmax > 0.0) {
        return Err(Error::SingularMetric { lambda_min: lmax.max(0.0), at_time: None });
    }
    let keep: Vec<usize> = (0..m_spec.len()).filter(|&k| m_spec.eigenvalues[k] > rel_tol * lmax).collect();
    let mut u = DMatrix::zeros(metric.nrows(), keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        u.set_column(dst, &m_spec.eigenvectors.column(src));
    }
    let h = u.transpose() * hess * &u;
    let g = u.transpose() * metric * &u;
    let inner = numerics::gen_sym_eig(&((&h + h.transpose()) * 0.5), &((&g + g.transpose()) * 0.5))?;
    Ok(SymSpectrum { eigenvalues: inner.eigenvalues, eigenvectors: u * inner.eigenvectors })
}

/// Metric of the Q-chart, `(1/n) AᵀA`, where `A` maps vech(Q) to predictions.
pub fn metric_q(x: &DMatrix<f64>) -> DMatrix<f64> {
    pullback_metric(&model::design_matrix(x))
}

#[derive(Debug, Clone)]
pub struct EffectiveHessian {
    pub hess: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub summary: CurvatureSummary,
}

/// Effective Hessian in the Q-chart: `hess_q` measured against the
/// pulled-back metric.
pub fn effective_hessian_q(q: &QCoordinates, data: &Dataset, kind: LossKind) -> Result<EffectiveHessian> {
    let hess = model::hess_q(q, data, kind)?;
    let metric = metric_q(&data.x);
    let spectrum = effective_spectrum(&hess, &metric, METRIC_RANGE_TOL)?;
    let summary = CurvatureSummary::from_parts(&hess, spectrum.values());
    Ok(EffectiveHessian { hess, metric, summary })
}

/// Ambient Hessian compressed to the horizontal space, `P Hess P` with
/// `P` the horizontal projector, together with the spectrum of `Bᵀ Hess B`.
/// This is a proxy that removes the scaling-orbit directions; it is not the
/// intrinsic effective Hessian.
pub fn projected_hessian(theta: &Theta, data: &Dataset, kind: LossKind, geom: &GeometryAtPoint) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let hess = model::hess_theta(theta, data, kind)?;
    let b = &geom.horizontal.columns;
    let reduced = b.transpose() * &hess * b;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let full = b * &reduced * b.transpose();
    Ok((full, numerics::sym_eigenvalues(&reduced)?))
}

/// Smallest eigenvalue above `rank_tol · max|λ|`, if any.
pub fn smallest_positive_eigenvalue(spectrum: &[f64], rank_tol: f64) -> Option<f64> {
    let scale = spectrum.iter().map(|l| l.abs()).fold(0.0, f64::max);
    spectrum.iter().copied().filter(|&l| l > rank_tol * scale).reduce(f64::min)
}

/// `max|λ| / min|λ|` over eigenvalues with `|λ| > rank_tol · max|λ|`.
pub fn condition_number_nonzero(spectrum: &[f64], rank_tol: f64) -> Option<f64> {
    let scale = spectrum.iter().map(|l| l.abs()).fold(0.0, f64::max);
    let kept: Vec<f64> = spectrum.iter().map(|l| l.abs()).filter(|&l| l > rank_tol * scale).collect();
    let min = kept.iter().copied().reduce(f64::min)?;
    Some(scale / min)
}

/// Christoffel symbols of a coordinate metric at `z`, by central
/// differences of the metric with step `h`. Entry `k` of the result holds
/// `Γ^k_{ij}` as a matrix over `(i, j)`.
pub fn christoffel_symbols<F>(metric: F, z: &DVector<f64>, h: f64) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let r = z.len();
    let g0 = metric(z)?;
    let spec = numerics::sym_eig(&g0)?;
    if !(spec.max() > 0.0 && spec.min() > METRIC_RANGE_TOL * spec.max()) {
        return Err(Error::SingularMetric { lambda_min: spec.min(), at_time: None });
    }
    let g_inv = &spec.eigenvectors
        * DMatrix::from_diagonal(&spec.eigenvalues.map(f64::recip))
        * spec.eigenvectors.transpose();
    // dg[l] = ∂_l g
    let mut dg = Vec::with_capacity(r);
    let mut probe = z.clone();
    for l in 0..r {
        let orig = probe[l];
        probe[l] = orig + h;
        let up = metric(&probe)?;
        probe[l] = orig - h;
        let down = metric(&probe)?;
        probe[l] = orig;
        dg.push((up - down) / (2.0 * h));
    }
    // First-kind symbols Γ_{l,ij} = ½(∂_i g_jl + ∂_j g_il − ∂_l g_ij).
    let first_kind: Vec<DMatrix<f64>> = (0..r)
        .map(|l| DMatrix::from_fn(r, r, |i, j| 0.5 * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)])))
        .collect();
    Ok((0..r)
        .map(|k| {
            let mut gamma = DMatrix::zeros(r, r);
            for (l, fk) in first_kind.iter().enumerate() {
                gamma += fk * g_inv[(k, l)];
            }
            gamma
        })
        .collect())
}

/// Coordinates on the gauge slice `‖wᵢ‖ = 1`: per unit, `aᵢ` followed by
/// `d−1` coordinates along a fixed orthonormal frame of the tangent space
/// of the unit sphere at the base `wᵢ`. The base point has coordinates
/// `(a₁, 0, a₂, 0, …)`.
#[derive(Debug, Clone)]
pub struct SliceChart {
    base: Theta,
    frames: Vec<DMatrix<f64>>,
}

impl SliceChart {
    pub fn at(theta: &Theta) -> Result<Self> {
        let d = theta.d();
        let mut frames = Vec::with_capacity(theta.m());
        for i in 0..theta.m() {
            let w = theta.w(i).clone_owned();
            if (w.norm() - 1.0).abs() > 1e-10 {
                return Err(Error::Validation(format!("unit {i} is off the gauge slice (‖w‖ = {})", w.norm())));
            }
            frames.push(sphere_frame(&w));
            debug_assert_eq!(frames[i].ncols(), d - 1);
        }
        Ok(SliceChart { base: theta.clone(), frames })
    }

    /// Number of slice coordinates, `m·d`.
    pub fn dim(&self) -> usize {
        self.base.m() * self.base.d()
    }

    pub fn base(&self) -> &Theta {
        &self.base
    }

    pub fn base_coordinates(&self) -> DVector<f64> {
        let d = self.base.d();
        let mut z = DVector::zeros(self.dim());
        for i in 0..self.base.m() {
            z[i * d] = self.base.a(i);
        }
        z
    }

    pub fn point(&self, z: &DVector<f64>) -> Theta {
        let d = self.base.d();
        let mut theta = self.base.clone();
        for i in 0..self.base.m() {
            theta.set_a(i, z[i * d]);
            let t = z.rows(i * d + 1, d - 1);
            let v = self.base.w(i) + &self.frames[i] * t;
            theta.w_mut(i).copy_from(&(&v / v.norm()));
        }
        theta
    }

    /// `∂θ/∂z`, shape `m(d+1) × m·d`.
    pub fn tangent(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let d = self.base.d();
        let mut jac = DMatrix::zeros(self.base.dim(), self.dim());
        for i in 0..self.base.m() {
            let o = self.base.offset(i);
            jac[(o, i * d)] = 1.0;
            let t = z.rows(i * d + 1, d - 1);
            let v = self.base.w(i) + &self.frames[i] * t;
            let norm = v.norm();
            let w = &v / norm;
            let proj = DMatrix::identity(d, d) - &w * w.transpose();
            let block = proj * &self.frames[i] / norm;
            jac.view_mut((o + 1, i * d + 1), (d, d - 1)).copy_from(&block);
        }
        jac
    }

    /// Slice metric `(1/n) J_SᵀJ_S` with `J_S = DΦ_X · ∂θ/∂z`.
    pub fn metric(&self, z: &DVector<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let js = jacobian(&self.point(z), x)? * self.tangent(z);
        Ok(pullback_metric(&js))
    }

    pub fn gradient(&self, z: &DVector<f64>, data: &Dataset, kind: LossKind) -> Result<DVector<f64>> {
        Ok(self.tangent(z).transpose() * model::grad_theta(&self.point(z), data, kind)?)
    }
}

/// Orthonormal basis of `w^⊥` by Gram–Schmidt on the standard basis,
/// skipping the axis most aligned with `w` (lowest index on ties).
fn sphere_frame(w: &DVector<f64>) -> DMatrix<f64> {
    let d = w.len();
    let skip = (0..d).fold(0, |best, l| if w[l].abs() > w[best].abs() { l } else { best });
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(d.saturating_sub(1));
    for l in (0..d).filter(|&l| l != skip) {
        let mut e = DVector::zeros(d);
        e[l] = 1.0;
        let mut v = &e - w * w.dot(&e);
        for c in &cols {
            let coef = c.dot(&v);
            v.axpy(-coef, c, 1.0);
        }
        cols.push(v.normalize());
    }
    if cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[derive(Debug, Clone)]
pub struct ReducedHessian {
    /// Christoffel-corrected Hessian in slice coordinates.
    pub hessian: DMatrix<f64>,
    /// Plain second-derivative matrix of the slice loss.
    pub plain_hessian: DMatrix<f64>,
    pub metric: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub christoffel: Vec<DMatrix<f64>>,
}

impl ReducedHessian {
    /// Generalized spectrum relative to the slice metric.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        Ok(numerics::gen_sym_eig(&self.hessian, &self.metric)?.values())
    }
}

/// Effective Hessian on the gauge slice,
/// `Hess_ij = ∂_i∂_j 𝓛^S − Γ^k_ij ∂_k 𝓛^S`, with second derivatives and
/// Christoffel symbols from central differences of step `h`.
pub fn reduced_hessian_gauge(theta: &Theta, data: &Dataset, kind: LossKind, chart: &SliceChart, h: f64) -> Result<ReducedHessian> {
    if (chart.base().as_vector() - theta.as_vector()).amax() > 1e-12 {
        return Err(Error::Validation("slice chart is not based at theta".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Validation(format!("finite-difference step must be positive, got {h}")));
    }
    let z0 = chart.base_coordinates();
    let r = z0.len();
    let gradient = chart.gradient(&z0, data, kind)?;

    let mut probe = z0.clone();
    let mut cols = Vec::with_capacity(r);
    for l in 0..r {
        let orig = probe[l];
        probe[l] = orig + h;
        let up = chart.gradient(&probe, data, kind)?;
        probe[l] = orig - h;
        let down = chart.gradient(&probe, data, kind)?;
        probe[l] = orig;
        cols.push((up - down) / (2.0 * h));
    }
    let plain = DMatrix::from_columns(&cols);
    let plain_hessian = (&plain + plain.transpose()) * 0.5;

    let metric = chart.metric(&z0, &data.x)?;
    let christoffel = christoffel_symbols(|z| chart.metric(z, &data.x), &z0, h)?;
    let mut hessian = plain_hessian.clone();
    for (k, gamma) in christoffel.iter().enumerate() {
        hessian -= gamma * gradient[k];
    }
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    Ok(ReducedHessian { hessian, plain_hessian, metric, gradient, christoffel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{q_matrix, Task};
    use crate::numerics::fd_jacobian;

    fn single_neuron() -> (Theta, Dataset) {
        let theta = Theta::new(&[1.0], &[vec![1.0]]).unwrap();
        let data = Dataset::new(DMatrix::from_row_slice(1, 1, &[2.0]), DVector::from_vec(vec![0.0]), Task::Regression).unwrap();
        (theta, data)
    }

    fn small_problem() -> (Theta, Dataset) {
        let theta = Theta::new(&[0.8, -0.6], &[vec![1.0, 0.3, -0.4], vec![-0.2, 0.9, 0.5]]).unwrap();
        let rows = [
            1.0, 0.2, -0.5, 0.3, -1.1, 0.8, -0.7, 0.4, 1.3, 0.9, 0.9, -0.2, -1.4, 0.1, 0.6, 0.5, -0.3, -0.9, 0.2, 1.2, 0.4,
            -0.6, -0.8, -1.0, 1.1, 0.7, 0.3, 0.05, -0.5, 1.5,
        ];
        let x = DMatrix::from_row_slice(10, 3, &rows);
        let y = DVector::from_fn(10, |k, _| (k as f64 * 0.37).sin());
        (theta, Dataset::new(x, y, Task::Regression).unwrap())
    }

    #[test]
    fn jacobian_examples() {
        let (theta, data) = single_neuron();
        assert_eq!(jacobian(&theta, &data.x).unwrap().as_slice(), &[4.0, 8.0]);

        let (theta, data) = small_problem();
        let jac = jacobian(&theta, &data.x).unwrap();
        let fd = fd_jacobian(|v| model::realize(&theta.with_params(v.clone()), &data.x).unwrap(), theta.as_vector(), 1e-6);
        assert!((fd - &jac).amax() <= 1e-6 * jac.amax());

        let zero_unit = Theta::new(&[0.0, 1.0], &[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let jac = jacobian(&zero_unit, &data.x).unwrap();
        assert_eq!(jac.columns(0, 4).amax(), 0.0);
    }

    #[test]
    fn single_neuron_decomposition() {
        let (theta, data) = single_neuron();
        let geom = decompose(&theta, &data.x, 2.0, 1e-8).unwrap();
        let s5 = 5f64.sqrt();
        let v = geom.vertical.columns.column(0);
        let h = geom.horizontal.columns.column(0);
        assert!((v[0].abs() - 2.0 / s5).abs() < 1e-14 && (v[1].abs() - 1.0 / s5).abs() < 1e-14);
        assert!(v[0] * v[1] < 0.0);
        assert!((h[0].abs() - 1.0 / s5).abs() < 1e-14 && (h[1].abs() - 2.0 / s5).abs() < 1e-14);
        assert!(h[0] * h[1] > 0.0);
        assert!((&geom.jacobian * geom.orbit.vectors[0].clone()).amax() == 0.0);
        assert_eq!(geom.metric, DMatrix::from_row_slice(2, 2, &[16.0, 32.0, 32.0, 64.0]));
        assert!((geom.vertical.columns.transpose() * &geom.horizontal.columns).amax() < 1e-12);
    }

    #[test]
    fn single_neuron_horizontal_lift() {
        let (theta, data) = single_neuron();
        let geom = decompose(&theta, &data.x, 2.0, 1e-8).unwrap();
        let u = horizontal_lift_gradient(&theta, &data, LossKind::Squared, &geom).unwrap();
        assert!((u[0] - 0.2).abs() < 1e-12 && (u[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn lift_satisfies_defining_identity() {
        let theta = Theta::new(&[0.8], &[vec![1.0, 0.3, -0.4]]).unwrap();
        let (_, data) = small_problem();
        let geom = decompose(&theta, &data.x, 2.0, 1e-8).unwrap();
        let grad = model::grad_theta(&theta, &data, LossKind::Squared).unwrap();
        let u = horizontal_lift_gradient(&theta, &data, LossKind::Squared, &geom).unwrap();
        assert!(geom.project_vertical(&u).amax() < 1e-12);
        for col in geom.horizontal.columns.column_iter() {
            let v = col.clone_owned();
            let lhs = geom.metric_form(&u, &v);
            let rhs = grad.dot(&v);
            assert!((lhs - rhs).abs() <= 1e-8 * grad.norm() * 1.0_f64.max(rhs.abs()));
        }
    }

    #[test]
    fn lift_at_critical_point_is_zero() {
        let theta = Theta::new(&[0.8], &[vec![1.0, 0.3, -0.4]]).unwrap();
        let (_, mut data) = small_problem();
        data.y = model::realize(&theta, &data.x).unwrap();
        let geom = decompose(&theta, &data.x, 2.0, 1e-8).unwrap();
        let u = horizontal_lift_gradient(&theta, &data, LossKind::Squared, &geom).unwrap();
        assert!(u.amax() < 1e-12);
    }

    #[test]
    fn strict_lift_fails_when_kernel_exceeds_orbit() {
        let (theta, data) = small_problem();
        let geom = decompose(&theta, &data.x, 2.0, 1e-8).unwrap();
        assert!(matches!(
            horizontal_lift_gradient(&theta, &data, LossKind::Squared, &geom),
            Err(Error::SingularMetric { .. })
        ));
        let u = horizontal_lift_gradient_with(&theta, &data, LossKind::Squared, &geom, MetricInversion::RangeRestricted).unwrap();
        // The range-restricted lift is orthogonal to the whole kernel.
        assert!((geom.kernel.columns.transpose() * &u).amax() < 1e-9 * u.norm());
        let grad = model::grad_theta(&theta, &data, LossKind::Squared).unwrap();
        assert!((&geom.metric * &u - &grad).amax() < 1e-9 * grad.norm());
    }

    #[test]
    fn regularity_examples() {
        let (_, data) = small_problem();
        let single = Theta::new(&[0.8], &[vec![1.0, 0.3, -0.4]]).unwrap();
        let report = regularity_check(&single, &data.x, 2.0, 1e-8, DEFAULT_ANGLE_TOL).unwrap();
        assert_eq!((report.kernel_dim, report.orbit_dim), (1, 1));
        assert!(report.is_regular);

        let collide = Theta::new(&[0.8, 0.5], &[vec![1.0, 0.3, -0.4], vec![1.0, 0.3, -0.4]]).unwrap();
        let report = regularity_check(&collide, &data.x, 2.0, 1e-8, DEFAULT_ANGLE_TOL).unwrap();
        assert_eq!(report.unit_flags[0].collision_with, Some(1));
        assert!(report.kernel_dim > report.orbit_dim && !report.is_regular);

        let vanish = Theta::new(&[0.0, 0.5], &[vec![0.0, 0.0, 0.0], vec![1.0, 0.3, -0.4]]).unwrap();
        let report = regularity_check(&vanish, &data.x, 2.0, 1e-8, DEFAULT_ANGLE_TOL).unwrap();
        assert!(report.unit_flags[0].vanishing_a && report.unit_flags[0].vanishing_w);
        assert!(!report.is_regular);
    }

    #[test]
    fn generic_pairs_carry_a_mixing_direction() {
        // Two generic units: kernel = 2 scaling directions + 1 mixing direction.
        let (theta, data) = small_problem();
        let report = regularity_check(&theta, &data.x, 2.0, 1e-8, DEFAULT_ANGLE_TOL).unwrap();
        assert_eq!(report.orbit_dim, 2);
        assert_eq!(report.kernel_dim, 3);
        assert!(!report.has_unit_flags());
        assert!(!report.is_regular);
    }

    #[test]
    fn q_chart_effective_hessian_examples() {
        let (_, data) = single_neuron();
        let q = QCoordinates::from_vector(DVector::from_vec(vec![0.7])).unwrap();
        let eff = effective_hessian_q(&q, &data, LossKind::Squared).unwrap();
        assert_eq!(eff.hess[(0, 0)], 16.0);
        assert_eq!(eff.metric[(0, 0)], 16.0);
        assert!((eff.summary.spectrum[0] - 1.0).abs() < 1e-14);

        let (theta, data) = small_problem();
        let eff = effective_hessian_q(&q_matrix(&theta), &data, LossKind::Squared).unwrap();
        assert!((&eff.hess - &eff.metric).amax() <= 1e-14 * eff.metric.amax());
        assert!(eff.summary.spectrum.iter().all(|l| (l - 1.0).abs() < 1e-10));
        assert_eq!(eff.summary.kappa_eff.map(|k| (k - 1.0).abs() < 1e-10), Some(true));
    }

    #[test]
    fn logistic_at_zero_has_quarter_curvature() {
        let (_, data) = small_problem();
        let labels = DVector::from_fn(data.n(), |k, _| if k % 2 == 0 { 1.0 } else { -1.0 });
        let cls = Dataset::new(data.x.clone(), labels, Task::Classification).unwrap();
        let zero = QCoordinates::from_vector(DVector::zeros(6)).unwrap();
        let eff = effective_hessian_q(&zero, &cls, LossKind::Logistic).unwrap();
        assert!((&eff.hess - &eff.metric * 0.25).amax() < 1e-14);
        assert!(eff.summary.spectrum.iter().all(|l| (l - 0.25).abs() < 1e-10));
    }

    #[test]
    fn zero_metric_is_an_error() {
        let data = Dataset::new(DMatrix::zeros(2, 2), DVector::zeros(2), Task::Regression).unwrap();
        let q = QCoordinates::from_vector(DVector::zeros(3)).unwrap();
        assert!(matches!(effective_hessian_q(&q, &data, LossKind::Squared), Err(Error::SingularMetric { .. })));
    }

    #[test]
    fn slice_chart_reproduces_base_point() {
        let theta = symmetry::gauge_normalize(&Theta::new(&[0.8], &[vec![1.0, 0.3, -0.4]]).unwrap(), 2.0).unwrap();
        let chart = SliceChart::at(&theta).unwrap();
        let z0 = chart.base_coordinates();
        assert!((chart.point(&z0).as_vector() - theta.as_vector()).amax() < 1e-15);
        let fd = fd_jacobian(|z| chart.point(z).into_vector(), &z0, 1e-6);
        assert!((fd - chart.tangent(&z0)).amax() < 1e-9);
        assert!(SliceChart::at(&Theta::new(&[1.0], &[vec![2.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn christoffel_correction_vanishes_at_critical_points() {
        let theta = symmetry::gauge_normalize(&Theta::new(&[0.8], &[vec![1.0, 0.3, -0.4]]).unwrap(), 2.0).unwrap();
        let (_, mut data) = small_problem();
        data.y = model::realize(&theta, &data.x).unwrap();
        let chart = SliceChart::at(&theta).unwrap();
        let red = reduced_hessian_gauge(&theta, &data, LossKind::Squared, &chart, 1e-4).unwrap();
        assert!(red.gradient.amax() < 1e-12);
        assert!((&red.hessian - &red.plain_hessian).amax() < 1e-9);
        // At zero residual the Hessian equals the slice metric.
        assert!(red.spectrum().unwrap().iter().all(|l| (l - 1.0).abs() < 1e-6));
    }

    #[test]
    fn constant_metric_has_no_christoffel_symbols() {
        let (_, data) = small_problem();
        let g = metric_q(&data.x);
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, 1.0]);
        let gammas = christoffel_symbols(|_| Ok(g.clone()), &z, 1e-4).unwrap();
        assert!(gammas.iter().all(|gm| gm.amax() == 0.0));
    }

    #[test]
    fn condition_helpers() {
        assert_eq!(smallest_positive_eigenvalue(&[-1.0, 1e-14, 0.5, 2.0], 1e-10), Some(0.5));
        assert_eq!(condition_number_nonzero(&[-4.0, 1e-15, 0.5, 2.0], 1e-10), Some(8.0));
        assert_eq!(smallest_positive_eigenvalue(&[], 1e-10), None);
    }
}
