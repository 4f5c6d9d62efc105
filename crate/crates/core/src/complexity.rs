//! Parameter-level, matrix-level and orbit-level complexity, and the
//! collinearity diagnostic between complexity and loss gradients.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{self, Dataset, LossKind, QCoordinates, Theta};
use crate::numerics;
use crate::table::{format_opt, format_real};

/// `3 · 2^{-2/3}`, the orbit infimum of `a² + ‖w‖²` at `|a| = ‖w‖ = 1`.
pub const UNIT_INFIMUM: f64 = 1.889_881_574_842_31;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    /// `Σᵢ aᵢ² + ‖wᵢ‖²`.
    pub theta_norm_sq: f64,
    /// `Σᵢ |aᵢ| ‖wᵢ‖`.
    pub path_like: f64,
    /// `Σᵢ |aᵢ| ‖wᵢ‖²`, invariant under rescaling for `p = 2`.
    pub balanced_energy: f64,
    pub q_frobenius: f64,
    pub q_nuclear: f64,
    pub q_operator: f64,
    /// `‖Q‖_F² / ‖Q‖_op²`; `None` when `Q = 0`.
    pub stable_rank: Option<f64>,
    pub quotient_theta_norm: f64,
    /// Some unit has `w = 0` with `a ≠ 0`, so the infimum is only reached
    /// in the orbit closure.
    pub closure_attained: bool,
    /// Descending.
    pub singular_values: Vec<f64>,
}

impl ComplexityReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "theta_norm_sq",
        "path_like",
        "balanced_energy",
        "q_frobenius",
        "q_nuclear",
        "q_operator",
        "stable_rank",
        "quotient_theta_norm",
        "closure_attained",
        "sv",
    ];

    /// Fields in [`Self::CSV_HEADER`] order; singular values joined by `;`.
    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            format_real(self.theta_norm_sq),
            format_real(self.path_like),
            format_real(self.balanced_energy),
            format_real(self.q_frobenius),
            format_real(self.q_nuclear),
            format_real(self.q_operator),
            format_opt(self.stable_rank),
            format_real(self.quotient_theta_norm),
            self.closure_attained.to_string(),
            self.singular_values.iter().map(|&s| format_real(s)).collect::<Vec<_>>().join(";"),
        ]
    }

    /// The orbit-invariant fields, for spread comparisons.
    pub fn q_level(&self) -> Vec<f64> {
        let mut v = vec![self.q_frobenius, self.q_nuclear, self.q_operator, self.stable_rank.unwrap_or(0.0)];
        v.extend(&self.singular_values);
        v
    }
}

/// Matrix norms of a symmetric `Q`: `(frobenius, nuclear, operator,
/// singular values descending)`.
pub fn q_norms(q: &DMatrix<f64>) -> Result<(f64, f64, f64, Vec<f64>)> {
    let mut sv: Vec<f64> = numerics::sym_eigenvalues(q)?.into_iter().map(f64::abs).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let frob = sv.iter().map(|s| s * s).sum::<f64>().sqrt();
    let nuclear = sv.iter().sum();
    let operator = sv.first().copied().unwrap_or(0.0);
    Ok((frob, nuclear, operator, sv))
}

pub fn complexity_report(theta: &Theta, p: f64) -> Result<ComplexityReport> {
    let mut theta_norm_sq = 0.0;
    let mut path_like = 0.0;
    let mut balanced_energy = 0.0;
    for i in 0..theta.m() {
        let (a, w) = (theta.a(i), theta.w(i).norm());
        theta_norm_sq += a * a + w * w;
        path_like += a.abs() * w;
        balanced_energy += a.abs() * w * w;
    }
    let (q_frobenius, q_nuclear, q_operator, singular_values) = q_norms(&model::q_matrix(theta).matrix)?;
    let stable_rank = (q_operator > 0.0).then(|| (q_frobenius / q_operator).powi(2));
    let closure_attained = (0..theta.m()).any(|i| theta.a(i) != 0.0 && theta.w(i).norm() == 0.0);
    Ok(ComplexityReport {
        theta_norm_sq,
        path_like,
        balanced_energy,
        q_frobenius,
        q_nuclear,
        q_operator,
        stable_rank,
        quotient_theta_norm: quotient_theta_norm(theta, p)?,
        closure_attained,
        singular_values,
    })
}

/// `inf_{c>0} (c⁻⁴ a² + c² w²) = 3 · 2^{-2/3} |a|^{2/3} w^{4/3}`, attained at
/// `c⁶ = 2a²/w²`. Zero when either factor vanishes.
pub fn unit_orbit_infimum(a: f64, w_norm: f64) -> f64 {
    if a == 0.0 || w_norm == 0.0 {
        return 0.0;
    }
    UNIT_INFIMUM * a.abs().powf(2.0 / 3.0) * w_norm.abs().powf(4.0 / 3.0)
}

/// Infimum of `θ_norm_sq` over the orbit of `θ`. Only `p = 2` has a closed
/// form here.
pub fn quotient_theta_norm(theta: &Theta, p: f64) -> Result<f64> {
    if p != 2.0 {
        return Err(Error::Validation(format!("closed-form orbit infimum needs p = 2, got {p}")));
    }
    Ok((0..theta.m()).map(|i| unit_orbit_infimum(theta.a(i), theta.w(i).norm())).sum())
}

/// Orbit infimum of a unit-separable complexity `Σᵢ r(aᵢ, wᵢ)`, minimizing
/// each unit over `log c ∈ [log_lo, log_hi]` by golden section.
pub fn numeric_orbit_infimum<F>(theta: &Theta, p: f64, (log_lo, log_hi): (f64, f64), r: F) -> Result<f64>
where
    F: Fn(f64, DVectorView<'_, f64>) -> f64,
{
    let mut total = 0.0;
    for i in 0..theta.m() {
        let (a, w) = (theta.a(i), theta.w(i));
        let unit = |s: f64| {
            let c = s.exp();
            let scaled = w * c;
            r(c.powf(-p) * a, scaled.column(0))
        };
        total += numerics::minimize_1d(unit, log_lo, log_hi, 1e-10)?.1;
    }
    Ok(total)
}

/// A Q-level functional for the collinearity diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QFunctional {
    /// The training loss itself.
    Loss,
    /// `½ ‖Q‖_F²`.
    FrobeniusSq,
    /// `‖Q‖_*`.
    Nuclear,
    Constant,
}

/// Relative size below which an eigenvalue of `Q` counts as zero for the
/// nuclear-norm gradient.
pub const SPECTRAL_TOL: f64 = 1e-10;

/// Gradient of the functional in isometric vech coordinates; `None` where
/// it is undefined.
pub fn functional_gradient(r: QFunctional, q: &QCoordinates, data: &Dataset, kind: LossKind) -> Result<Option<DVector<f64>>> {
    Ok(match r {
        QFunctional::Loss => Some(model::grad_q(q, data, kind)?),
        QFunctional::FrobeniusSq => Some(q.vector.clone()),
        QFunctional::Constant => Some(DVector::zeros(q.vector.len())),
        QFunctional::Nuclear => {
            let spec = numerics::sym_eig(&q.matrix)?;
            let scale = spec.eigenvalues.amax();
            if scale == 0.0 || spec.eigenvalues.iter().any(|l| l.abs() <= SPECTRAL_TOL * scale) {
                None
            } else {
                let signs = DMatrix::from_diagonal(&spec.eigenvalues.map(f64::signum));
                let g = &spec.eigenvectors * signs * spec.eigenvectors.transpose();
                Some(model::vech(&((&g + g.transpose()) * 0.5)))
            }
        }
    })
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix, cut at
/// `rel_tol · λ_max`.
fn psd_pinv(m: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let spec = numerics::sym_eig(m)?;
    let cutoff = rel_tol * spec.max().max(0.0);
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &l) in spec.eigenvalues.iter().enumerate() {
        if l > cutoff && l > 0.0 {
            let v = spec.eigenvectors.column(k);
            out += v * v.transpose() / l;
        }
    }
    Ok(out)
}

/// Metric-weighted cosine between the Riemannian gradients of `R` and of the
/// loss: `∇Rᵀ M⁺ ∇𝓛 / (‖∇R‖_{M⁺} ‖∇𝓛‖_{M⁺})`, `M = metric_q`.
pub fn metric_cosine(grad_r: &DVector<f64>, grad_l: &DVector<f64>, metric_pinv: &DMatrix<f64>) -> Option<f64> {
    let rr = grad_r.dot(&(metric_pinv * grad_r));
    let ll = grad_l.dot(&(metric_pinv * grad_l));
    if !(rr > 0.0 && ll > 0.0) {
        return None;
    }
    let cos = grad_r.dot(&(metric_pinv * grad_l)) / (rr.sqrt() * ll.sqrt());
    cos.is_finite().then(|| cos.clamp(-1.0, 1.0))
}

/// Cosine at every Q-snapshot of the trajectory; `None` marks points where
/// either gradient is undefined or zero.
pub fn collinearity_diagnostic(traj: &TrajectoryRecord, data: &Dataset, kind: LossKind, r_kind: QFunctional) -> Result<Vec<Option<f64>>> {
    let pinv = psd_pinv(&geometry::metric_q(&data.x), geometry::METRIC_RANGE_TOL)?;
    traj.q_snapshots
        .iter()
        .map(|q| {
            let grad_l = model::grad_q(q, data, kind)?;
            Ok(functional_gradient(r_kind, q, data, kind)?.and_then(|g| metric_cosine(&g, &grad_l, &pinv)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;
    use crate::symmetry::{apply_group, random_orbit_element};

    fn theta_from(a: &[f64], w: &[Vec<f64>]) -> Theta {
        Theta::new(a, w).unwrap()
    }

    #[test]
    fn matrix_norm_examples() {
        let (f, nuc, op, sv) = q_norms(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]))).unwrap();
        assert!((f - 2f64.sqrt()).abs() < 1e-15 && op == 1.0 && nuc == 2.0);
        assert_eq!(sv, vec![1.0, 1.0, 0.0]);
        let (f, nuc, op, _) = q_norms(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]))).unwrap();
        assert!((f - 2f64.sqrt()).abs() < 1e-15 && op == 1.0 && nuc == 2.0);
    }

    #[test]
    fn single_unit_report() {
        let r = complexity_report(&theta_from(&[1.0], &[vec![1.0, 0.0, 0.0]]), 2.0).unwrap();
        assert_eq!(r.theta_norm_sq, 2.0);
        assert_eq!(r.path_like, 1.0);
        assert!((r.quotient_theta_norm - 1.889881575).abs() < 1e-9);
        assert_eq!(r.stable_rank, Some(1.0));
        let oracle = numerics::minimize_1d(|c: f64| c.powi(-4) + c * c, 0.1, 10.0, 1e-12).unwrap().1;
        assert!((UNIT_INFIMUM - oracle).abs() < 1e-10);
    }

    #[test]
    fn degenerate_units() {
        assert_eq!(unit_orbit_infimum(0.0, 3.0), 0.0);
        let r = complexity_report(&theta_from(&[2.0], &[vec![0.0, 0.0]]), 2.0).unwrap();
        assert!(r.closure_attained && r.quotient_theta_norm == 0.0 && r.stable_rank.is_none());
    }

    #[test]
    fn numeric_infimum_matches_closed_form() {
        let theta = theta_from(&[0.3, -2.0], &[vec![1.0, 2.0], vec![0.5, -0.1]]);
        let numeric = numeric_orbit_infimum(&theta, 2.0, (-10.0, 10.0), |a, w| a * a + w.norm_squared()).unwrap();
        assert!((numeric - quotient_theta_norm(&theta, 2.0).unwrap()).abs() <= 1e-8);
    }

    #[test]
    fn quotient_norm_is_orbit_invariant() {
        let theta = theta_from(&[0.7, -1.3, 0.2], &[vec![1.0, 0.3], vec![-0.4, 2.0], vec![0.9, 0.9]]);
        let base = quotient_theta_norm(&theta, 2.0).unwrap();
        for seed in 0..20 {
            let g = random_orbit_element(3, (-1.0, 1.0), seed).unwrap();
            let moved = apply_group(&g, &theta, 2.0).unwrap();
            assert!((quotient_theta_norm(&moved, 2.0).unwrap() - base).abs() <= 1e-9 * base);
            assert!(base <= complexity_report(&moved, 2.0).unwrap().theta_norm_sq);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let q = QCoordinates::from_matrix(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, -1.0])).unwrap();
        let data = Dataset::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.3, 1.0, -1.0, 2.0]), DVector::zeros(3), Task::Regression).unwrap();
        for (r, f) in [
            (QFunctional::FrobeniusSq, Box::new(|v: &DVector<f64>| 0.5 * v.norm_squared()) as Box<dyn Fn(&DVector<f64>) -> f64>),
            (QFunctional::Nuclear, Box::new(|v: &DVector<f64>| q_norms(&model::unvech(v, 2).unwrap()).unwrap().1)),
        ] {
            let g = functional_gradient(r, &q, &data, LossKind::Squared).unwrap().unwrap();
            let fd = numerics::fd_gradient(|v| f(v), &q.vector, 1e-6);
            assert!((g - fd).amax() < 1e-7, "{r:?}");
        }
    }

    #[test]
    fn diagnostic_special_cases() {
        let q = QCoordinates::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5])).unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -2.0]);
        let data = Dataset::new(x.clone(), DVector::from_vec(vec![0.3, -0.2, 1.0, 0.1]), Task::Regression).unwrap();
        let pinv = psd_pinv(&geometry::metric_q(&x), 1e-10).unwrap();
        let gl = model::grad_q(&q, &data, LossKind::Squared).unwrap();
        let gr = functional_gradient(QFunctional::Loss, &q, &data, LossKind::Squared).unwrap().unwrap();
        assert!((metric_cosine(&gr, &gl, &pinv).unwrap() - 1.0).abs() < 1e-12);
        let zero = functional_gradient(QFunctional::Constant, &q, &data, LossKind::Squared).unwrap().unwrap();
        assert!(metric_cosine(&zero, &gl, &pinv).is_none());
        let singular = QCoordinates::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(functional_gradient(QFunctional::Nuclear, &singular, &data, LossKind::Squared).unwrap().is_none());
    }

    #[test]
    fn csv_row_joins_singular_values() {
        let r = complexity_report(&theta_from(&[1.0, -2.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]), 2.0).unwrap();
        let fields = r.csv_fields();
        assert_eq!(fields.len(), ComplexityReport::CSV_HEADER.len());
        assert_eq!(fields[9], format!("{};{}", format_real(2.0), format_real(1.0)));
    }
}
