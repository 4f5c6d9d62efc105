//! Trajectories: Euclidean gradient descent, the horizontally lifted
//! quotient gradient flow, the metric gradient flow in the Q-chart, and
//! post-hoc analysis (decay rates, horizontal function evolution,
//! convergence certificates).

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{self, MetricInversion};
use crate::model::{self, Activation, Dataset, LossKind, QCoordinates, Theta};
use crate::numerics;
use crate::symmetry;
use crate::table::{format_real, Table};

/// Default snapshot stride.
pub const DEFAULT_STRIDE: usize = 10;

/// Relative slack in `measured_rate ≥ (1 − RATE_REL_TOL) · predicted_rate`.
pub const RATE_REL_TOL: f64 = 0.1;

fn degree() -> f64 {
    Activation::default().degree
}

/// Per-step scalar series plus strided parameter snapshots.
///
/// Scalars are recorded at every step `k = 0..=steps`; the speeds are the
/// norms of the vertical and horizontal parts of the velocity used at that
/// step. Snapshots are taken every `stride` steps and always at the last one.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub vertical_speed: Vec<f64>,
    pub horizontal_speed: Vec<f64>,
    /// Step index of each snapshot.
    pub snapshot_steps: Vec<usize>,
    pub thetas: Vec<Theta>,
    pub q_snapshots: Vec<QCoordinates>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_theta(&self) -> &Theta {
        self.thetas.last().expect("trajectory has at least one snapshot")
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trajectory has at least one step")
    }

    pub fn snapshot_times(&self) -> Vec<f64> {
        self.snapshot_steps.iter().map(|&k| self.times[k]).collect()
    }

    /// Loss at the time closest to `t`.
    pub fn loss_at(&self, t: f64) -> f64 {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.losses[k]
    }

    /// Checks the structural invariants: equal lengths and strictly
    /// increasing times.
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        let consistent = [self.losses.len(), self.grad_norms.len(), self.vertical_speed.len(), self.horizontal_speed.len()]
            .iter()
            .all(|&l| l == n)
            && self.thetas.len() == self.snapshot_steps.len()
            && self.q_snapshots.len() == self.snapshot_steps.len()
            && self.snapshot_steps.iter().all(|&k| k < n);
        if !consistent {
            return Err(Error::Dimension("trajectory series have inconsistent lengths".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("trajectory times are not strictly increasing".into()));
        }
        Ok(())
    }

    pub fn series_table(&self, name: &str) -> Table {
        let mut table = Table::new(name, &["time", "loss", "grad_norm", "vertical_speed", "horizontal_speed"]);
        for k in 0..self.len() {
            table.push(vec![
                format_real(self.times[k]),
                format_real(self.losses[k]),
                format_real(self.grad_norms[k]),
                format_real(self.vertical_speed[k]),
                format_real(self.horizontal_speed[k]),
            ]);
        }
        table
    }

    fn push_step(&mut self, t: f64, loss: f64, grad: &DVector<f64>, velocity: &DVector<f64>, theta: &Theta) {
        let vertical = symmetry::orbit_tangent_basis(theta, degree()).project(velocity);
        let horizontal = velocity - &vertical;
        self.times.push(t);
        self.losses.push(loss);
        self.grad_norms.push(grad.norm());
        self.vertical_speed.push(vertical.norm());
        self.horizontal_speed.push(horizontal.norm());
    }

    fn snapshot(&mut self, theta: &Theta) {
        self.snapshot_steps.push(self.times.len() - 1);
        self.thetas.push(theta.clone());
        self.q_snapshots.push(model::q_matrix(theta));
    }
}

fn check_step(step: f64, stride: usize) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Validation(format!("step must be positive, got {step}")));
    }
    if stride == 0 {
        return Err(Error::Validation("record stride must be positive".into()));
    }
    Ok(())
}

/// `θ_{k+1} = θ_k − step · ∇𝓛(θ_k)` for `steps` steps.
pub fn gradient_descent(theta0: &Theta, data: &Dataset, kind: LossKind, step: f64, steps: usize, record_stride: usize) -> Result<TrajectoryRecord> {
    descend(theta0, data, kind, step, steps, record_stride, None)
}

/// Gradient descent that stops at the first iterate with loss at or below
/// `threshold`, or after `max_steps`.
pub fn train_until(
    theta0: &Theta,
    data: &Dataset,
    kind: LossKind,
    step: f64,
    max_steps: usize,
    threshold: f64,
    record_stride: usize,
) -> Result<TrajectoryRecord> {
    descend(theta0, data, kind, step, max_steps, record_stride, Some(threshold))
}

fn descend(
    theta0: &Theta,
    data: &Dataset,
    kind: LossKind,
    step: f64,
    steps: usize,
    stride: usize,
    stop_below: Option<f64>,
) -> Result<TrajectoryRecord> {
    check_step(step, stride)?;
    let mut record = TrajectoryRecord::default();
    let mut theta = theta0.clone();
    for k in 0..=steps {
        let (loss, grad) = model::loss_and_grad_theta(&theta, data, kind)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step: k });
        }
        record.push_step(k as f64 * step, loss, &grad, &(-&grad), &theta);
        let done = k == steps || stop_below.is_some_and(|t| loss <= t);
        if k % stride == 0 || done {
            record.snapshot(&theta);
        }
        if done {
            break;
        }
        let next = theta.as_vector() - &grad * step;
        theta = theta.with_params(next);
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub integrator: Integrator,
    pub inversion: MetricInversion,
    pub rank_tol: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { integrator: Integrator::Rk4, inversion: MetricInversion::Strict, rank_tol: numerics::DEFAULT_RANK_TOL }
    }
}

/// Quotient gradient flow `dθ/dt = −u_𝓛(θ)` with the default options
/// (fixed-step RK4, strict metric inversion).
pub fn quotient_flow(theta0: &Theta, data: &Dataset, kind: LossKind, step: f64, steps: usize, record_stride: usize) -> Result<TrajectoryRecord> {
    quotient_flow_with(theta0, data, kind, step, steps, record_stride, FlowOptions::default())
}

fn lift_field(theta: &Theta, data: &Dataset, kind: LossKind, opts: &FlowOptions, t: f64) -> Result<DVector<f64>> {
    let geom = geometry::decompose(theta, &data.x, degree(), opts.rank_tol)?;
    geometry::horizontal_lift_gradient_with(theta, data, kind, &geom, opts.inversion).map_err(|e| match e {
        Error::SingularMetric { lambda_min, .. } => Error::SingularMetric { lambda_min, at_time: Some(t) },
        other => other,
    })
}

pub fn quotient_flow_with(
    theta0: &Theta,
    data: &Dataset,
    kind: LossKind,
    step: f64,
    steps: usize,
    record_stride: usize,
    opts: FlowOptions,
) -> Result<TrajectoryRecord> {
    check_step(step, record_stride)?;
    let mut record = TrajectoryRecord::default();
    let mut theta = theta0.clone();
    for k in 0..=steps {
        let t = k as f64 * step;
        let (loss, grad) = model::loss_and_grad_theta(&theta, data, kind)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: k });
        }
        let k1 = -lift_field(&theta, data, kind, &opts, t)?;
        record.push_step(t, loss, &grad, &k1, &theta);
        if k % record_stride == 0 || k == steps {
            record.snapshot(&theta);
        }
        if k == steps {
            break;
        }
        let x = theta.as_vector();
        let next = match opts.integrator {
            Integrator::Euler => x + &k1 * step,
            Integrator::Rk4 => {
                let at = |v: DVector<f64>| theta.with_params(v);
                let k2 = -lift_field(&at(x + &k1 * (step / 2.0)), data, kind, &opts, t + step / 2.0)?;
                let k3 = -lift_field(&at(x + &k2 * (step / 2.0)), data, kind, &opts, t + step / 2.0)?;
                let k4 = -lift_field(&at(x + &k3 * step), data, kind, &opts, t + step)?;
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0)
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        theta = theta.with_params(next);
    }
    Ok(record)
}

/// A trajectory in the Q-chart.
#[derive(Debug, Clone, Default)]
pub struct QTrajectory {
    pub times: Vec<f64>,
    pub losses: Vec<f64>,
    pub snapshot_steps: Vec<usize>,
    pub snapshots: Vec<QCoordinates>,
}

impl QTrajectory {
    pub fn final_q(&self) -> &QCoordinates {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }
}

fn q_integrate<F>(q0: &QCoordinates, data: &Dataset, kind: LossKind, step: f64, steps: usize, stride: usize, rk4: bool, field: F) -> Result<QTrajectory>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    check_step(step, stride)?;
    let mut out = QTrajectory::default();
    let mut v = q0.vector.clone();
    for k in 0..=steps {
        let q = QCoordinates::from_vector(v.clone())?;
        let loss = model::loss_q(&q, data, kind)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: k });
        }
        out.times.push(k as f64 * step);
        out.losses.push(loss);
        if k % stride == 0 || k == steps {
            out.snapshot_steps.push(k);
            out.snapshots.push(q);
        }
        if k == steps {
            break;
        }
        let k1 = field(&v)?;
        v = if rk4 {
            let k2 = field(&(&v + &k1 * (step / 2.0)))?;
            let k3 = field(&(&v + &k2 * (step / 2.0)))?;
            let k4 = field(&(&v + &k3 * step))?;
            &v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0)
        } else {
            &v + k1 * step
        };
    }
    Ok(out)
}

/// Euclidean gradient descent directly on `vech(Q)`.
pub fn q_gradient_descent(q0: &QCoordinates, data: &Dataset, kind: LossKind, step: f64, steps: usize, record_stride: usize) -> Result<QTrajectory> {
    q_integrate(q0, data, kind, step, steps, record_stride, false, |v| {
        Ok(-model::grad_q(&QCoordinates::from_vector(v.clone())?, data, kind)?)
    })
}

/// Metric gradient flow `q̇ = −metric_q⁻¹ ∇_q 𝓛` in the Q-chart, RK4.
/// Requires `metric_q` to be invertible (`n ≥ d(d+1)/2` generic samples).
pub fn q_metric_flow(q0: &QCoordinates, data: &Dataset, kind: LossKind, step: f64, steps: usize, record_stride: usize) -> Result<QTrajectory> {
    let metric = geometry::metric_q(&data.x);
    let chol = metric.clone().cholesky().ok_or_else(|| Error::SingularMetric {
        lambda_min: numerics::sym_eig(&metric).map(|s| s.min()).unwrap_or(f64::NAN),
        at_time: None,
    })?;
    q_integrate(q0, data, kind, step, steps, record_stride, true, |v| {
        let g = model::grad_q(&QCoordinates::from_vector(v.clone())?, data, kind)?;
        Ok(-chol.solve(&g))
    })
}

/// Least-squares slope of `−log(loss − floor)` against time over the
/// samples with `t_lo ≤ t ≤ t_hi`.
pub fn decay_rate(losses: &[f64], times: &[f64], floor: f64, (t_lo, t_hi): (f64, f64)) -> Result<f64> {
    if losses.len() != times.len() {
        return Err(Error::Dimension(format!("{} losses for {} times", losses.len(), times.len())));
    }
    let mut pts = Vec::new();
    for (&l, &t) in losses.iter().zip(times) {
        if t >= t_lo && t <= t_hi {
            if !(l > floor) {
                return Err(Error::Validation(format!("loss {l} at t = {t} is not above the floor {floor}")));
            }
            pts.push((t, -(l - floor).ln()));
        }
    }
    if pts.len() < 3 {
        return Err(Error::Validation(format!("decay window [{t_lo}, {t_hi}] holds {} points, need 3", pts.len())));
    }
    let n = pts.len() as f64;
    let t_mean = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - t_mean) * (p.1 - y_mean)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Index of the first loss at or below the midpoint of the initial and
/// final losses (the median of the two).
pub fn checkpoint_index(losses: &[f64]) -> Option<usize> {
    let (first, last) = (*losses.first()?, *losses.last()?);
    let level = 0.5 * (first + last);
    losses.iter().position(|&l| l <= level)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HorizontalEvolution {
    /// Max over consecutive snapshot pairs of the relative defect.
    pub max_defect: f64,
    /// Largest `‖ΔΦ_X‖` seen.
    pub max_delta_phi: f64,
    /// Largest `‖J P^hor Δθ‖` seen.
    pub max_projected: f64,
}

/// Compares `ΔΦ_X` between consecutive snapshots with `J P^hor Δθ`, both
/// evaluated at the midpoint of the pair. The defect is
/// `‖ΔΦ − J P^hor Δθ‖ / max(‖ΔΦ‖, ‖J‖_F ‖Δθ‖)`, taken as 0 when both sides
/// vanish.
pub fn horizontal_evolution_report(traj: &TrajectoryRecord, data: &Dataset, p: f64, tol: f64) -> Result<HorizontalEvolution> {
    let mut out = HorizontalEvolution { max_defect: 0.0, max_delta_phi: 0.0, max_projected: 0.0 };
    for pair in traj.thetas.windows(2) {
        let (t0, t1) = (&pair[0], &pair[1]);
        let delta = t1.as_vector() - t0.as_vector();
        let dphi = model::realize(t1, &data.x)? - model::realize(t0, &data.x)?;
        let mid = t0.with_params((t0.as_vector() + t1.as_vector()) * 0.5);
        let geom = geometry::decompose(&mid, &data.x, p, tol)?;
        let projected = &geom.jacobian * geom.project_horizontal(&delta);
        let scale = dphi.norm().max(geom.jacobian.norm() * delta.norm());
        let defect = if scale > 0.0 { (&dphi - &projected).norm() / scale } else { 0.0 };
        out.max_defect = out.max_defect.max(defect);
        out.max_delta_phi = out.max_delta_phi.max(dphi.norm());
        out.max_projected = out.max_projected.max(projected.norm());
    }
    Ok(out)
}

/// Max relative defect of [`horizontal_evolution_report`].
pub fn horizontal_evolution_check(traj: &TrajectoryRecord, data: &Dataset, p: f64, tol: f64) -> Result<f64> {
    Ok(horizontal_evolution_report(traj, data, p, tol)?.max_defect)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceCertificate {
    pub mu_hat: f64,
    pub l_hat: f64,
    pub predicted_rate: f64,
    /// `None` when the rate is undefined (critical point, or no fit).
    pub measured_rate: Option<f64>,
    pub loss_floor: f64,
    /// `measured_rate ≥ (1 − RATE_REL_TOL) · predicted_rate`, when defined.
    pub rate_bound_holds: Option<bool>,
    pub degenerate: bool,
    pub note: &'static str,
}

pub const NEIGHBORHOOD_NOTE: &str = "neighborhood assumption unverified";

/// Builds a certificate from the last `neighborhood_fraction` of the
/// trajectory's snapshots. `mu_hat`/`l_hat` are the extreme generalized
/// eigenvalues of the Q-chart effective Hessian over the tail; the measured
/// rate is the log-gap slope over the same time window, with floor 0 for
/// squared loss and the best observed loss (minus a rounding guard) for
/// logistic loss.
pub fn certify_convergence(traj: &TrajectoryRecord, data: &Dataset, kind: LossKind, neighborhood_fraction: f64) -> Result<ConvergenceCertificate> {
    if !(neighborhood_fraction > 0.0 && neighborhood_fraction <= 1.0) {
        return Err(Error::Validation(format!("neighborhood fraction {neighborhood_fraction} not in (0, 1]")));
    }
    traj.validate()?;
    let n_snap = traj.q_snapshots.len();
    let tail_len = ((n_snap as f64) * neighborhood_fraction).ceil() as usize;
    if tail_len < 3 {
        return Err(Error::Validation(format!("trajectory tail has {tail_len} snapshots, need 3")));
    }
    let first = n_snap - tail_len;
    let mut mu_hat = f64::INFINITY;
    let mut l_hat = f64::NEG_INFINITY;
    for q in &traj.q_snapshots[first..] {
        let eff = geometry::effective_hessian_q(q, data, kind)?;
        mu_hat = mu_hat.min(eff.summary.lambda_min_eff);
        l_hat = l_hat.max(eff.summary.lambda_max_eff);
    }
    let k0 = traj.snapshot_steps[first];
    let window = (traj.times[k0], *traj.times.last().unwrap());
    let losses = &traj.losses[k0..];
    let times = &traj.times[k0..];
    let grads = &traj.grad_norms[k0..];
    let predicted_rate = 2.0 * mu_hat;

    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let loss_floor = match kind {
        LossKind::Squared => 0.0,
        LossKind::Logistic => best - 4.0 * f64::EPSILON * best.abs().max(f64::MIN_POSITIVE),
    };
    let critical = grads.iter().all(|&g| g <= 1e-12 * (1.0 + best.abs()));
    let measured_rate = if critical {
        None
    } else {
        let guard = match kind {
            LossKind::Squared => 0.0,
            LossKind::Logistic => best - loss_floor,
        };
        let (ts, ls): (Vec<f64>, Vec<f64>) =
            times.iter().zip(losses).filter(|(_, &l)| l - loss_floor > 1e3 * guard).map(|(&t, &l)| (t, l)).unzip();
        decay_rate(&ls, &ts, loss_floor, window).ok()
    };
    let rate_bound_holds = measured_rate.map(|r| r >= (1.0 - RATE_REL_TOL) * predicted_rate);
    Ok(ConvergenceCertificate {
        mu_hat,
        l_hat,
        predicted_rate,
        measured_rate,
        loss_floor,
        rate_bound_holds,
        degenerate: measured_rate.is_none(),
        note: NEIGHBORHOOD_NOTE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;
    use nalgebra::DMatrix;

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng::stream(seed, "test-x");
        DMatrix::from_fn(n, d, |_, _| crate::rng::normal(&mut rng))
    }

    fn random_theta(m: usize, d: usize, seed: u64) -> Theta {
        let mut rng = crate::rng::stream(seed, "test-theta");
        Theta::from_flat(m, d, DVector::from_vec(crate::rng::normal_vec(&mut rng, m * (d + 1)))).unwrap()
    }

    #[test]
    fn decay_rate_examples() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let exp: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        assert!((decay_rate(&exp, &times, 0.0, (0.0, 1.0)).unwrap() - 2.0).abs() <= 1e-10);
        let flat = vec![0.7; times.len()];
        assert!(decay_rate(&flat, &times, 0.0, (0.0, 1.0)).unwrap().abs() < 1e-15);
        let shifted: Vec<f64> = times.iter().map(|t| 0.5 * (-3.0 * t).exp() + 0.1).collect();
        assert!((decay_rate(&shifted, &times, 0.1, (0.0, 1.0)).unwrap() - 3.0).abs() <= 1e-8);
        assert!(decay_rate(&exp, &times, 0.0, (0.5, 0.51)).is_err());
        assert!(decay_rate(&exp, &times, 1.0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn checkpoint_rule() {
        assert_eq!(checkpoint_index(&[4.0, 3.0, 2.5, 1.9, 1.0]), Some(2));
        assert_eq!(checkpoint_index(&[1.0]), Some(0));
        assert_eq!(checkpoint_index(&[]), None);
    }

    #[test]
    fn gd_at_minimum_is_constant() {
        let teacher = random_theta(2, 3, 1);
        let x = gaussian(20, 3, 2);
        let data = Dataset::new(x.clone(), model::realize(&teacher, &x).unwrap(), Task::Regression).unwrap();
        let traj = gradient_descent(&teacher, &data, LossKind::Squared, 0.01, 5, 1).unwrap();
        traj.validate().unwrap();
        assert!(traj.thetas.iter().all(|t| t == &teacher));
        assert!(traj.losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn q_gd_scalar_recurrence() {
        let x = gaussian(10, 1, 3);
        let y = DVector::from_fn(10, |k, _| 0.7 * x[(k, 0)].powi(2));
        let data = Dataset::new(x.clone(), y, Task::Regression).unwrap();
        let lambda = x.iter().map(|v| v.powi(4)).sum::<f64>() / 10.0;
        let step = 0.1 / lambda;
        let q0 = QCoordinates::from_vector(DVector::from_element(1, -0.4)).unwrap();
        let traj = q_gradient_descent(&q0, &data, LossKind::Squared, step, 20, 1).unwrap();
        let factor = (1.0 - step * lambda).powi(2);
        for w in traj.losses.windows(2) {
            assert!((w[1] / w[0] - factor).abs() <= 1e-10);
        }
    }

    #[test]
    fn gd_velocity_is_horizontal() {
        let teacher = random_theta(3, 3, 4);
        let x = gaussian(25, 3, 5);
        let data = Dataset::new(x.clone(), model::realize(&teacher, &x).unwrap(), Task::Regression).unwrap();
        let theta0 = random_theta(3, 3, 6);
        let traj = gradient_descent(&theta0, &data, LossKind::Squared, 1e-3, 50, 1).unwrap();
        for (v, h) in traj.vertical_speed.iter().zip(&traj.horizontal_speed) {
            assert!(*v <= 1e-9 * h);
        }
    }

    #[test]
    fn huge_step_reports_non_finite() {
        let x = gaussian(10, 2, 7);
        let data = Dataset::new(x, DVector::from_element(10, 1.0), Task::Regression).unwrap();
        let err = gradient_descent(&random_theta(2, 2, 8), &data, LossKind::Squared, 1e6, 100, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn vertical_motion_leaves_predictions_fixed() {
        let theta0 = random_theta(3, 3, 9);
        let x = gaussian(20, 3, 10);
        let data = Dataset::new(x, DVector::zeros(20), Task::Regression).unwrap();
        let mut traj = TrajectoryRecord::default();
        for k in 0..20 {
            let t = k as f64 * 1e-5;
            let c: Vec<f64> = (0..3).map(|i| ((i as f64 + 1.0) * t).exp()).collect();
            let theta = symmetry::apply_group(&symmetry::GroupElement::scaling(c).unwrap(), &theta0, 2.0).unwrap();
            traj.times.push(t);
            traj.thetas.push(theta);
        }
        let report = horizontal_evolution_report(&traj, &data, 2.0, 1e-8).unwrap();
        assert!(report.max_delta_phi <= 1e-9 && report.max_projected <= 1e-9);
    }

    #[test]
    fn certificate_flags_critical_point() {
        let teacher = random_theta(1, 2, 11);
        let x = gaussian(10, 2, 12);
        let data = Dataset::new(x.clone(), model::realize(&teacher, &x).unwrap(), Task::Regression).unwrap();
        let traj = gradient_descent(&teacher, &data, LossKind::Squared, 0.01, 30, 1).unwrap();
        let cert = certify_convergence(&traj, &data, LossKind::Squared, 0.5).unwrap();
        assert!(cert.degenerate && cert.measured_rate.is_none());
        assert_eq!(cert.note, NEIGHBORHOOD_NOTE);
    }

    #[test]
    fn series_csv_columns() {
        let teacher = random_theta(1, 2, 13);
        let x = gaussian(8, 2, 14);
        let data = Dataset::new(x.clone(), model::realize(&teacher, &x).unwrap(), Task::Regression).unwrap();
        let traj = gradient_descent(&random_theta(1, 2, 15), &data, LossKind::Squared, 0.01, 3, 10).unwrap();
        assert_eq!(traj.snapshot_steps, vec![0, 3]);
        let csv = traj.series_table("series").to_csv_string().unwrap();
        assert!(csv.starts_with("time,loss,grad_norm,vertical_speed,horizontal_speed\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
