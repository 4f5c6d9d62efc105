use qgeom::checks::stays_regular;
use qgeom::dynamics::{self, FlowOptions, TrajectoryRecord};
use qgeom::experiments::{self, Experiment, ExperimentConfig};
use qgeom::geometry::MetricInversion;
use qgeom::model::{self, Dataset, LossKind, Theta};
use qgeom::numerics;
use qgeom::symmetry::{self, apply_group, GroupElement};

fn setup(seed: u64, d: usize, m: usize, n: usize) -> (Dataset, Theta) {
    let cfg = ExperimentConfig { d, m, n, seed, ..Experiment::FalseFlatness.default_config() };
    let (data, _) = experiments::generate_teacher_data(&cfg).unwrap();
    (data, experiments::initialization(&cfg).unwrap())
}

fn max_q_gap(a: &TrajectoryRecord, b: &TrajectoryRecord) -> f64 {
    a.q_snapshots.iter().zip(&b.q_snapshots).map(|(x, y)| (&x.matrix - &y.matrix).amax()).fold(0.0, f64::max)
}

fn restricted() -> FlowOptions {
    FlowOptions { inversion: MetricInversion::RangeRestricted, ..FlowOptions::default() }
}

/// Output weights bounded away from zero so the flow stays regular.
fn flow_start(seed: u64) -> (Dataset, Theta) {
    let (data, mut theta) = setup(seed, 3, 4, 30);
    for i in 0..theta.m() {
        let a = theta.a(i);
        theta.set_a(i, a + a.signum());
    }
    (data, theta)
}

#[test]
fn gd_loss_nonincreasing_below_inverse_smoothness() {
    let mut covered = 0;
    for seed in 0..20 {
        let (data, theta) = setup(seed, 4, 6, 30);
        let step = 2e-3;
        let traj = dynamics::gradient_descent(&theta, &data, LossKind::Squared, step, 300, 10).unwrap();
        let l_hat = traj
            .thetas
            .iter()
            .map(|t| numerics::sym_eig(&model::hess_theta(t, &data, LossKind::Squared).unwrap()).unwrap().max())
            .fold(0.0, f64::max);
        if step > 1.0 / l_hat {
            continue;
        }
        covered += 1;
        for (k, w) in traj.losses.windows(2).enumerate() {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed} step {k}: {} -> {}", w[0], w[1]);
        }
    }
    assert!(covered >= 10, "only {covered} runs satisfied the step condition");
}

#[test]
fn permuted_gd_has_identical_q_trajectory() {
    for seed in 0..10 {
        let (data, theta) = setup(seed, 4, 6, 30);
        let g = symmetry::random_orbit_element(6, (0.0, 0.0), seed).unwrap();
        assert!(g.is_pure_permutation());
        let a = dynamics::gradient_descent(&theta, &data, LossKind::Squared, 2e-3, 500, 50).unwrap();
        let b = dynamics::gradient_descent(&apply_group(&g, &theta, 2.0).unwrap(), &data, LossKind::Squared, 2e-3, 500, 50).unwrap();
        assert!(max_q_gap(&a, &b) <= 1e-9, "seed {seed}: {}", max_q_gap(&a, &b));
    }
}

#[test]
fn rescaled_gd_generally_has_different_q_trajectory() {
    let mut differ = 0;
    for seed in 0..10 {
        let (data, theta) = setup(seed, 4, 6, 30);
        let g = GroupElement::scaling(vec![2.0; 6]).unwrap();
        let a = dynamics::gradient_descent(&theta, &data, LossKind::Squared, 2e-3, 500, 50).unwrap();
        let b = dynamics::gradient_descent(&apply_group(&g, &theta, 2.0).unwrap(), &data, LossKind::Squared, 2e-3, 500, 50).unwrap();
        differ += usize::from(max_q_gap(&a, &b) > 1e-3);
    }
    assert!(differ > 5, "{differ}/10");
}

#[test]
fn quotient_flow_is_gauge_invariant() {
    let mut runs = 0;
    for seed in 0..10 {
        let (data, theta) = flow_start(seed);
        let a = dynamics::quotient_flow_with(&theta, &data, LossKind::Squared, 1e-3, 1000, 10, restricted()).unwrap();
        if !stays_regular(&a, 0.05) {
            continue;
        }
        runs += 1;
        let g = symmetry::random_orbit_element(4, (-0.7, 0.7), 100 + seed).unwrap();
        let b = dynamics::quotient_flow_with(&apply_group(&g, &theta, 2.0).unwrap(), &data, LossKind::Squared, 1e-3, 1000, 10, restricted()).unwrap();
        assert!(max_q_gap(&a, &b) <= 1e-6, "seed {seed}: {}", max_q_gap(&a, &b));
        if runs == 4 {
            break;
        }
    }
    assert_eq!(runs, 4);
}

#[test]
fn quotient_flow_projects_to_q_chart_flow() {
    let mut runs = 0;
    for seed in 20..30 {
        let (data, theta) = flow_start(seed);
        let a = dynamics::quotient_flow_with(&theta, &data, LossKind::Squared, 1e-3, 1000, 10, restricted()).unwrap();
        if !stays_regular(&a, 0.05) {
            continue;
        }
        runs += 1;
        let b = dynamics::q_metric_flow(&model::q_matrix(&theta), &data, LossKind::Squared, 1e-3, 1000, 10).unwrap();
        let gap = a.q_snapshots.iter().zip(&b.snapshots).map(|(x, y)| (&x.matrix - &y.matrix).amax()).fold(0.0, f64::max);
        assert!(gap <= 1e-5, "seed {seed}: {gap}");
        if runs == 4 {
            break;
        }
    }
    assert_eq!(runs, 4);
}

/// Squared loss in the Q-chart: `q − q*` decays like `e^{−t}` under the
/// metric flow, so the loss of a realizable problem is `L₀ e^{−2t}`.
#[test]
fn q_metric_flow_matches_closed_form() {
    let (data, theta) = setup(3, 3, 4, 30);
    let traj = dynamics::q_metric_flow(&model::q_matrix(&theta), &data, LossKind::Squared, 1e-3, 2000, 100).unwrap();
    let l0 = traj.losses[0];
    for (t, l) in traj.times.iter().zip(&traj.losses).step_by(250) {
        let expected = l0 * (-2.0 * t).exp();
        assert!((l - expected).abs() <= 1e-9 * expected, "t = {t}: {l} vs {expected}");
    }
}

#[test]
fn gd_vertical_speed_vanishes() {
    for seed in 0..5 {
        let (data, theta) = setup(seed, 4, 6, 30);
        let traj = dynamics::gradient_descent(&theta, &data, LossKind::Squared, 1e-2, 200, 10).unwrap();
        for (v, h) in traj.vertical_speed.iter().zip(&traj.horizontal_speed) {
            assert!(*v <= 1e-9 * h.max(1e-300), "{v} vs {h}");
        }
    }
}

#[test]
fn certificate_at_regression_minimum() {
    let (data, theta) = flow_start(2);
    let traj = dynamics::quotient_flow_with(&theta, &data, LossKind::Squared, 1e-3, 2000, 50, restricted()).unwrap();
    let cert = dynamics::certify_convergence(&traj, &data, LossKind::Squared, 0.5).unwrap();
    assert!((cert.mu_hat - 1.0).abs() <= 1e-6 && (cert.l_hat - 1.0).abs() <= 1e-6, "{cert:?}");
    assert_eq!(cert.rate_bound_holds, Some(true));
    assert_eq!(cert.note, dynamics::NEIGHBORHOOD_NOTE);
}
