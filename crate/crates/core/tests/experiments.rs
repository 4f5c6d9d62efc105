use qgeom::experiments::{self, Experiment, ExperimentConfig};
use qgeom::model::Task;
use serde_json::json;

fn small(exp: Experiment) -> ExperimentConfig {
    let overrides: Vec<(String, String)> = match exp {
        Experiment::FalseFlatness => vec![],
        Experiment::LocalDynamics => vec![("num_seeds".into(), "2".into())],
        Experiment::ImplicitBias => vec![("num_perturbations".into(), "3".into())],
    };
    exp.config_from_json(None, &overrides).unwrap()
}

#[test]
fn audit_reproduces_emitted_rows() {
    for exp in Experiment::ALL {
        let cfg = small(exp);
        let out = exp.run(&cfg).unwrap();
        let report = experiments::audit(exp, &cfg, &out, 10).unwrap();
        assert!(report.rows_checked >= 3, "{}: {report:?}", exp.name());
        assert!(report.max_rel_error <= 1e-12, "{}: {report:?}", exp.name());
    }
}

#[test]
fn initialization_variance_scaling() {
    let cfg = ExperimentConfig { m: 4, d: 5, ..Experiment::FalseFlatness.default_config() };
    let draws = 25_000;
    let (mut a2, mut w2) = (0.0, 0.0);
    for seed in 0..draws {
        let t = experiments::initialization(&cfg.with_seed(seed)).unwrap();
        for i in 0..t.m() {
            a2 += t.a(i) * t.a(i);
            w2 += t.w(i).norm_squared();
        }
    }
    let units = (draws as f64) * 4.0;
    // E[a²] = 1/m, E‖w‖² = 1; standard errors are below 0.5% at 10⁵ units.
    assert!((a2 / units - 0.25).abs() < 0.02 * 0.25, "{}", a2 / units);
    assert!((w2 / units - 1.0).abs() < 0.02, "{}", w2 / units);
}

#[test]
fn teacher_data_is_seeded() {
    let cfg = Experiment::LocalDynamics.default_config();
    let (a, ta) = experiments::generate_teacher_data(&cfg).unwrap();
    let (b, tb) = experiments::generate_teacher_data(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_eq!(a.task, Task::Classification);
    let positives = a.y.iter().filter(|&&y| y > 0.0).count();
    assert_eq!(positives, cfg.n / 2);
    let (c, _) = experiments::generate_teacher_data(&cfg.with_seed(cfg.seed + 1)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn config_defaults_round_trip_through_json() {
    for exp in Experiment::ALL {
        let cfg = exp.default_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(exp.config_from_json(Some(&value), &[]).unwrap(), cfg);
    }
}

#[test]
fn config_rejects_unknown_and_invalid_fields() {
    let exp = Experiment::FalseFlatness;
    assert!(exp.config_from_json(Some(&json!({"learning_rate": 0.1})), &[]).is_err());
    assert!(exp.config_from_json(None, &[("tol_block.nope".into(), "1".into())]).is_err());
    assert!(exp.config_from_json(None, &[("lr".into(), "-1".into())]).is_err());
    let cfg = exp.config_from_json(Some(&json!({"seed": 9})), &[("m".into(), "3".into())]).unwrap();
    assert_eq!((cfg.seed, cfg.m), (9, 3));
}
