//! Deterministic drivers for the three numerical studies: symmetry-induced
//! false flatness, curvature versus local dynamics under logistic loss, and
//! the implicit bias of underdetermined quadratic regression.
//!
//! Every random draw comes from [`rng::stream`] with a fixed tag, so a run
//! is a pure function of its [`ExperimentConfig`]. Seeds are processed in
//! parallel and merged in seed order.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::complexity::{self, ComplexityReport};
use crate::dynamics;
use crate::error::{Error, Result};
use crate::geometry;
use crate::model::{self, Dataset, LossKind, Task, Theta};
use crate::numerics;
use crate::rng;
use crate::symmetry::{self, GroupElement};
use crate::table::{format_opt, format_real, Table};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Homogeneity degree of the quadratic activation.
pub const P: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolBlock {
    pub rank_tol: f64,
    pub angle_tol: f64,
    pub spectra_tol: f64,
}

impl Default for TolBlock {
    fn default() -> Self {
        TolBlock { rank_tol: numerics::DEFAULT_RANK_TOL, angle_tol: geometry::DEFAULT_ANGLE_TOL, spectra_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub lr: f64,
    pub steps: usize,
    pub num_orbit_reps: usize,
    /// Log-scale range of the orbit rescalings.
    pub scale_log_range: (f64, f64),
    /// Perturbations per seed (local dynamics); number of initializations
    /// (implicit bias).
    pub num_perturbations: usize,
    pub perturbation_scale: f64,
    pub interpolation_threshold: f64,
    pub tol_block: TolBlock,
    /// Independent datasets in the local-dynamics study.
    pub num_seeds: usize,
    /// GD steps in the short-run decay-rate fit.
    pub decay_horizon: usize,
    /// Allowed relative deviation of orbit-control decay rates.
    pub decay_band: f64,
    /// Allowed relative deviation of a perturbation's loss.
    pub loss_band: f64,
    /// Draws allowed per accepted random sample.
    pub max_retries: usize,
    /// Fresh initializations tried when training to the interpolation
    /// threshold stalls.
    pub max_restarts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    FalseFlatness,
    LocalDynamics,
    ImplicitBias,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::FalseFlatness, Experiment::LocalDynamics, Experiment::ImplicitBias];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::FalseFlatness => "false-flatness",
            Experiment::LocalDynamics => "local-dynamics",
            Experiment::ImplicitBias => "implicit-bias",
        }
    }

    pub fn default_config(self) -> ExperimentConfig {
        let base = ExperimentConfig {
            d: 4,
            m: 6,
            n: 30,
            seed: 0,
            loss: LossKind::Squared,
            lr: 0.01,
            steps: 60_000,
            num_orbit_reps: 6,
            scale_log_range: (-1.0, 1.0),
            num_perturbations: 4,
            perturbation_scale: 0.05,
            interpolation_threshold: 1e-10,
            tol_block: TolBlock::default(),
            num_seeds: 1,
            decay_horizon: 50,
            decay_band: 0.05,
            loss_band: 0.2,
            max_retries: 100,
            max_restarts: 5,
        };
        match self {
            Experiment::FalseFlatness => base,
            Experiment::LocalDynamics => ExperimentConfig {
                n: 60,
                loss: LossKind::Logistic,
                lr: 0.1,
                steps: 2_000,
                num_orbit_reps: 4,
                scale_log_range: (-0.01, 0.01),
                num_seeds: 5,
                ..base
            },
            Experiment::ImplicitBias => ExperimentConfig {
                d: 6,
                m: 8,
                n: 12,
                lr: 0.05,
                steps: 50_000,
                interpolation_threshold: 1e-8,
                num_perturbations: 8,
                ..base
            },
        }
    }

    /// Parses a config for this experiment: the JSON object is laid over the
    /// defaults, then `key=value` overrides (dotted paths, JSON or bare
    /// string values) are applied. Unknown keys are rejected.
    pub fn config_from_json(self, file: Option<&Value>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
        let mut merged = serde_json::to_value(self.default_config())?;
        if let Some(file) = file {
            if !file.is_object() {
                return Err(Error::Validation("config must be a JSON object".into()));
            }
            merge_into(&mut merged, file, "")?;
        }
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut merged, key, value)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| Error::Validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(self, cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
        match self {
            Experiment::FalseFlatness => exp_false_flatness(cfg),
            Experiment::LocalDynamics => exp_local_dynamics(cfg),
            Experiment::ImplicitBias => exp_implicit_bias(cfg),
        }
    }
}

fn merge_into(target: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(t), Value::Object(p)) = (target, patch) else {
        return Err(Error::Validation(format!("config key {prefix:?} is not an object")));
    };
    for (key, value) in p {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let slot = t.get_mut(key).ok_or_else(|| Error::Validation(format!("unknown config field {path:?}")))?;
        if slot.is_object() {
            merge_into(slot, value, &path)?;
        } else {
            *slot = value.clone();
        }
    }
    Ok(())
}

fn set_path(target: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut slot = target;
    for part in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Validation(format!("unknown config field {path:?}")))?;
    }
    *slot = value;
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("m", self.m),
            ("n", self.n),
            ("steps", self.steps),
            ("num_orbit_reps", self.num_orbit_reps),
            ("num_perturbations", self.num_perturbations),
            ("num_seeds", self.num_seeds),
            ("decay_horizon", self.decay_horizon),
            ("max_retries", self.max_retries),
        ];
        // max_restarts may be zero.
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        let positive = [
            ("lr", self.lr),
            ("perturbation_scale", self.perturbation_scale),
            ("interpolation_threshold", self.interpolation_threshold),
            ("decay_band", self.decay_band),
            ("loss_band", self.loss_band),
            ("tol_block.rank_tol", self.tol_block.rank_tol),
            ("tol_block.angle_tol", self.tol_block.angle_tol),
            ("tol_block.spectra_tol", self.tol_block.spectra_tol),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!("{name} must be positive and finite, got {v}")));
        }
        let (lo, hi) = self.scale_log_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Validation(format!("scale_log_range ({lo}, {hi}) must satisfy lo <= hi")));
        }
        Ok(())
    }

    pub fn task(&self) -> Task {
        match self.loss {
            LossKind::Squared => Task::Regression,
            LossKind::Logistic => Task::Classification,
        }
    }

    /// The same config with another seed.
    pub fn with_seed(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl Assertion {
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Assertion { name: name.into(), pass: measured <= tolerance, measured, tolerance }
    }

    pub fn above(name: &str, measured: f64, tolerance: f64) -> Self {
        Assertion { name: name.into(), pass: measured > tolerance, measured, tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub experiment: String,
    pub library_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub assertions: Vec<Assertion>,
    pub metrics: BTreeMap<String, Value>,
    pub provenance: Provenance,
}

impl Summary {
    fn new(experiment: Experiment, cfg: &ExperimentConfig) -> Self {
        Summary {
            experiment: experiment.name().into(),
            assertions: Vec::new(),
            metrics: BTreeMap::new(),
            provenance: Provenance {
                experiment: experiment.name().into(),
                library_version: VERSION.into(),
                seed: cfg.seed,
                config: cfg.clone(),
            },
        }
    }

    fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics.insert(name.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub summary: Summary,
}

impl ExperimentOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes `config.json`, one CSV per table and `summary.json` into a new
    /// directory. An existing directory is never reused.
    pub fn write_run_dir(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            return Err(Error::Validation(format!("output directory {} already exists", dir.display())));
        }
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::create_dir(dir)?;
        let config = serde_json::to_string_pretty(&self.summary.provenance.config)?;
        std::fs::write(dir.join("config.json"), config + "\n")?;
        for table in &self.tables {
            table.write_to_dir(dir)?;
        }
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut rng::StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    let data = rng::normal_vec(rng, rows * cols);
    DMatrix::from_row_slice(rows, cols, &data)
}

/// Inputs `x ~ N(0, I_d)`; teacher `aᵢ ~ N(0, 1)`, `wᵢ` uniform on the unit
/// sphere. Regression targets are teacher outputs; classification labels
/// split the teacher outputs at their median.
pub fn generate_teacher_data(cfg: &ExperimentConfig) -> Result<(Dataset, Theta)> {
    let (m, d, n) = (cfg.m, cfg.d, cfg.n);
    let mut trng = rng::stream(cfg.seed, "teacher");
    let mut teacher = Theta::zeros(m, d);
    for i in 0..m {
        teacher.set_a(i, rng::normal(&mut trng));
        let mut w = DVector::from_vec(rng::normal_vec(&mut trng, d));
        while w.norm() == 0.0 {
            w = DVector::from_vec(rng::normal_vec(&mut trng, d));
        }
        teacher.w_mut(i).copy_from(&w.normalize());
    }
    let x = gaussian_matrix(&mut rng::stream(cfg.seed, "data"), n, d);
    let f = model::realize(&teacher, &x)?;
    let data = match cfg.task() {
        Task::Regression => Dataset::new(x, f, Task::Regression)?,
        Task::Classification => {
            let med = median(f.as_slice());
            let y = f.map(|v| if v >= med { 1.0 } else { -1.0 });
            Dataset::new(x, y, Task::Classification)?
        }
    };
    Ok((data, teacher))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `aᵢ ~ N(0, 1/m)`, `wᵢ ~ N(0, I/d)`, drawn from the `"init"` stream.
pub fn initialization(cfg: &ExperimentConfig) -> Result<Theta> {
    initialization_tagged(cfg, "init")
}

/// Like [`initialization`] with an explicit stream tag. Draws with a
/// vanishing or colliding unit are redrawn up to `max_retries` times.
pub fn initialization_tagged(cfg: &ExperimentConfig, tag: &str) -> Result<Theta> {
    let (m, d) = (cfg.m, cfg.d);
    let mut irng = rng::stream(cfg.seed, tag);
    let (sa, sw) = (1.0 / (m as f64).sqrt(), 1.0 / (d as f64).sqrt());
    for _ in 0..cfg.max_retries {
        let mut theta = Theta::zeros(m, d);
        for i in 0..m {
            theta.set_a(i, sa * rng::normal(&mut irng));
            let w = DVector::from_vec(rng::normal_vec(&mut irng, d)) * sw;
            theta.w_mut(i).copy_from(&w);
        }
        if !geometry::unit_flags(&theta).iter().any(geometry::UnitFlags::any) {
            return Ok(theta);
        }
    }
    Err(Error::RetriesExhausted(format!("no initialization without vanishing or colliding units in {} draws", cfg.max_retries)))
}

fn train(theta0: &Theta, data: &Dataset, cfg: &ExperimentConfig) -> Result<dynamics::TrajectoryRecord> {
    dynamics::train_until(theta0, data, cfg.loss, cfg.lr, cfg.steps, cfg.interpolation_threshold, cfg.steps.max(1))
}

/// Trains from [`initialization`] to the interpolation threshold. When a
/// run stalls above it (GD can settle where the signs of `a` cannot match
/// the target's inertia), training restarts from a fresh draw on the
/// `"init/restart{r}"` stream, at most `max_restarts` times; a diverged run
/// counts as stalled. Returns the
/// trained parameters and the number of restarts used.
pub fn train_to_threshold(data: &Dataset, cfg: &ExperimentConfig) -> Result<(Theta, usize)> {
    let mut best = f64::INFINITY;
    for r in 0..=cfg.max_restarts {
        let theta0 = if r == 0 { initialization(cfg)? } else { initialization_tagged(cfg, &format!("init/restart{r}"))? };
        let traj = match train(&theta0, data, cfg) {
            Ok(traj) => traj,
            Err(Error::NonFinite { .. }) => continue,
            Err(e) => return Err(e),
        };
        let final_loss = traj.final_loss();
        if final_loss <= cfg.interpolation_threshold {
            return Ok((traj.final_theta().clone(), r));
        }
        best = best.min(final_loss);
    }
    Err(Error::NotConverged { final_loss: best, threshold: cfg.interpolation_threshold })
}

/// Serializes parameters as `;`-joined reals.
pub fn encode_theta(theta: &Theta) -> String {
    theta.as_vector().iter().map(|&v| format_real(v)).collect::<Vec<_>>().join(";")
}

pub fn decode_theta(m: usize, d: usize, field: &str) -> Result<Theta> {
    let values = field
        .split(';')
        .map(|s| s.parse::<f64>().map_err(|e| Error::Validation(format!("bad real {s:?}: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    Theta::from_flat(m, d, DVector::from_vec(values))
}

fn encode_group(g: &GroupElement) -> (String, String) {
    let perm = g.perm().iter().map(|p| (p + 1).to_string()).collect::<Vec<_>>().join(";");
    let scales = g.scales().iter().map(|&c| format_real(c)).collect::<Vec<_>>().join(";");
    (perm, scales)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    Base,
    Perm,
    Scale,
    Mixed,
}

impl RepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RepKind::Base => "base",
            RepKind::Perm => "perm",
            RepKind::Scale => "scale",
            RepKind::Mixed => "mixed",
        }
    }
}

/// Orbit representatives: the identity first, then perm / scale / mixed
/// elements in rotation, one stream per representative.
pub fn orbit_representatives(cfg: &ExperimentConfig, tag: &str) -> Result<Vec<(RepKind, GroupElement)>> {
    let m = cfg.m;
    let mut reps = vec![(RepKind::Base, GroupElement::identity(m))];
    for j in 1..=cfg.num_orbit_reps {
        let stream = format!("{tag}/{j}");
        let kind = [RepKind::Perm, RepKind::Scale, RepKind::Mixed][(j - 1) % 3];
        let g = match kind {
            RepKind::Perm => symmetry::random_orbit_element_tagged(m, (0.0, 0.0), cfg.seed, &stream)?,
            RepKind::Scale => {
                let mixed = symmetry::random_orbit_element_tagged(m, cfg.scale_log_range, cfg.seed, &stream)?;
                GroupElement::scaling(mixed.scales().to_vec())?
            }
            _ => symmetry::random_orbit_element_tagged(m, cfg.scale_log_range, cfg.seed, &stream)?,
        };
        reps.push((kind, g));
    }
    Ok(reps)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn prediction_defect(theta: &Theta, base_pred: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
    let pred = model::realize(theta, x)?;
    Ok((pred - base_pred).amax() / base_pred.amax().max(1.0))
}

/// Spectra measured at one representative.
#[derive(Debug, Clone)]
pub struct RepSpectra {
    pub theta: Vec<f64>,
    pub theta_projected: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn representative_spectra(theta: &Theta, data: &Dataset, kind: LossKind, tol: &TolBlock) -> Result<RepSpectra> {
    let hess = model::hess_theta(theta, data, kind)?;
    let geom = geometry::decompose(theta, &data.x, P, tol.rank_tol)?;
    let (_, projected) = geometry::projected_hessian(theta, data, kind, &geom)?;
    let eff = geometry::effective_hessian_q(&model::q_matrix(theta), data, kind)?;
    Ok(RepSpectra { theta: numerics::sym_eigenvalues(&hess)?, theta_projected: projected, q: eff.summary.spectrum })
}

pub fn exp_false_flatness(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    if cfg.loss != LossKind::Squared {
        return Err(Error::Validation("false-flatness needs the squared loss".into()));
    }
    if cfg.n < model::sym_dim(cfg.d) {
        return Err(Error::Validation(format!("false-flatness needs n >= d(d+1)/2 = {}", model::sym_dim(cfg.d))));
    }
    let mut summary = Summary::new(Experiment::FalseFlatness, cfg);
    let (data, _) = generate_teacher_data(cfg)?;
    let (base, restarts) = train_to_threshold(&data, cfg)?;
    summary.metric("restarts", restarts);
    let base_pred = model::realize(&base, &data.x)?;
    summary.metric("final_loss", model::loss(&base, &data, cfg.loss)?);

    let reps = orbit_representatives(cfg, "orbit")?;
    let measured = reps
        .par_iter()
        .map(|(kind, g)| {
            let theta = symmetry::apply_group(g, &base, P)?;
            let spectra = representative_spectra(&theta, &data, cfg.loss, &cfg.tol_block)?;
            let defect = prediction_defect(&theta, &base_pred, &data.x)?;
            Ok((*kind, g.clone(), theta, spectra, defect))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut spectra = Table::new("spectra", &["rep_id", "rep_kind", "space", "index", "eigenvalue"]);
    let mut representatives =
        Table::new("representatives", &["rep_id", "rep_kind", "perm", "scales", "prediction_defect", "theta_lambda_max", "theta"]);
    for (id, (kind, g, theta, s, defect)) in measured.iter().enumerate() {
        for (space, values) in [("theta", &s.theta), ("theta_projected", &s.theta_projected), ("q", &s.q)] {
            for (k, v) in values.iter().enumerate() {
                spectra.push(vec![id.to_string(), kind.as_str().into(), space.into(), k.to_string(), format_real(*v)]);
            }
        }
        let (perm, scales) = encode_group(g);
        let lmax = s.theta.last().copied().unwrap_or(f64::NAN);
        representatives.push(vec![
            id.to_string(),
            kind.as_str().into(),
            perm,
            scales,
            format_real(*defect),
            format_real(lmax),
            encode_theta(theta),
        ]);
    }

    let base_s = &measured[0].3;
    let max_defect = measured.iter().map(|r| r.4).fold(0.0, f64::max);
    let q_spread = measured.iter().map(|r| max_rel_diff(&r.3.q, &base_s.q)).fold(0.0, f64::max);
    let perm_spread = measured
        .iter()
        .filter(|r| r.0 == RepKind::Perm)
        .map(|r| max_rel_diff(&r.3.theta, &base_s.theta))
        .fold(0.0, f64::max);
    let base_lmax = *base_s.theta.last().unwrap();
    let scale_shift = measured
        .iter()
        .filter(|r| matches!(r.0, RepKind::Scale | RepKind::Mixed))
        .map(|r| (r.3.theta.last().unwrap() - base_lmax).abs() / base_lmax.abs())
        .fold(0.0, f64::max);
    summary.assertions.push(Assertion::at_most("prediction_defect", max_defect, 1e-9));
    summary.assertions.push(Assertion::at_most("q_spectra_spread", q_spread, cfg.tol_block.spectra_tol));
    summary.assertions.push(Assertion::at_most("perm_theta_spectra_spread", perm_spread, 1e-9));
    summary.assertions.push(Assertion::above("rescaled_theta_lambda_max_shift", scale_shift, 0.05));
    let base_theta_small = base_s.theta.iter().filter(|l| l.abs() <= cfg.tol_block.rank_tol * base_lmax.abs()).count();
    summary.metric("base_theta_near_zero_eigenvalues", base_theta_small);
    summary.metric("base_q_lambda_min", base_s.q.first().copied());
    Ok(ExperimentOutput { tables: vec![spectra, representatives], summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    Checkpoint,
    Orbit,
    Perturb,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Checkpoint => "checkpoint",
            PointKind::Orbit => "orbit",
            PointKind::Perturb => "perturb",
        }
    }
}

/// Descriptors of one point in the local-dynamics study.
#[derive(Debug, Clone)]
pub struct PointDescriptors {
    pub loss: f64,
    pub q_trace: f64,
    pub q_frob: f64,
    pub q_lambda_min_pos: Option<f64>,
    pub theta_cond: Option<f64>,
    pub decay_rate: f64,
}

pub fn point_descriptors(theta: &Theta, data: &Dataset, cfg: &ExperimentConfig) -> Result<PointDescriptors> {
    let q = model::q_matrix(theta);
    let hess_q = model::hess_q(&q, data, cfg.loss)?;
    let q_eigs = numerics::sym_eigenvalues(&hess_q)?;
    let theta_eigs = numerics::sym_eigenvalues(&model::hess_theta(theta, data, cfg.loss)?)?;
    let traj = dynamics::gradient_descent(theta, data, cfg.loss, cfg.lr, cfg.decay_horizon, cfg.decay_horizon)?;
    let window = (0.0, traj.times.last().copied().unwrap_or(0.0));
    Ok(PointDescriptors {
        loss: traj.losses[0],
        q_trace: hess_q.trace(),
        q_frob: hess_q.norm(),
        q_lambda_min_pos: geometry::smallest_positive_eigenvalue(&q_eigs, cfg.tol_block.rank_tol),
        theta_cond: geometry::condition_number_nonzero(&theta_eigs, cfg.tol_block.rank_tol),
        decay_rate: dynamics::decay_rate(&traj.losses, &traj.times, 0.0, window)?,
    })
}

struct SeedResult {
    seed: u64,
    points: Vec<(PointKind, Theta, PointDescriptors)>,
    checkpoint_step: usize,
    perturb_draws: usize,
}

fn local_dynamics_seed(cfg: &ExperimentConfig) -> Result<SeedResult> {
    let (data, _) = generate_teacher_data(cfg)?;
    let theta0 = initialization(cfg)?;
    let traj = dynamics::gradient_descent(&theta0, &data, cfg.loss, cfg.lr, cfg.steps, 1)?;
    let k = dynamics::checkpoint_index(&traj.losses).unwrap_or(0);
    let checkpoint = traj.thetas[k].clone();
    let base_loss = traj.losses[k];

    let mut points = vec![(PointKind::Checkpoint, checkpoint.clone())];
    for (_, g) in orbit_representatives(cfg, "orbit")?.into_iter().skip(1) {
        points.push((PointKind::Orbit, symmetry::apply_group(&g, &checkpoint, P)?));
    }
    let mut prng = rng::stream(cfg.seed, "perturb");
    let mut draws = 0;
    for j in 0..cfg.num_perturbations {
        let mut accepted = None;
        for _ in 0..cfg.max_retries {
            draws += 1;
            let noise = DVector::from_vec(rng::normal_vec(&mut prng, checkpoint.dim())) * cfg.perturbation_scale;
            let candidate = checkpoint.with_params(checkpoint.as_vector() + noise);
            let loss = model::loss(&candidate, &data, cfg.loss)?;
            if (loss - base_loss).abs() <= cfg.loss_band * base_loss {
                accepted = Some(candidate);
                break;
            }
        }
        let candidate = accepted.ok_or_else(|| {
            Error::RetriesExhausted(format!(
                "perturbation {j} of seed {}: no draw within ±{} of loss {base_loss:.6e} after {} tries ({draws} draws in total)",
                cfg.seed, cfg.loss_band, cfg.max_retries
            ))
        })?;
        points.push((PointKind::Perturb, candidate));
    }
    let points = points
        .into_iter()
        .map(|(kind, theta)| {
            let desc = point_descriptors(&theta, &data, cfg)?;
            Ok((kind, theta, desc))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedResult { seed: cfg.seed, points, checkpoint_step: k, perturb_draws: draws })
}

/// Average ranks (ties share the mean rank).
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r = sxy / (sxx * syy).sqrt();
    r.is_finite().then_some(r)
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

type Descriptor = fn(&PointDescriptors) -> Option<f64>;

pub fn exp_local_dynamics(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    if cfg.loss != LossKind::Logistic {
        return Err(Error::Validation("local-dynamics needs the logistic loss".into()));
    }
    let mut summary = Summary::new(Experiment::LocalDynamics, cfg);
    let seeds: Vec<u64> = (0..cfg.num_seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let results = seeds.par_iter().map(|&s| local_dynamics_seed(&cfg.with_seed(s))).collect::<Result<Vec<_>>>()?;

    let mut pooled = Table::new(
        "pooled",
        &["seed", "point_id", "point_kind", "loss", "q_trace", "q_frob", "q_lambda_min_pos", "theta_cond", "decay_rate", "theta"],
    );
    let mut q_dev: f64 = 0.0;
    let mut rate_dev: f64 = 0.0;
    for r in &results {
        let c = &r.points[0].2;
        for (id, (kind, theta, p)) in r.points.iter().enumerate() {
            pooled.push(vec![
                r.seed.to_string(),
                id.to_string(),
                kind.as_str().into(),
                format_real(p.loss),
                format_real(p.q_trace),
                format_real(p.q_frob),
                format_opt(p.q_lambda_min_pos),
                format_opt(p.theta_cond),
                format_real(p.decay_rate),
                encode_theta(theta),
            ]);
            if *kind == PointKind::Orbit {
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE);
                let lm = match (p.q_lambda_min_pos, c.q_lambda_min_pos) {
                    (Some(a), Some(b)) => rel(a, b),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                q_dev = q_dev.max(rel(p.q_trace, c.q_trace)).max(rel(p.q_frob, c.q_frob)).max(lm);
                rate_dev = rate_dev.max(rel(p.decay_rate, c.decay_rate));
            }
        }
    }

    let mut corr = Table::new("correlations", &["descriptor", "spearman", "pearson", "count"]);
    let all: Vec<&PointDescriptors> = results.iter().flat_map(|r| r.points.iter().map(|p| &p.2)).collect();
    let descriptors: [(&str, Descriptor); 5] = [
        ("loss", |p| Some(p.loss)),
        ("q_trace", |p| Some(p.q_trace)),
        ("q_frob", |p| Some(p.q_frob)),
        ("q_lambda_min_pos", |p| p.q_lambda_min_pos),
        ("theta_cond", |p| p.theta_cond),
    ];
    for (name, get) in descriptors {
        let (xs, ys): (Vec<f64>, Vec<f64>) = all.iter().filter_map(|p| get(p).map(|v| (v, p.decay_rate))).unzip();
        let (s, pe) = (spearman(&xs, &ys), pearson(&xs, &ys));
        corr.push(vec![name.into(), format_opt(s), format_opt(pe), xs.len().to_string()]);
        summary.metric(&format!("spearman_{name}"), s);
    }

    summary.assertions.push(Assertion::at_most("orbit_q_descriptor_deviation", q_dev, 1e-8));
    summary.assertions.push(Assertion::at_most("orbit_decay_rate_deviation", rate_dev, cfg.decay_band));
    summary.metric("checkpoint_steps", results.iter().map(|r| r.checkpoint_step).collect::<Vec<_>>());
    summary.metric("perturbation_draws", results.iter().map(|r| r.perturb_draws).collect::<Vec<_>>());
    Ok(ExperimentOutput { tables: vec![pooled, corr], summary })
}

fn complexity_header(prefix: &[&'static str]) -> Vec<&'static str> {
    let mut h = prefix.to_vec();
    h.extend(ComplexityReport::CSV_HEADER);
    h.push("theta");
    h
}

fn spread(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let scale = values.map(f64::abs).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    (max - min) / scale
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn exp_implicit_bias(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    if cfg.loss != LossKind::Squared {
        return Err(Error::Validation("implicit-bias needs the squared loss".into()));
    }
    if cfg.n >= model::sym_dim(cfg.d) {
        return Err(Error::Validation(format!("implicit-bias needs n < d(d+1)/2 = {}", model::sym_dim(cfg.d))));
    }
    let mut summary = Summary::new(Experiment::ImplicitBias, cfg);
    let (data, _) = generate_teacher_data(cfg)?;

    let (base, restarts) = train_to_threshold(&data, cfg)?;
    summary.metric("restarts", restarts);
    let mut within = Table::new("within_orbit", &complexity_header(&["rep_id", "rep_kind"]));
    let mut reports = Vec::new();
    for (id, (kind, g)) in orbit_representatives(cfg, "orbit")?.iter().enumerate() {
        let theta = symmetry::apply_group(g, &base, P)?;
        let report = complexity::complexity_report(&theta, P)?;
        let mut row = vec![id.to_string(), kind.as_str().to_string()];
        row.extend(report.csv_fields());
        row.push(encode_theta(&theta));
        within.push(row);
        reports.push(report);
    }
    let q_spread = (0..reports[0].q_level().len())
        .map(|k| spread(reports.iter().map(|r| r.q_level()[k])))
        .fold(0.0, f64::max);
    let norm_spread = spread(reports.iter().map(|r| r.theta_norm_sq));
    summary.assertions.push(Assertion::at_most("within_orbit_q_spread", q_spread, 1e-9));
    summary.assertions.push(Assertion::above("within_orbit_theta_norm_spread", norm_spread, 0.1));

    let seeds: Vec<usize> = (0..cfg.num_perturbations).collect();
    let runs = seeds
        .par_iter()
        .map(|&s| {
            let theta0 = initialization_tagged(cfg, &format!("init/{s}"))?;
            let traj = train(&theta0, &data, cfg)?;
            Ok((traj.final_theta().clone(), traj.final_loss()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut across = Table::new("across_seeds", &complexity_header(&["init_id", "final_loss", "interpolated"]));
    let mut ok_reports = Vec::new();
    let mut failed = Vec::new();
    for (s, (theta, loss)) in runs.iter().enumerate() {
        let report = complexity::complexity_report(theta, P)?;
        let interpolated = *loss <= cfg.interpolation_threshold;
        let mut row = vec![s.to_string(), format_real(*loss), interpolated.to_string()];
        row.extend(report.csv_fields());
        row.push(encode_theta(theta));
        across.push(row);
        if interpolated {
            ok_reports.push(report);
        } else {
            failed.push(s);
        }
    }
    let interpolated = ok_reports.len();
    summary.assertions.push(Assertion {
        name: "seeds_interpolating".into(),
        pass: 2 * interpolated >= runs.len(),
        measured: interpolated as f64,
        tolerance: runs.len() as f64 / 2.0,
    });
    if 2 * failed.len() > runs.len() {
        let worst = runs.iter().map(|r| r.1).fold(0.0, f64::max);
        return Err(Error::NotConverged { final_loss: worst, threshold: cfg.interpolation_threshold });
    }
    summary.metric("failed_inits", &failed);
    summary.metric("final_losses", runs.iter().map(|r| r.1).collect::<Vec<_>>());
    for (name, get) in [
        ("q_frobenius", (|r: &ComplexityReport| r.q_frobenius) as fn(&ComplexityReport) -> f64),
        ("q_nuclear", |r| r.q_nuclear),
        ("q_operator", |r| r.q_operator),
        ("stable_rank", |r| r.stable_rank.unwrap_or(0.0)),
        ("quotient_theta_norm", |r| r.quotient_theta_norm),
        ("theta_norm_sq", |r| r.theta_norm_sq),
    ] {
        let values: Vec<f64> = ok_reports.iter().map(get).collect();
        let (mean, std) = mean_std(&values);
        summary.metric(&format!("{name}_mean"), mean);
        summary.metric(&format!("{name}_std"), std);
    }
    Ok(ExperimentOutput { tables: vec![within, across], summary })
}

/// Outcome of re-deriving sampled rows from their serialized parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub rows_checked: usize,
    pub max_rel_error: f64,
}

fn parse_real(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Validation(format!("bad real {s:?}: {e}")))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_real(s).map(Some)
    }
}

fn rel_err(recomputed: f64, stored: f64) -> f64 {
    (recomputed - stored).abs() / stored.abs().max(1e-300)
}

/// Recomputes `rows` randomly chosen rows of the run's main table from the
/// `theta` column and reports the largest relative discrepancy.
pub fn audit(experiment: Experiment, cfg: &ExperimentConfig, output: &ExperimentOutput, rows: usize) -> Result<AuditReport> {
    use rand::seq::index::sample;
    let table_name = match experiment {
        Experiment::FalseFlatness => "representatives",
        Experiment::LocalDynamics => "pooled",
        Experiment::ImplicitBias => "within_orbit",
    };
    let table = output.table(table_name).ok_or_else(|| Error::Validation(format!("missing table {table_name}")))?;
    let col = |name: &str| table.column(name).ok_or_else(|| Error::Validation(format!("missing column {name}")));
    let theta_col = col("theta")?;
    let picks = sample(&mut rng::stream(cfg.seed, "audit"), table.rows.len(), rows.min(table.rows.len()));
    let mut max_rel_error: f64 = 0.0;
    for i in picks.iter() {
        let row = &table.rows[i];
        let theta = decode_theta(cfg.m, cfg.d, &row[theta_col])?;
        match experiment {
            Experiment::FalseFlatness => {
                let (data, _) = generate_teacher_data(cfg)?;
                let spectra = representative_spectra(&theta, &data, cfg.loss, &cfg.tol_block)?;
                let stored = parse_real(&row[col("theta_lambda_max")?])?;
                max_rel_error = max_rel_error.max(rel_err(*spectra.theta.last().unwrap(), stored));
                let id = &row[col("rep_id")?];
                for srow in output.table("spectra").into_iter().flat_map(|t| &t.rows).filter(|r| &r[0] == id) {
                    let k: usize = srow[3].parse().map_err(|_| Error::Validation("bad spectrum index".into()))?;
                    let values = match srow[2].as_str() {
                        "theta" => &spectra.theta,
                        "theta_projected" => &spectra.theta_projected,
                        _ => &spectra.q,
                    };
                    let stored = parse_real(&srow[4])?;
                    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    max_rel_error = max_rel_error.max((values[k] - stored).abs() / scale.max(1e-300));
                }
            }
            Experiment::LocalDynamics => {
                let seed: u64 = row[col("seed")?].parse().map_err(|_| Error::Validation("bad seed".into()))?;
                let seed_cfg = cfg.with_seed(seed);
                let (data, _) = generate_teacher_data(&seed_cfg)?;
                let p = point_descriptors(&theta, &data, &seed_cfg)?;
                for (name, value) in [("loss", p.loss), ("q_trace", p.q_trace), ("q_frob", p.q_frob), ("decay_rate", p.decay_rate)] {
                    max_rel_error = max_rel_error.max(rel_err(value, parse_real(&row[col(name)?])?));
                }
                for (name, value) in [("q_lambda_min_pos", p.q_lambda_min_pos), ("theta_cond", p.theta_cond)] {
                    match (value, parse_opt(&row[col(name)?])?) {
                        (Some(a), Some(b)) => max_rel_error = max_rel_error.max(rel_err(a, b)),
                        (None, None) => {}
                        _ => max_rel_error = f64::INFINITY,
                    }
                }
            }
            Experiment::ImplicitBias => {
                let fields = complexity::complexity_report(&theta, P)?.csv_fields();
                for (k, name) in ComplexityReport::CSV_HEADER.iter().enumerate() {
                    let stored = &row[col(name)?];
                    if *name == "sv" || *name == "closure_attained" || *name == "stable_rank" {
                        if stored != &fields[k] {
                            let a = fields[k].split(';').map(parse_opt).collect::<Result<Vec<_>>>();
                            let b = stored.split(';').map(parse_opt).collect::<Result<Vec<_>>>();
                            let err = match (a, b) {
                                (Ok(a), Ok(b)) if a.len() == b.len() => a
                                    .iter()
                                    .zip(&b)
                                    .map(|(x, y)| match (x, y) {
                                        (Some(x), Some(y)) => rel_err(*x, *y),
                                        (None, None) => 0.0,
                                        _ => f64::INFINITY,
                                    })
                                    .fold(0.0, f64::max),
                                _ => f64::INFINITY,
                            };
                            max_rel_error = max_rel_error.max(err);
                        }
                    } else {
                        max_rel_error = max_rel_error.max(rel_err(parse_real(&fields[k])?, parse_real(stored)?));
                    }
                }
            }
        }
    }
    Ok(AuditReport { rows_checked: picks.len(), max_rel_error })
}
