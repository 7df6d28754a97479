//! Config-driven pipeline: simulate an ensemble, check hypotheses, run the
//! flow diagnostics and write `summary.json`.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{
    ensemble_fold, monte_carlo, quantile, run_with, EngineError, EnsembleOptions, EnsembleSummary, RunOptions,
    Trajectory, DEFAULT_BLOWUP_BOUND, DEFAULT_RADIUS,
};
use crate::flow::{apt_deficit, linspace, manifold_rate, time_change, write_apt_csv, write_manifold_csv, FlowError};
use crate::hypotheses::{
    evaluate, tally_drift, CheckInputs, CheckParams, DriftMetric, DriftMode, DriftSpec, DriftTally, HypothesisError,
    HypothesisReport, IncrementStats, Projector, TheoremId, Verdict,
};
use crate::models::{
    control_model, GraphSpec, LinearModel, Model, ModelError, NoiseSpec, RemainderLaw, SyntheticModel,
    SyntheticParams, VrrwConfig, VrrwModel,
};
use crate::sequences::{RateConstants, Schedule, ScheduleError, ScheduleSpec};
use crate::spectral::{adapted_inner_product, split_jacobian, Eigenvalue, TrapSplit};

pub const SCHEMA_VERSION: u32 = 1;
/// Runs fed to the hypothesis checks unless `check_runs` says otherwise.
pub const DEFAULT_CHECK_RUNS: usize = 200;
pub const DEFAULT_MAX_BLOWUP_FRACTION: f64 = 0.1;
pub const SLOPE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("{count} of {runs} runs blew up, more than the allowed fraction {max}")]
    TooManyBlowUps { count: usize, runs: usize, max: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn invalid(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid { field: field.into(), message: message.into() }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `G_n = H (X_n − x*)`.
    Linear {
        h: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x_star: Option<Vec<f64>>,
        noise: NoiseSpec,
        #[serde(default)]
        remainder: RemainderLaw,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
    },
    Synthetic {
        params: SyntheticParams,
        noise: NoiseSpec,
    },
    Vrrw {
        d: usize,
        alpha: f64,
        graph: GraphSpec,
        /// Defaults to one visit per vertex.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_counts: Option<Vec<u64>>,
        #[serde(default)]
        initial_vertex: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        support: Option<Vec<usize>>,
    },
    Control {
        variant: crate::models::ControlVariant,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ExperimentError> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(invalid(field, "expected a non-empty matrix with rows of equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn Model>, ExperimentError> {
        Ok(match self {
            ModelSpec::Linear { h, x_star, noise, remainder, id } => {
                let h = matrix_from_rows(h, "model.h")?;
                let x_star = match x_star {
                    Some(v) => DVector::from_column_slice(v),
                    None => DVector::zeros(h.nrows()),
                };
                let id = id.clone().unwrap_or_else(|| "linear".into());
                Box::new(LinearModel::new(id, h, x_star, noise.clone(), remainder.clone())?)
            }
            ModelSpec::Synthetic { params, noise } => Box::new(SyntheticModel::new(params.clone(), noise.clone())?),
            ModelSpec::Vrrw { d, alpha, graph, initial_counts, initial_vertex, support } => {
                let a = graph.matrix(*d)?;
                let counts = initial_counts.clone().unwrap_or_else(|| vec![1; *d]);
                let cfg = VrrwConfig::new(*alpha, a, counts)?.with_initial_vertex(*initial_vertex)?;
                let mut m = VrrwModel::new(cfg)?;
                if let Some(s) = support {
                    m = m.with_support(s.clone())?;
                }
                Box::new(m)
            }
            ModelSpec::Control { variant } => Box::new(control_model(*variant)),
        })
    }

    fn default_x0(&self) -> Option<Vec<f64>> {
        match self {
            ModelSpec::Vrrw { d, initial_counts, .. } => {
                let counts = initial_counts.clone().unwrap_or_else(|| vec![1; *d]);
                let total: u64 = counts.iter().sum();
                Some(counts.iter().map(|&c| c as f64 / total as f64).collect())
            }
            _ => None,
        }
    }
}

/// Which runs the hypothesis checks condition on.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaEvent {
    #[default]
    All,
    /// Runs ending within `radius` of the trap.
    FinalWithin { radius: f64 },
    /// Runs ending at least `radius` away from the trap.
    FinalOutside { radius: f64 },
}

impl GammaEvent {
    fn holds(&self, traj: &Trajectory, trap: &[f64]) -> bool {
        let dist = || {
            traj.final_state()
                .iter()
                .zip(trap)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        match *self {
            GammaEvent::All => true,
            GammaEvent::FinalWithin { radius } => dist() < radius,
            GammaEvent::FinalOutside { radius } => dist() >= radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMetricKind {
    #[default]
    Euclidean,
    /// The norm adapted to `H⁺`, on the projected unstable component.
    Adapted,
}

/// One theorem's check with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub theorem: TheoremId,
    #[serde(default)]
    pub drift_metric: DriftMetricKind,
    #[serde(flatten)]
    pub params: CheckParams,
}

fn d_window() -> f64 {
    1.0
}
fn d_points() -> usize {
    60
}
fn d_step() -> f64 {
    1e-3
}
fn d_runs() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiagnosticSpec {
    /// Pseudotrajectory deficit on a grid of `points` start times.
    Apt {
        #[serde(default = "d_window")]
        window: f64,
        #[serde(default = "d_points")]
        points: usize,
        #[serde(default = "d_step")]
        step: f64,
        #[serde(default = "d_runs")]
        runs: usize,
        /// Start-time range on the drift clock; defaults to `[0, m(N) − T]`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_range: Option<(f64, f64)>,
    },
    /// Decay rate of the distance to the unstable manifold.
    ManifoldRate {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<(f64, f64)>,
        #[serde(default = "d_runs")]
        runs: usize,
    },
}

impl DiagnosticSpec {
    fn kind(&self) -> &'static str {
        match self {
            DiagnosticSpec::Apt { .. } => "apt",
            DiagnosticSpec::ManifoldRate { .. } => "manifold_rate",
        }
    }

    fn runs(&self) -> usize {
        match self {
            DiagnosticSpec::Apt { runs, .. } | DiagnosticSpec::ManifoldRate { runs, .. } => *runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Number of leading runs written to `trajectories/run_<i>.csv`.
    #[serde(default)]
    pub trajectories: usize,
    /// Write the first run's diagnostic curves to `diagnostics/`.
    #[serde(default)]
    pub diagnostics_csv: bool,
}

fn d_radius() -> f64 {
    DEFAULT_RADIUS
}
fn d_bound() -> f64 {
    DEFAULT_BLOWUP_BOUND
}
fn d_blowups() -> f64 {
    DEFAULT_MAX_BLOWUP_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    /// Initial state; defaults to the initial occupation for the walk and to
    /// the equilibrium otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    pub n_steps: usize,
    pub n_runs: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Point whose neighbourhood is tracked; defaults to the equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trap: Option<Vec<f64>>,
    #[serde(default = "d_radius")]
    pub near_trap_radius: f64,
    #[serde(default = "d_bound")]
    pub blowup_bound: f64,
    #[serde(default = "d_blowups")]
    pub max_blowup_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
    #[serde(default)]
    pub gamma_event: GammaEvent,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
    /// Runs fed to the checks; defaults to `min(n_runs, 200)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_runs: Option<usize>,
    #[serde(default)]
    pub diagnostics: Vec<DiagnosticSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            ExperimentError::Parse(m) => ExperimentError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        if self.n_steps == 0 {
            return Err(invalid("n_steps", "must be at least 1"));
        }
        if self.n_runs == 0 {
            return Err(invalid("n_runs", "must be at least 1"));
        }
        if self.n_steps > self.schedule.horizon() {
            return Err(invalid(
                "n_steps",
                format!("{} exceeds the schedule horizon {}", self.n_steps, self.schedule.horizon()),
            ));
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        if !(self.near_trap_radius > 0.0 && self.near_trap_radius.is_finite()) {
            return Err(invalid("near_trap_radius", "must be positive"));
        }
        if !(self.blowup_bound > 0.0) {
            return Err(invalid("blowup_bound", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.max_blowup_fraction) {
            return Err(invalid("max_blowup_fraction", "must lie in [0, 1]"));
        }
        if self.record_stride == Some(0) {
            return Err(invalid("record_stride", "must be at least 1"));
        }
        if let GammaEvent::FinalWithin { radius } | GammaEvent::FinalOutside { radius } = self.gamma_event {
            if !(radius > 0.0) {
                return Err(invalid("gamma_event.radius", "must be positive"));
            }
        }
        let n = self.n_steps;
        let in_range = |w: Option<(usize, usize)>| w.is_none_or(|(a, b)| a < b && b <= n);
        for (i, c) in self.checks.iter().enumerate() {
            let p = &c.params;
            let f = |name: &str| format!("checks[{i}].{name}");
            if p.k == 0 {
                return Err(invalid(&f("k"), "must be at least 1"));
            }
            if !(p.a > 2.0) {
                return Err(invalid(&f("a"), "must exceed 2"));
            }
            if p.nu.is_some_and(|nu| !(nu > 0.0)) {
                return Err(invalid(&f("nu"), "must be positive"));
            }
            if p.localize.is_some_and(|r| !(r > 0.0)) {
                return Err(invalid(&f("localize"), "must be positive"));
            }
            if !(p.rho > 0.0) {
                return Err(invalid(&f("rho"), "must be positive"));
            }
            if !in_range(p.window) {
                return Err(invalid(&f("window"), format!("must satisfy a < b ≤ {n}")));
            }
            if !in_range(p.remainder_window) {
                return Err(invalid(&f("remainder_window"), format!("must satisfy a < b ≤ {n}")));
            }
            if !in_range(p.rate_window) {
                return Err(invalid(&f("rate_window"), format!("must satisfy a < b ≤ {n}")));
            }
        }
        for (i, d) in self.diagnostics.iter().enumerate() {
            let f = |name: &str| format!("diagnostics[{i}].{name}");
            if d.runs() == 0 {
                return Err(invalid(&f("runs"), "must be at least 1"));
            }
            if let DiagnosticSpec::Apt { window, points, step, t_range, .. } = d {
                if !(*window > 0.0) {
                    return Err(invalid(&f("window"), "must be positive"));
                }
                if *points < 3 {
                    return Err(invalid(&f("points"), "must be at least 3"));
                }
                if !(*step > 0.0) {
                    return Err(invalid(&f("step"), "must be positive"));
                }
                if t_range.is_some_and(|(a, b)| !(a >= 0.0 && a < b)) {
                    return Err(invalid(&f("t_range"), "must satisfy 0 ≤ a < b"));
                }
            }
            if let DiagnosticSpec::ManifoldRate { window: Some((a, b)), .. } = d {
                if !(a < b) {
                    return Err(invalid(&f("window"), "must satisfy a < b"));
                }
            }
        }
        Ok(())
    }

    /// The config without fields that must not affect results: worker count
    /// and output directory.
    pub fn canonical(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.workers = None;
        c.output.dir = None;
        c
    }

    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub master_seed: u64,
    pub schema_version: u32,
    pub package_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapInfo {
    pub x_star: Vec<f64>,
    pub classification: String,
    pub delta_plus: usize,
    pub delta_minus: usize,
    pub mu: f64,
    pub eigenvalues: Vec<Eigenvalue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub window: (usize, usize),
    #[serde(with = "crate::serde_ext::f64")]
    pub lambda_hat: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub liminf_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub kind: String,
    pub runs_used: usize,
    /// Runs that blew up or whose diagnostic could not be computed.
    pub excluded_runs: Vec<usize>,
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub slopes: Vec<f64>,
    #[serde(with = "crate::serde_ext::f64")]
    pub median_slope: f64,
    pub quantile_levels: Vec<f64>,
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub slope_quantiles: Vec<f64>,
    /// Runs whose distance hit the floor (manifold rate only).
    pub clamped_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub timestamp_unix: u64,
    pub workers: usize,
    pub elapsed_seconds: f64,
}

/// Contents of `summary.json`. Everything except `meta` is a function of the
/// config alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub ensemble: EnsembleSummary,
    pub trap: Option<TrapInfo>,
    pub rates: Option<RateSummary>,
    pub check_runs: usize,
    pub gamma_event_runs: usize,
    pub reports: Vec<HypothesisReport>,
    pub diagnostics: Vec<DiagnosticResult>,
    pub verdict: Verdict,
    /// `theorem/condition` for every failed condition.
    pub failed_conditions: Vec<String>,
    pub notes: Vec<String>,
    pub meta: Meta,
}

impl ExperimentSummary {
    /// 0 when nothing failed, 2 when some check failed.
    pub fn exit_code(&self) -> i32 {
        if self.verdict == Verdict::Fail {
            2
        } else {
            0
        }
    }

    pub fn report(&self, theorem: TheoremId) -> Option<&HypothesisReport> {
        self.reports.iter().find(|r| r.theorem_id == theorem)
    }

    pub fn diagnostic(&self, kind: &str) -> Option<&DiagnosticResult> {
        self.diagnostics.iter().find(|d| d.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }
}

/// Runtime settings that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    /// Skip checks and diagnostics.
    pub simulate_only: bool,
}

struct Diag {
    slope: f64,
    clamped: bool,
}

#[derive(Default)]
struct RunOutput {
    traj: Option<Trajectory>,
    tallies: Vec<Option<DriftTally>>,
    diags: Vec<Option<Diag>>,
    first_csv: Vec<Option<Vec<u8>>>,
    blew_up: bool,
}

struct Prepared {
    model: Box<dyn Model>,
    schedule: Schedule,
    x0: Vec<f64>,
    trap: Option<Vec<f64>>,
    split: Option<TrapSplit>,
    notes: Vec<String>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let model = cfg.model.build()?;
    let schedule = cfg.schedule.build()?;
    let d = model.dim();
    let eq = model.equilibrium();
    let x0 = match (&cfg.x0, cfg.model.default_x0(), &eq) {
        (Some(x), _, _) => x.clone(),
        (None, Some(x), _) => x,
        (None, None, Some(e)) => e.x_star.iter().copied().collect(),
        _ => return Err(invalid("x0", "required: the model declares no equilibrium")),
    };
    if x0.len() != d {
        return Err(invalid("x0", format!("length {} but the model has dimension {d}", x0.len())));
    }
    let trap = cfg.trap.clone().or_else(|| eq.as_ref().map(|e| e.x_star.iter().copied().collect()));
    if trap.as_ref().is_some_and(|t| t.len() != d) {
        return Err(invalid("trap", format!("must have length {d}")));
    }
    let mut notes = Vec::new();
    let split = match &eq {
        Some(e) => match split_jacobian(&e.jacobian, None) {
            Ok(s) => Some(s),
            Err(err) => {
                notes.push(format!("no trap split: {err}"));
                None
            }
        },
        None => {
            notes.push("model declares no equilibrium".into());
            None
        }
    };
    Ok(Prepared { model, schedule, x0, trap, split, notes })
}

fn drift_specs(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<Option<DriftSpec>>, ExperimentError> {
    let mut out = Vec::new();
    for (i, c) in cfg.checks.iter().enumerate() {
        let mode = match c.theorem {
            TheoremId::Th2n => DriftMode::Nonneg,
            TheoremId::Th22n => DriftMode::Coercive { beta: c.params.coercive_beta },
            _ => {
                out.push(None);
                continue;
            }
        };
        let Some(x_star) = prep.trap.clone() else {
            return Err(invalid(&format!("checks[{i}]"), "drift checks need a trap point"));
        };
        let metric = match c.drift_metric {
            DriftMetricKind::Euclidean => DriftMetric::Euclidean,
            DriftMetricKind::Adapted => {
                let split = prep
                    .split
                    .as_ref()
                    .ok_or_else(|| invalid(&format!("checks[{i}].drift_metric"), "needs a trap split"))?;
                let norm = adapted_inner_product(&split.h_plus)
                    .map_err(|e| invalid(&format!("checks[{i}].drift_metric"), e.to_string()))?;
                DriftMetric::adapted(split, &norm)
            }
        };
        out.push(Some(DriftSpec { x_star, rho: c.params.rho, mode, metric, window: c.params.window }));
    }
    Ok(out)
}

fn default_rate_window(n: usize) -> (usize, usize) {
    ((n / 100).max(1), n)
}

fn run_diagnostic(
    spec: &DiagnosticSpec,
    traj: &Trajectory,
    model: &dyn Model,
    schedule: &Schedule,
    want_csv: bool,
) -> Result<(Diag, Option<Vec<u8>>), String> {
    let path = time_change(traj, schedule).map_err(|e| e.to_string())?;
    match spec {
        DiagnosticSpec::Apt { window, points, step, t_range, .. } => {
            let f = model.field().ok_or("model has no mean field")?;
            let (_, s1) = path.range();
            let (a, b) = t_range.unwrap_or((0.0, s1 - window));
            if !(b > a && b + window <= s1) {
                return Err(format!("start range [{a}, {b}] does not fit the clock range {s1}"));
            }
            let apt = apt_deficit(&path, f, *window, &linspace(a, b, *points), *step).map_err(|e| e.to_string())?;
            let csv = want_csv.then(|| {
                let mut buf = Vec::new();
                write_apt_csv(&apt, &mut buf).expect("in-memory write");
                buf
            });
            Ok((Diag { slope: apt.slope, clamped: false }, csv))
        }
        DiagnosticSpec::ManifoldRate { window, .. } => {
            let k = model.manifold().ok_or("model declares no unstable manifold")?;
            let r = manifold_rate(&path, &k, *window).map_err(|e| e.to_string())?;
            let csv = want_csv.then(|| {
                let mut buf = Vec::new();
                write_manifold_csv(&r, &mut buf).expect("in-memory write");
                buf
            });
            Ok((Diag { slope: r.slope, clamped: r.clamped }, csv))
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Runs the whole pipeline and, when an output directory is known, writes
/// `summary.json` and the requested CSV files into it.
pub fn run_experiment(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<ExperimentSummary, ExperimentError> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = ctx.workers.or(cfg.workers).unwrap_or(1);
    if workers == 0 {
        return Err(invalid("workers", "must be at least 1"));
    }
    let out_dir = ctx.out_dir.clone().or_else(|| cfg.output.dir.clone());
    let prep = prepare(cfg)?;
    let model = prep.model.as_ref();
    let schedule = &prep.schedule;
    let n = cfg.n_steps;
    let mut notes = prep.notes.clone();

    let mut opts = EnsembleOptions::new(n, cfg.n_runs, cfg.master_seed).with_workers(workers);
    opts.radius = cfg.near_trap_radius;
    opts.blowup_bound = cfg.blowup_bound;
    opts.trap = prep.trap.clone();
    let ensemble = monte_carlo(model, schedule, &prep.x0, &opts)?;
    if ensemble.blowup_count as f64 > cfg.max_blowup_fraction * cfg.n_runs as f64 {
        return Err(ExperimentError::TooManyBlowUps {
            count: ensemble.blowup_count,
            runs: cfg.n_runs,
            max: cfg.max_blowup_fraction,
        });
    }

    let (checks, diagnostics): (&[CheckSpec], &[DiagnosticSpec]) =
        if ctx.simulate_only { (&[], &[]) } else { (&cfg.checks, &cfg.diagnostics) };
    let check_runs = if checks.is_empty() { 0 } else { cfg.check_runs.unwrap_or(DEFAULT_CHECK_RUNS).min(cfg.n_runs) };
    let diag_runs: Vec<usize> = diagnostics.iter().map(|d| d.runs().min(cfg.n_runs)).collect();
    let want_csv = cfg.output.diagnostics_csv && out_dir.is_some();
    let n_traj = if out_dir.is_some() { cfg.output.trajectories.min(cfg.n_runs) } else { 0 };
    let pass_runs = check_runs.max(n_traj).max(diag_runs.iter().copied().max().unwrap_or(0));

    let drift = drift_specs(cfg, &prep)?;
    let projector = prep.split.as_ref().map(Projector::from_split);
    let mut stats = Vec::with_capacity(checks.len());
    for c in checks {
        let window = c.params.window.unwrap_or((0, n));
        let mut st = IncrementStats::new(
            model.dim(),
            window,
            c.params.a,
            c.params.nu.unwrap_or(1.0),
            projector.clone(),
            check_runs,
        )?;
        if let Some(radius) = c.params.localize {
            let center = prep.trap.clone().ok_or_else(|| invalid("checks.localize", "needs a trap point"))?;
            st = st.localized(center, radius)?;
        }
        stats.push(st);
    }

    if let Some(dir) = &out_dir {
        create_dir(dir)?;
        if n_traj > 0 {
            create_dir(&dir.join("trajectories"))?;
        }
        if want_csv && !diagnostics.is_empty() {
            create_dir(&dir.join("diagnostics"))?;
        }
    }

    let trap = prep.trap.clone();
    let run_opts = RunOptions { n_steps: n, stride: cfg.record_stride, blowup_bound: cfg.blowup_bound };
    let per_run = |i: usize, seed: u64| -> RunOutput {
        let traj = match run_with(model, schedule, &prep.x0, &run_opts, seed) {
            Ok(t) => t,
            Err(_) => return RunOutput { blew_up: true, ..Default::default() },
        };
        let in_gamma = i < check_runs && trap.as_ref().is_none_or(|t| cfg.gamma_event.holds(&traj, t));
        let tallies = drift
            .iter()
            .map(|s| match s {
                Some(spec) if in_gamma => tally_drift(&traj, spec).ok(),
                _ => None,
            })
            .collect();
        let mut diags = Vec::new();
        let mut first_csv = Vec::new();
        for (k, d) in diagnostics.iter().enumerate() {
            if i < diag_runs[k] {
                match run_diagnostic(d, &traj, model, schedule, want_csv && i == 0) {
                    Ok((diag, csv)) => {
                        diags.push(Some(diag));
                        first_csv.push(csv);
                    }
                    Err(_) => {
                        diags.push(None);
                        first_csv.push(None);
                    }
                }
            } else {
                diags.push(None);
                first_csv.push(None);
            }
        }
        let keep = in_gamma || i < n_traj;
        RunOutput { traj: keep.then_some(traj), tallies, diags, first_csv, blew_up: false }
    };

    struct Acc {
        stats: Vec<IncrementStats>,
        tallies: Vec<DriftTally>,
        slopes: Vec<Vec<(usize, f64)>>,
        excluded: Vec<Vec<usize>>,
        clamped: Vec<usize>,
        gamma_runs: usize,
        first_err: Option<ExperimentError>,
    }
    let acc = Acc {
        stats,
        tallies: vec![DriftTally::default(); drift.len()],
        slopes: vec![Vec::new(); diagnostics.len()],
        excluded: vec![Vec::new(); diagnostics.len()],
        clamped: vec![0; diagnostics.len()],
        gamma_runs: 0,
        first_err: None,
    };
    let chunk = 4 * workers;
    let mut acc = ensemble_fold(pass_runs, cfg.master_seed, workers, chunk, per_run, acc, |mut acc, i, out| {
        if acc.first_err.is_some() {
            return acc;
        }
        for (k, d) in out.diags.iter().enumerate() {
            if i < diag_runs[k] {
                match d {
                    Some(d) => {
                        acc.slopes[k].push((i, d.slope));
                        acc.clamped[k] += d.clamped as usize;
                    }
                    None => acc.excluded[k].push(i),
                }
            }
        }
        if let Some(dir) = &out_dir {
            for (k, csv) in out.first_csv.iter().enumerate() {
                if let Some(bytes) = csv {
                    let p = dir.join("diagnostics").join(format!("{}_run0.csv", diagnostics[k].kind()));
                    if let Err(e) = write_file(&p, bytes) {
                        acc.first_err = Some(e);
                    }
                }
            }
        }
        if out.blew_up {
            return acc;
        }
        let Some(traj) = out.traj else {
            return acc;
        };
        if i < n_traj {
            let dir = out_dir.as_ref().expect("output directory");
            let p = dir.join("trajectories").join(format!("run_{i}.csv"));
            let res = fs::File::create(&p)
                .and_then(|f| {
                    let mut w = BufWriter::new(f);
                    traj.write_csv(&mut w)?;
                    w.flush()
                })
                .map_err(io_err(&p));
            if let Err(e) = res {
                acc.first_err = Some(e);
                return acc;
            }
        }
        let in_gamma = i < check_runs && trap.as_ref().is_none_or(|t| cfg.gamma_event.holds(&traj, t));
        if in_gamma {
            acc.gamma_runs += 1;
            for s in acc.stats.iter_mut() {
                if let Err(e) = s.add(&traj) {
                    acc.first_err = Some(e.into());
                    return acc;
                }
            }
            for (k, t) in out.tallies.into_iter().enumerate() {
                if let Some(t) = t {
                    acc.tallies[k] = acc.tallies[k].merge(t);
                }
            }
        }
        acc
    })?;
    if let Some(e) = acc.first_err.take() {
        return Err(e);
    }

    let mut reports = Vec::new();
    let mut rates_out = None;
    for (i, c) in checks.iter().enumerate() {
        let window = c.params.rate_window.unwrap_or_else(|| default_rate_window(n));
        let rates: Option<RateConstants> = match schedule.rate_constants(window) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("{}: no rate constants: {e}", c.theorem.as_str()));
                None
            }
        };
        if rates_out.is_none() {
            rates_out = rates.as_ref().map(|r| RateSummary {
                window: r.window,
                lambda_hat: r.lambda_hat,
                liminf_proxy: r.liminf_proxy,
            });
        }
        let evidence: Vec<(DriftSpec, DriftTally)> = drift[i].iter().map(|s| (s.clone(), acc.tallies[i])).collect();
        let inputs = CheckInputs {
            stats: &acc.stats[i],
            schedule,
            split: prep.split.as_ref(),
            rates: rates.as_ref(),
            drift: &evidence,
            params: &c.params,
        };
        reports.push(evaluate(c.theorem, &inputs)?);
    }

    let mut diag_results = Vec::new();
    for (k, d) in diagnostics.iter().enumerate() {
        let slopes: Vec<f64> = acc.slopes[k].iter().map(|&(_, s)| s).collect();
        let mut sorted: Vec<f64> = slopes.iter().copied().filter(|s| !s.is_nan()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |l: f64| if sorted.is_empty() { f64::NAN } else { quantile(&sorted, l) };
        diag_results.push(DiagnosticResult {
            kind: d.kind().into(),
            runs_used: slopes.len(),
            excluded_runs: acc.excluded[k].clone(),
            median_slope: q(0.5),
            quantile_levels: SLOPE_LEVELS.to_vec(),
            slope_quantiles: SLOPE_LEVELS.iter().map(|&l| q(l)).collect(),
            slopes,
            clamped_runs: acc.clamped[k],
        });
    }

    let verdict = Verdict::combine(reports.iter().map(|r| r.verdict));
    let failed_conditions = reports
        .iter()
        .flat_map(|r| r.failed().into_iter().map(move |c| format!("{}/{c}", r.theorem_id.as_str())))
        .collect();
    let trap_info = match (&prep.split, model.equilibrium()) {
        (Some(s), Some(e)) => Some(TrapInfo {
            x_star: e.x_star.iter().copied().collect(),
            classification: s.classification.as_str().into(),
            delta_plus: s.delta_plus,
            delta_minus: s.delta_minus,
            mu: s.mu,
            eigenvalues: s.eigenvalues.clone(),
        }),
        _ => None,
    };
    let summary = ExperimentSummary {
        provenance: Provenance {
            config_sha256: cfg.sha256(),
            master_seed: cfg.master_seed,
            schema_version: SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").into(),
        },
        config: cfg.canonical(),
        ensemble,
        trap: trap_info,
        rates: rates_out,
        check_runs,
        gamma_event_runs: acc.gamma_runs,
        reports,
        diagnostics: diag_results,
        verdict,
        failed_conditions,
        notes,
        meta: Meta {
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            workers,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    };
    if let Some(dir) = &out_dir {
        let p = dir.join("summary.json");
        write_file(&p, summary.to_json().as_bytes())?;
    }
    Ok(summary)
}
