//! Finite-sample checks of the non-convergence hypotheses.
//!
//! Conditional expectations `E[· | F_{n−1}]` are replaced by cross-run means
//! at fixed `n` over an ensemble. Checks never claim more than the data can
//! show: a condition that cannot be evaluated is `inconclusive`, and `fail`
//! is reserved for a witnessed violation of the finite-sample rule.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Trajectory;
use crate::sequences::{RateConstants, Schedule, ScheduleError, Sequence};
use crate::spectral::{AdaptedNorm, Classification, TrapSplit};

pub const DEFAULT_EXCITATION_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_CAUCHY_FRACTION: f64 = 1e-3;
/// `λ̂` must be below `−margin` to count as negative.
pub const DEFAULT_LAMBDA_MARGIN: f64 = 0.05;
pub const DRIFT_SLACK: f64 = 1e-10;
pub const MIN_RUNS: usize = 30;
pub const DEFAULT_POOL_CAP: usize = 200_000;
const MIN_POOLED: usize = 100;
/// A sequence counts as bounded on a window when its max over the second half
/// is at most this multiple of its max over the first half.
const BOUNDED_GROWTH: f64 = 2.0;

#[derive(Debug, Error)]
pub enum HypothesisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }

    /// Any fail gives fail, else any inconclusive gives inconclusive.
    pub fn combine<I: IntoIterator<Item = Verdict>>(verdicts: I) -> Verdict {
        let mut out = Verdict::Pass;
        for v in verdicts {
            match v {
                Verdict::Fail => return Verdict::Fail,
                Verdict::Inconclusive => out = Verdict::Inconclusive,
                Verdict::Pass => {}
            }
        }
        out
    }

    fn from_bool(ok: bool) -> Verdict {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    #[serde(with = "crate::serde_ext::f64")]
    pub value: f64,
}

/// One checked condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub estimates: Vec<Estimate>,
    #[serde(with = "crate::serde_ext::opt_f64", default)]
    pub threshold: Option<f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl Condition {
    fn new(name: &str) -> Self {
        Condition {
            name: name.into(),
            estimates: Vec::new(),
            threshold: None,
            verdict: Verdict::Inconclusive,
            note: String::new(),
        }
    }

    fn est(mut self, name: &str, value: f64) -> Self {
        self.estimates.push(Estimate { name: name.into(), value });
        self
    }

    fn threshold(mut self, t: f64) -> Self {
        self.threshold = Some(t);
        self
    }

    fn verdict(mut self, v: Verdict) -> Self {
        self.verdict = v;
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.estimates.iter().find(|e| e.name == name).map(|e| e.value)
    }
}

/// `P⁻¹` restricted to the coordinates needed for `ε⁺` and `ε⁻`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub p_inv: DMatrix<f64>,
    pub delta_plus: usize,
}

impl Projector {
    pub fn from_split(split: &TrapSplit) -> Self {
        Projector { p_inv: split.p_inv.clone(), delta_plus: split.delta_plus }
    }

    /// `(‖(P⁻¹v)⁺‖², ‖(P⁻¹v)⁻‖²)`
    pub fn split_norms(&self, v: &[f64]) -> (f64, f64) {
        let d = v.len();
        let (mut plus, mut minus) = (0.0, 0.0);
        for i in 0..d {
            let mut y = 0.0;
            for (j, vj) in v.iter().enumerate() {
                y += self.p_inv[(i, j)] * vj;
            }
            if i < self.delta_plus {
                plus += y * y;
            } else {
                minus += y * y;
            }
        }
        (plus, minus)
    }

    /// First `δ⁺` coordinates of `P⁻¹ v`.
    pub fn plus(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.delta_plus) {
            *o = v.iter().enumerate().map(|(j, vj)| self.p_inv[(i, j)] * vj).sum();
        }
    }
}

/// Cross-run sums of increment statistics at each step `n` of a window.
///
/// The record at step `n` carries `ε_{n+1}`, `r_{n+1}`, `γ_{n+1}`, `c_{n+1}`.
#[derive(Debug, Clone)]
pub struct IncrementStats {
    pub dim: usize,
    /// Step range `[lo, hi)`.
    pub window: (usize, usize),
    pub a: f64,
    pub nu: f64,
    projector: Option<Projector>,
    /// Only steps with `‖X_n − center‖ < radius` are counted.
    locality: Option<(Vec<f64>, f64)>,
    gamma: Vec<f64>,
    c: Vec<f64>,
    runs: Vec<u32>,
    sum_eps: Vec<f64>,
    sum_eps2: Vec<f64>,
    sum_eps4: Vec<f64>,
    sum_eps_a: Vec<f64>,
    sum_plus2: Vec<f64>,
    sum_plus4: Vec<f64>,
    sum_minus_nu: Vec<f64>,
    /// Remainder sums ignore the locality restriction.
    rem_runs: Vec<u32>,
    sum_rem: Vec<f64>,
    sum_rem2: Vec<f64>,
    pooled: Vec<f64>,
    thin: u64,
    seen: u64,
    trajectories: usize,
}

impl IncrementStats {
    /// `expected_runs` sizes the deterministic thinning of pooled `‖ε‖`
    /// samples so that at most about `DEFAULT_POOL_CAP` are kept.
    pub fn new(
        dim: usize,
        window: (usize, usize),
        a: f64,
        nu: f64,
        projector: Option<Projector>,
        expected_runs: usize,
    ) -> Result<Self, HypothesisError> {
        let (lo, hi) = window;
        if lo >= hi {
            return Err(HypothesisError::InvalidArgument(format!("empty window [{lo}, {hi})")));
        }
        if let Some(p) = &projector {
            if p.p_inv.nrows() != dim || p.p_inv.ncols() != dim {
                return Err(HypothesisError::DimensionMismatch { expected: dim, got: p.p_inv.nrows() });
            }
        }
        let len = hi - lo;
        let total = (len as u64) * (expected_runs.max(1) as u64);
        let thin = total.div_ceil(DEFAULT_POOL_CAP as u64).max(1);
        Ok(IncrementStats {
            dim,
            window,
            a,
            nu,
            projector,
            locality: None,
            gamma: vec![f64::NAN; len],
            c: vec![f64::NAN; len],
            runs: vec![0; len],
            sum_eps: vec![0.0; len * dim],
            sum_eps2: vec![0.0; len],
            sum_eps4: vec![0.0; len],
            sum_eps_a: vec![0.0; len],
            sum_plus2: vec![0.0; len],
            sum_plus4: vec![0.0; len],
            sum_minus_nu: vec![0.0; len],
            rem_runs: vec![0; len],
            sum_rem: vec![0.0; len],
            sum_rem2: vec![0.0; len],
            pooled: Vec::new(),
            thin,
            seen: 0,
            trajectories: 0,
        })
    }

    /// Restricts the statistics to steps whose state lies within `radius`
    /// of `center`: the finite-sample stand-in for conditioning on
    /// convergence to the trap.
    pub fn localized(mut self, center: Vec<f64>, radius: f64) -> Result<Self, HypothesisError> {
        if center.len() != self.dim {
            return Err(HypothesisError::DimensionMismatch { expected: self.dim, got: center.len() });
        }
        if !(radius > 0.0) {
            return Err(HypothesisError::InvalidArgument(format!("locality radius {radius} must be positive")));
        }
        self.locality = Some((center, radius));
        // far fewer steps survive, so keep every sample up to the cap
        self.thin = 1;
        Ok(self)
    }

    pub fn locality(&self) -> Option<(&[f64], f64)> {
        self.locality.as_ref().map(|(c, r)| (c.as_slice(), *r))
    }

    pub fn projector(&self) -> Option<&Projector> {
        self.projector.as_ref()
    }

    pub fn len(&self) -> usize {
        self.window.1 - self.window.0
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories == 0
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories
    }

    /// Adds the records of one trajectory that fall in the window.
    pub fn add(&mut self, traj: &Trajectory) -> Result<(), HypothesisError> {
        if traj.dim != self.dim {
            return Err(HypothesisError::DimensionMismatch { expected: self.dim, got: traj.dim });
        }
        let (lo, hi) = self.window;
        let d = self.dim;
        for (i, &n) in traj.record_n.iter().enumerate() {
            if n < lo || n >= hi {
                continue;
            }
            let k = n - lo;
            let rem = traj.rem_at(i);
            let r2: f64 = rem.iter().map(|v| v * v).sum();
            self.rem_runs[k] += 1;
            self.sum_rem[k] += r2.sqrt();
            self.sum_rem2[k] += r2;
            self.gamma[k] = traj.gamma[i];
            self.c[k] = traj.c[i];
            if let Some((center, radius)) = &self.locality {
                let x = traj.state(n);
                let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                if d2.sqrt() >= *radius {
                    continue;
                }
            }
            let eps = traj.eps_at(i);
            self.runs[k] += 1;
            let e2: f64 = eps.iter().map(|v| v * v).sum();
            let norm = e2.sqrt();
            for (j, v) in eps.iter().enumerate() {
                self.sum_eps[k * d + j] += v;
            }
            self.sum_eps2[k] += e2;
            self.sum_eps4[k] += e2 * e2;
            self.sum_eps_a[k] += norm.powf(self.a);
            if let Some(p) = &self.projector {
                let (plus, minus) = p.split_norms(eps);
                self.sum_plus2[k] += plus;
                self.sum_plus4[k] += plus * plus;
                self.sum_minus_nu[k] += minus.sqrt().powf(1.0 + self.nu);
            }
            if self.seen.is_multiple_of(self.thin) && self.pooled.len() < 2 * DEFAULT_POOL_CAP {
                self.pooled.push(norm);
            }
            self.seen += 1;
        }
        self.trajectories += 1;
        Ok(())
    }

    pub fn runs_at(&self, n: usize) -> usize {
        self.runs[n - self.window.0] as usize
    }

    fn mean(&self, sums: &[f64], k: usize) -> Option<f64> {
        match self.runs[k] {
            0 => None,
            r => Some(sums[k] / r as f64),
        }
    }

    /// Ensemble mean of `ε_{n+1}`.
    pub fn mean_eps(&self, n: usize) -> Option<Vec<f64>> {
        let k = n - self.window.0;
        let r = self.runs[k];
        (r > 0).then(|| self.sum_eps[k * self.dim..(k + 1) * self.dim].iter().map(|s| s / r as f64).collect())
    }

    /// Ensemble mean of `‖ε_{n+1}‖²`.
    pub fn mean_eps2(&self, n: usize) -> Option<f64> {
        self.mean(&self.sum_eps2, n - self.window.0)
    }

    /// Ensemble mean of `‖ε⁺_{n+1}‖²`.
    pub fn mean_plus2(&self, n: usize) -> Option<f64> {
        self.projector.as_ref()?;
        self.mean(&self.sum_plus2, n - self.window.0)
    }

    /// Ensemble mean of `‖r_{n+1}‖²`.
    pub fn mean_rem2(&self, n: usize) -> Option<f64> {
        let k = n - self.window.0;
        match self.rem_runs[k] {
            0 => None,
            r => Some(self.sum_rem2[k] / r as f64),
        }
    }

    pub fn pooled_norms(&self) -> &[f64] {
        &self.pooled
    }

    /// Hill estimate of the tail index of `‖ε‖` from the pooled samples,
    /// using the top `√n` order statistics. `+∞` for bounded-looking data
    /// (all top samples equal), `NaN` with fewer than 100 positive samples.
    pub fn hill_tail_index(&self) -> f64 {
        hill_tail_index(&self.pooled)
    }

    fn sub_window(&self, window: Option<(usize, usize)>) -> Result<(usize, usize), HypothesisError> {
        let (lo, hi) = self.window;
        let (a, b) = window.unwrap_or((lo, hi));
        if a < lo || b > hi || a >= b {
            return Err(HypothesisError::InvalidArgument(format!(
                "window [{a}, {b}) outside the recorded window [{lo}, {hi})"
            )));
        }
        Ok((a - lo, b - lo))
    }
}

pub fn hill_tail_index(samples: &[f64]) -> f64 {
    let mut x: Vec<f64> = samples.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
    if x.len() < MIN_POOLED {
        return f64::NAN;
    }
    x.sort_by(|a, b| b.total_cmp(a));
    let k = ((x.len() as f64).sqrt() as usize).max(10);
    let xk = x[k];
    let h = x[..k].iter().map(|v| (v / xk).ln()).sum::<f64>() / k as f64;
    if h <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / h
    }
}

/// Max over the second half of the finite entries against `BOUNDED_GROWTH`
/// times the max over the first half.
fn bounded_on_window(values: &[f64]) -> (f64, f64, Verdict) {
    let vals: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if vals.len() < 2 {
        return (f64::NAN, f64::NAN, Verdict::Inconclusive);
    }
    let mid = vals.len() / 2;
    let first = vals[..mid].iter().copied().fold(0.0f64, f64::max);
    let second = vals[mid..].iter().copied().fold(0.0f64, f64::max);
    let ok = second.is_finite() && (second == 0.0 || second <= BOUNDED_GROWTH * first);
    (first, second, Verdict::from_bool(ok))
}

/// Excitation of order `k`: the liminf proxy is the minimum over the window
/// of `Σ_{i<k} E[‖ε_{n+i+1}‖²]` (or `‖ε⁺‖²` with `plus`), the limsup proxy
/// the maximum of `E[‖ε_{n+1}‖^a]`.
///
/// Also reports the window mean of the `k`-sums and its standard error under
/// independence across steps.
pub fn check_noise_excitation(
    stats: &IncrementStats,
    k: usize,
    threshold: f64,
    plus: bool,
    window: Option<(usize, usize)>,
) -> Result<Condition, HypothesisError> {
    if k == 0 {
        return Err(HypothesisError::InvalidArgument("excitation order must be ≥ 1".into()));
    }
    if plus && stats.projector.is_none() {
        return Err(HypothesisError::InvalidArgument("ε⁺ needs a trap split".into()));
    }
    let name = if plus { "noise_excitation_plus" } else { "noise_excitation" };
    let cond = Condition::new(name).threshold(threshold).est("k", k as f64).est("a", stats.a);
    if stats.trajectories < MIN_RUNS {
        return Ok(cond
            .est("runs", stats.trajectories as f64)
            .note(format!("{} runs, at least {MIN_RUNS} needed", stats.trajectories)));
    }
    let (lo, hi) = stats.sub_window(window)?;
    let (s2, s4) = if plus { (&stats.sum_plus2, &stats.sum_plus4) } else { (&stats.sum_eps2, &stats.sum_eps4) };
    let valid = |j: usize| stats.runs[j] as usize >= MIN_RUNS;
    let mean2 = |j: usize| s2[j] / stats.runs[j] as f64;

    let mut sums = Vec::new();
    let mut cover = vec![0usize; hi - lo];
    for start in lo..hi.saturating_sub(k - 1) {
        if (start..start + k).all(valid) {
            sums.push((start..start + k).map(mean2).sum::<f64>());
            for j in start..start + k {
                cover[j - lo] += 1;
            }
        }
    }
    let limsup = (lo..hi)
        .filter(|&j| valid(j))
        .map(|j| stats.sum_eps_a[j] / stats.runs[j] as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if sums.is_empty() {
        return Ok(cond.note("no window of consecutive steps with enough runs"));
    }
    let liminf = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let w = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / w;
    let var: f64 = (lo..hi)
        .filter(|&j| cover[j - lo] > 0)
        .map(|j| {
            let r = stats.runs[j] as f64;
            let m2 = mean2(j);
            let v = (s4[j] / r - m2 * m2).max(0.0);
            (cover[j - lo] as f64 / w).powi(2) * v / r
        })
        .sum();
    let verdict = Verdict::from_bool(liminf > threshold && limsup.is_finite());
    Ok(cond
        .est("liminf_proxy", liminf)
        .est("limsup_proxy", limsup)
        .est("window_mean", mean)
        .est("window_se", var.sqrt())
        .est("runs", stats.trajectories as f64)
        .verdict(verdict))
}

/// `Σ ‖r_n‖² < ∞`: with `S` the partial sums of `E‖r_{n+1}‖²` from the start
/// of the recorded window, passes iff the increment of `S` over `window`
/// (default: the last half) is at most `fraction · S(end)`.
///
/// Enlarging the window to the left can only turn a pass into a fail.
pub fn check_remainder_square_summable(
    stats: &IncrementStats,
    fraction: f64,
    window: Option<(usize, usize)>,
) -> Result<Condition, HypothesisError> {
    let cond = Condition::new("remainder_square_summable").threshold(fraction);
    if stats.trajectories == 0 {
        return Ok(cond.note("no remainder records"));
    }
    let (lo, hi) = stats.window;
    let (w0, w1) = stats.sub_window(window.or(Some((lo + (hi - lo) / 2, hi))))?;
    if (0..w1).any(|j| stats.rem_runs[j] == 0) {
        return Ok(cond.note("remainder records are thinned on the window"));
    }
    let s = |j: usize| stats.sum_rem2[j] / stats.rem_runs[j] as f64;
    let total: f64 = (0..w1).map(s).sum();
    let tail: f64 = (w0..w1).map(s).sum();
    let ok = total.is_finite() && (total == 0.0 || tail <= fraction * total);
    Ok(cond
        .est("partial_sum", total)
        .est("window_increment", tail)
        .est("ratio", if total > 0.0 { tail / total } else { 0.0 })
        .verdict(Verdict::from_bool(ok)))
}

/// `r_n = O(γ_n^{1+ν} / c_n)`, taking the whole remainder as the predictable
/// part: `c_{n+1} E‖r_{n+1}‖ / γ_{n+1}^{1+ν}` must stay bounded on the window.
pub fn check_remainder_split_r(
    stats: &IncrementStats,
    nu: f64,
    window: Option<(usize, usize)>,
) -> Result<Condition, HypothesisError> {
    if !(nu > 0.0) {
        return Err(HypothesisError::InvalidArgument(format!("ν = {nu} must be positive")));
    }
    let cond = Condition::new("remainder_split_r").threshold(BOUNDED_GROWTH).est("nu", nu);
    if stats.trajectories == 0 {
        return Ok(cond.note("no remainder records"));
    }
    let (lo, hi) = stats.sub_window(window)?;
    let vals: Vec<f64> = (lo..hi)
        .map(|j| {
            if stats.rem_runs[j] == 0 || !(stats.gamma[j] > 0.0) {
                return f64::NAN;
            }
            let mean = stats.sum_rem[j] / stats.rem_runs[j] as f64;
            if mean == 0.0 {
                0.0
            } else {
                stats.c[j] * mean / stats.gamma[j].powf(1.0 + nu)
            }
        })
        .collect();
    let (first, second, verdict) = bounded_on_window(&vals);
    Ok(cond.est("sup_first_half", first).est("sup_second_half", second).verdict(verdict))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DriftMode {
    /// `⟨y, G⟩ ≥ 0`
    Nonneg,
    /// `⟨y, G⟩ ≥ β ⟨y, y⟩`
    Coercive { beta: f64 },
}

/// Inner product used by the drift check.
#[derive(Debug, Clone, PartialEq)]
pub enum DriftMetric {
    Euclidean,
    /// `⟨y, g⟩ = (P⁻¹y)⁺ᵀ S (P⁻¹g)⁺` with `S` from [`AdaptedNorm`].
    Adapted { projector: Projector, s: DMatrix<f64> },
}

impl DriftMetric {
    pub fn adapted(split: &TrapSplit, norm: &AdaptedNorm) -> Self {
        DriftMetric::Adapted { projector: Projector::from_split(split), s: norm.s.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub x_star: Vec<f64>,
    pub rho: f64,
    pub mode: DriftMode,
    pub metric: DriftMetric,
    /// Step range `[lo, hi)`; the whole run by default.
    pub window: Option<(usize, usize)>,
}

/// Evidence from in-ball samples: count, violations beyond the slack, and
/// the smallest value of `⟨y, G⟩ − β⟨y, y⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftTally {
    pub samples: usize,
    pub violations: usize,
    pub worst: f64,
}

impl Default for DriftTally {
    fn default() -> Self {
        DriftTally { samples: 0, violations: 0, worst: f64::INFINITY }
    }
}

impl DriftTally {
    pub fn merge(self, other: DriftTally) -> DriftTally {
        DriftTally {
            samples: self.samples + other.samples,
            violations: self.violations + other.violations,
            worst: self.worst.min(other.worst),
        }
    }
}

/// Evaluates the drift inequality at every retained step of `traj` in the
/// window with `‖X_n − x*‖ < rho`.
pub fn tally_drift(traj: &Trajectory, spec: &DriftSpec) -> Result<DriftTally, HypothesisError> {
    let d = traj.dim;
    if spec.x_star.len() != d {
        return Err(HypothesisError::DimensionMismatch { expected: d, got: spec.x_star.len() });
    }
    let beta = match spec.mode {
        DriftMode::Nonneg => 0.0,
        DriftMode::Coercive { beta } => beta,
    };
    let (lo, hi) = spec.window.unwrap_or((0, traj.n_steps()));
    let mut tally = DriftTally::default();
    let mut y = vec![0.0; d];
    let (mut yp, mut gp) = (vec![0.0; d], vec![0.0; d]);
    for (i, &n) in traj.record_n.iter().enumerate() {
        if n < lo || n >= hi {
            continue;
        }
        let x = traj.state(n);
        for k in 0..d {
            y[k] = x[k] - spec.x_star[k];
        }
        if y.iter().map(|v| v * v).sum::<f64>().sqrt() >= spec.rho {
            continue;
        }
        let g = traj.g_at(i);
        let (inner, norm2) = match &spec.metric {
            DriftMetric::Euclidean => (
                y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>(),
                y.iter().map(|v| v * v).sum::<f64>(),
            ),
            DriftMetric::Adapted { projector, s } => {
                let m = projector.delta_plus;
                projector.plus(&y, &mut yp[..m]);
                projector.plus(g, &mut gp[..m]);
                let mut inner = 0.0;
                let mut norm2 = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        inner += yp[a] * s[(a, b)] * gp[b];
                        norm2 += yp[a] * s[(a, b)] * yp[b];
                    }
                }
                (inner, norm2)
            }
        };
        let v = inner - beta * norm2;
        tally.samples += 1;
        tally.worst = tally.worst.min(v);
        if v < -DRIFT_SLACK {
            tally.violations += 1;
        }
    }
    Ok(tally)
}

pub fn drift_condition(tally: &DriftTally, spec: &DriftSpec) -> Condition {
    let name = match spec.mode {
        DriftMode::Nonneg => "drift_nonneg",
        DriftMode::Coercive { .. } => "drift_coercive",
    };
    let mut cond = Condition::new(name).threshold(-DRIFT_SLACK).est("rho", spec.rho);
    if let DriftMode::Coercive { beta } = spec.mode {
        cond = cond.est("beta", beta);
    }
    cond = cond
        .est("samples", tally.samples as f64)
        .est("violations", tally.violations as f64)
        .est("worst", tally.worst);
    if tally.samples == 0 {
        return cond.note("no samples inside the ball");
    }
    cond.verdict(Verdict::from_bool(tally.violations == 0))
}

/// Drift sign over several trajectories.
pub fn check_drift_sign(trajs: &[Trajectory], spec: &DriftSpec) -> Result<Condition, HypothesisError> {
    let mut tally = DriftTally::default();
    for t in trajs {
        tally = tally.merge(tally_drift(t, spec)?);
    }
    Ok(drift_condition(&tally, spec))
}

/// `λ < 0` and `liminf log α / m > β(1 + ν)` with `β = max(λ̂, μ)`.
///
/// `λ̂` counts as negative only below `−lambda_margin`.
pub fn check_rate_condition(
    rates: &RateConstants,
    split: &TrapSplit,
    nu: f64,
    lambda_margin: f64,
) -> Result<Condition, HypothesisError> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(HypothesisError::InvalidArgument(format!("ν = {nu} must be positive")));
    }
    let lambda = rates.lambda_hat;
    let mu = split.mu;
    let beta = lambda.max(mu);
    let bound = beta * (1.0 + nu);
    let margin = rates.liminf_proxy - bound;
    let ok = lambda < -lambda_margin && rates.liminf_proxy > bound;
    Ok(Condition::new("rate_condition")
        .threshold(bound)
        .est("lambda_hat", lambda)
        .est("mu", mu)
        .est("beta", beta)
        .est("nu", nu)
        .est("liminf_proxy", rates.liminf_proxy)
        .est("margin", margin)
        .est("lambda_margin", lambda_margin)
        .verdict(Verdict::from_bool(ok)))
}

/// `E[‖ΔM_s‖^a | F_t]^{2/a} ≤ −k² Δα²_s` reduces to a finite
/// `k² = sup_n E[‖ε_n‖^a]^{2/a}`. Finite data always give a finite sup, so
/// the verdict uses the Hill tail index of `‖ε‖`, which must exceed `a`.
/// The sups over nested windows are reported for inspection.
pub fn check_jump_moments(
    stats: &IncrementStats,
    a: f64,
    window: Option<(usize, usize)>,
) -> Result<Condition, HypothesisError> {
    if !(a > 2.0) {
        return Err(HypothesisError::InvalidArgument(format!("a = {a} must exceed 2")));
    }
    if a != stats.a {
        return Err(HypothesisError::InvalidArgument(format!(
            "statistics were accumulated with a = {}, not {a}",
            stats.a
        )));
    }
    let cond = Condition::new("jump_moments").threshold(a).est("a", a);
    if stats.trajectories == 0 {
        return Ok(cond.note("no noise records"));
    }
    let (lo, hi) = stats.sub_window(window)?;
    let sup = |end: usize| {
        (lo..end)
            .filter(|&j| stats.runs[j] > 0)
            .map(|j| stats.sum_eps_a[j] / stats.runs[j] as f64)
            .fold(0.0f64, f64::max)
            .powf(2.0 / a)
    };
    let len = hi - lo;
    let k2 = sup(hi);
    let index = stats.hill_tail_index();
    let cond = cond
        .est("k", k2.sqrt())
        .est("k2", k2)
        .est("sup_quarter", sup(lo + len.div_ceil(4)))
        .est("sup_half", sup(lo + len.div_ceil(2)))
        .est("tail_index", index)
        .est("pooled_samples", stats.pooled.len() as f64);
    if index.is_nan() {
        return Ok(cond.note("fewer than 100 nonzero noise samples"));
    }
    Ok(cond.verdict(Verdict::from_bool(index > a && k2.is_finite())))
}

/// Ten geometric points from `lo` to `hi`.
fn decade_grid(lo: usize, hi: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..10)
        .map(|i| ((lo as f64) * (hi as f64 / lo as f64).powf(i as f64 / 9.0)).round() as usize)
        .collect();
    out.dedup();
    out
}

/// `Σ_{n>t} c_n^{1+ν} ‖ε⁻_n‖^{1+ν} = o(α(t))`, with the pathwise sum replaced
/// by its ensemble mean and truncated at the end of the window. The ratio to
/// `α(t)` is evaluated over the decade `[N/100, N/10]`, away from the
/// truncation, and must decrease across it.
pub fn check_stable_noise_tail(stats: &IncrementStats, schedule: &Schedule) -> Result<Condition, HypothesisError> {
    let cond = Condition::new("stable_noise_tail").est("nu", stats.nu);
    let Some(p) = &stats.projector else {
        return Ok(cond.note("needs a trap split"));
    };
    if p.delta_plus == stats.dim {
        return Ok(cond.note("no stable directions").verdict(Verdict::Pass));
    }
    let (lo, hi) = stats.window;
    let (t0, t1) = (hi / 100, hi / 10);
    if t0 < lo.max(1) || stats.trajectories == 0 || (lo..hi).any(|n| stats.runs[n - lo] == 0) {
        return Ok(cond.note("window must start by N/100 with unthinned records"));
    }
    // suffix[k] = Σ over steps ≥ lo + k of c_{n+1}^{1+ν} E‖ε⁻_{n+1}‖^{1+ν}
    let len = hi - lo;
    let mut suffix = vec![0.0; len + 1];
    for k in (0..len).rev() {
        let term = stats.c[k].powf(1.0 + stats.nu) * stats.sum_minus_nu[k] / stats.runs[k] as f64;
        suffix[k] = suffix[k + 1] + term;
    }
    let grid = decade_grid(t0, t1);
    let mut ratios = Vec::with_capacity(grid.len());
    for &t in &grid {
        // Σ_{m>t}: paper index m = n + 1, so steps n ≥ t
        let alpha = schedule.tail_l2(t as f64)?;
        ratios.push(suffix[t - lo] / alpha);
    }
    let (first, last) = (ratios[0], *ratios.last().unwrap());
    let ok = last < first || (first == 0.0 && last == 0.0);
    Ok(cond
        .est("ratio_start", first)
        .est("ratio_end", last)
        .est("t_start", t0 as f64)
        .est("t_end", t1 as f64)
        .verdict(Verdict::from_bool(ok))
        .note("ratio of the ensemble-mean tail sum to α(t) must decrease over [N/100, N/10]"))
}

/// `Σ_{n>t} γ_n² = O(α(t))`, truncated at the horizon and evaluated over
/// `[N/100, N/10]`.
pub fn check_gamma_square_tail(schedule: &Schedule) -> Result<Condition, HypothesisError> {
    let n = schedule.horizon();
    let cond = Condition::new("gamma_square_tail").threshold(BOUNDED_GROWTH);
    if n < 1000 {
        return Ok(cond.note("horizon below 1000"));
    }
    let mut suffix = vec![0.0; n + 2];
    for k in (1..=n).rev() {
        suffix[k] = suffix[k + 1] + schedule.gamma(k).powi(2);
    }
    let mut vals = Vec::new();
    for t in decade_grid(n / 100, n / 10) {
        let alpha = schedule.tail_l2(t as f64)?;
        vals.push(if suffix[t + 1] == 0.0 { 0.0 } else { suffix[t + 1] / alpha });
    }
    let (first, second, verdict) = bounded_on_window(&vals);
    Ok(cond.est("sup_first_half", first).est("sup_second_half", second).verdict(verdict))
}

/// `Σ γ_n = ∞`, decided from the closed form of the `γ` sequence.
pub fn check_gamma_divergent(schedule: &Schedule) -> Condition {
    let cond = Condition::new("gamma_divergent");
    let verdict = match schedule.gamma_sequence() {
        Sequence::Zero => Verdict::Fail,
        Sequence::Constant { value } => Verdict::from_bool(*value > 0.0),
        Sequence::Power { exponent, scale } => Verdict::from_bool(*scale > 0.0 && *exponent <= 1.0),
        Sequence::Geometric { ratio, scale } => Verdict::from_bool(*scale > 0.0 && *ratio >= 1.0),
        Sequence::Custom { .. } => Verdict::Inconclusive,
    };
    let m = schedule.drift_clock(schedule.horizon()).unwrap_or(f64::NAN);
    cond.est("m_horizon", m).verdict(verdict)
}

/// `γ_n = O(c_n)` on a geometric grid over the horizon.
pub fn check_gamma_o_c(schedule: &Schedule) -> Condition {
    let n = schedule.horizon();
    let cond = Condition::new("gamma_o_c").threshold(BOUNDED_GROWTH);
    let mut grid: Vec<usize> = (0..=60)
        .map(|i| (n as f64).powf(i as f64 / 60.0).round() as usize)
        .filter(|&t| t >= 1)
        .collect();
    grid.dedup();
    let vals: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let (g, c) = (schedule.gamma(t), schedule.c(t));
            if g == 0.0 {
                0.0
            } else if c == 0.0 {
                f64::INFINITY
            } else {
                g / c
            }
        })
        .collect();
    let (first, second, verdict) = bounded_on_window(&vals);
    cond.est("sup_first_half", first).est("sup_second_half", second).verdict(verdict)
}

fn classification_condition(name: &str, split: Option<&TrapSplit>, ok: impl Fn(&TrapSplit) -> bool) -> Condition {
    let cond = Condition::new(name);
    match split {
        None => cond.note("no trap split"),
        Some(s) => cond
            .est("delta_plus", s.delta_plus as f64)
            .est("delta_minus", s.delta_minus as f64)
            .est("mu", s.mu)
            .note(s.classification.as_str())
            .verdict(Verdict::from_bool(ok(s))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremId {
    #[serde(rename = "th2n")]
    Th2n,
    #[serde(rename = "th22n")]
    Th22n,
    #[serde(rename = "th3bd")]
    Th3bd,
    #[serde(rename = "th4d_i")]
    Th4dI,
    #[serde(rename = "th4d_ii")]
    Th4dII,
    #[serde(rename = "th5d")]
    Th5d,
}

impl TheoremId {
    pub const ALL: [TheoremId; 6] = [
        TheoremId::Th2n,
        TheoremId::Th22n,
        TheoremId::Th3bd,
        TheoremId::Th4dI,
        TheoremId::Th4dII,
        TheoremId::Th5d,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TheoremId::Th2n => "th2n",
            TheoremId::Th22n => "th22n",
            TheoremId::Th3bd => "th3bd",
            TheoremId::Th4dI => "th4d_i",
            TheoremId::Th4dII => "th4d_ii",
            TheoremId::Th5d => "th5d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(with = "crate::serde_ext::opt_f64")]
    pub lambda_hat: Option<f64>,
    #[serde(with = "crate::serde_ext::opt_f64")]
    pub mu: Option<f64>,
    #[serde(with = "crate::serde_ext::opt_f64")]
    pub beta: Option<f64>,
    #[serde(with = "crate::serde_ext::opt_f64")]
    pub nu: Option<f64>,
    #[serde(with = "crate::serde_ext::f64")]
    pub a: f64,
    pub excitation_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub theorem_id: TheoremId,
    pub conditions: Vec<Condition>,
    pub constants: Constants,
    pub verdict: Verdict,
}

impl HypothesisReport {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.conditions
            .iter()
            .filter(|c| c.verdict == Verdict::Fail)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Plain-text table, one condition per line.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}: {}", self.theorem_id.as_str(), self.verdict.as_str());
        for c in &self.conditions {
            let ests: Vec<String> = c.estimates.iter().map(|e| format!("{}={:.6e}", e.name, e.value)).collect();
            let thr = c.threshold.map(|t| format!("{t:.3e}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "  {:<26} {:<12} thr={:<11} {}{}",
                c.name,
                c.verdict.as_str(),
                thr,
                ests.join(" "),
                if c.note.is_empty() { String::new() } else { format!("  ({})", c.note) }
            );
        }
        let k = &self.constants;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "  constants: lambda_hat={} mu={} beta={} nu={} a={} k={}",
            f(k.lambda_hat),
            f(k.mu),
            f(k.beta),
            f(k.nu),
            k.a,
            k.excitation_k
        );
        out
    }
}

/// Tunable parameters of the checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckParams {
    pub k: usize,
    pub a: f64,
    pub nu: Option<f64>,
    pub excitation_threshold: f64,
    pub cauchy_fraction: f64,
    pub lambda_margin: f64,
    pub rho: f64,
    /// `β` of the coercive drift condition.
    pub coercive_beta: f64,
    /// Step window for the excitation and moment checks.
    pub window: Option<(usize, usize)>,
    /// Step window of the Cauchy increment of the remainder check.
    pub remainder_window: Option<(usize, usize)>,
    /// Window of the rate constants.
    pub rate_window: Option<(usize, usize)>,
    /// Count increments only while the state is within this distance of
    /// the trap.
    pub localize: Option<f64>,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            k: 1,
            a: 4.0,
            nu: None,
            excitation_threshold: DEFAULT_EXCITATION_THRESHOLD,
            cauchy_fraction: DEFAULT_CAUCHY_FRACTION,
            lambda_margin: DEFAULT_LAMBDA_MARGIN,
            rho: 0.5,
            coercive_beta: 0.5,
            window: None,
            remainder_window: None,
            rate_window: None,
            localize: None,
        }
    }
}

/// Everything a theorem's conditions can draw on.
pub struct CheckInputs<'a> {
    pub stats: &'a IncrementStats,
    pub schedule: &'a Schedule,
    pub split: Option<&'a TrapSplit>,
    pub rates: Option<&'a RateConstants>,
    /// Drift evidence per mode.
    pub drift: &'a [(DriftSpec, DriftTally)],
    pub params: &'a CheckParams,
}

fn drift_for(inputs: &CheckInputs, coercive: bool) -> Condition {
    let found = inputs
        .drift
        .iter()
        .find(|(s, _)| matches!(s.mode, DriftMode::Coercive { .. }) == coercive);
    match found {
        Some((spec, tally)) => drift_condition(tally, spec),
        None => Condition::new(if coercive { "drift_coercive" } else { "drift_nonneg" }).note("no drift evidence supplied"),
    }
}

/// Evaluates every condition of `theorem` and combines the verdicts.
pub fn evaluate(theorem: TheoremId, inputs: &CheckInputs) -> Result<HypothesisReport, HypothesisError> {
    let p = inputs.params;
    let stats = inputs.stats;
    let plus = !matches!(theorem, TheoremId::Th2n | TheoremId::Th22n | TheoremId::Th3bd);
    let mut conds = Vec::new();
    if plus && stats.projector().is_none() {
        conds.push(Condition::new("noise_excitation_plus").note("needs a trap split"));
    } else {
        conds.push(check_noise_excitation(stats, p.k, p.excitation_threshold, plus, p.window)?);
    }
    conds.push(check_jump_moments(stats, p.a, p.window)?);

    let nu = p.nu;
    let need_nu = |name: &str| Condition::new(name).note("ν not configured");
    match theorem {
        TheoremId::Th2n => {
            conds.insert(0, drift_for(inputs, false));
            conds.push(check_remainder_square_summable(stats, p.cauchy_fraction, p.remainder_window)?);
        }
        TheoremId::Th22n => {
            conds.insert(0, drift_for(inputs, true));
            conds.push(match nu {
                Some(nu) => check_remainder_split_r(stats, nu, None)?,
                None => need_nu("remainder_split_r"),
            });
            conds.push(check_gamma_o_c(inputs.schedule));
        }
        TheoremId::Th3bd => {
            conds.insert(0, classification_condition("repulsive", inputs.split, |s| s.classification == Classification::Repulsive));
            conds.push(check_remainder_square_summable(stats, p.cauchy_fraction, p.remainder_window)?);
        }
        TheoremId::Th4dI => {
            conds.insert(0, classification_condition("repulsive", inputs.split, |s| s.classification == Classification::Repulsive));
            conds.push(check_remainder_square_summable(stats, p.cauchy_fraction, p.remainder_window)?);
        }
        TheoremId::Th4dII => {
            conds.insert(0, classification_condition("unstable", inputs.split, |s| s.classification.is_unstable()));
            conds.push(check_remainder_square_summable(stats, p.cauchy_fraction, p.remainder_window)?);
            conds.push(check_gamma_square_tail(inputs.schedule)?);
            conds.push(if nu.is_some() {
                check_stable_noise_tail(stats, inputs.schedule)?
            } else {
                need_nu("stable_noise_tail")
            });
        }
        TheoremId::Th5d => {
            conds.insert(
                0,
                classification_condition("hyperbolic_unstable", inputs.split, |s| {
                    s.is_hyperbolic() && s.classification.is_unstable()
                }),
            );
            conds.push(match (inputs.rates, inputs.split, nu) {
                (Some(r), Some(s), Some(nu)) => check_rate_condition(r, s, nu, p.lambda_margin)?,
                _ => Condition::new("rate_condition").note("needs rate constants, a trap split and ν"),
            });
            conds.push(check_remainder_square_summable(stats, p.cauchy_fraction, p.remainder_window)?);
            conds.push(check_gamma_square_tail(inputs.schedule)?);
            conds.push(check_gamma_divergent(inputs.schedule));
        }
    }

    let lambda_hat = inputs.rates.map(|r| r.lambda_hat);
    let mu = inputs.split.filter(|s| s.delta_minus > 0).map(|s| s.mu);
    let beta = match (lambda_hat, mu) {
        (Some(l), Some(m)) if l.is_finite() && m.is_finite() => Some(l.max(m)),
        (Some(l), None) if l.is_finite() => Some(l),
        _ => None,
    };
    let verdict = Verdict::combine(conds.iter().map(|c| c.verdict));
    Ok(HypothesisReport {
        theorem_id: theorem,
        conditions: conds,
        constants: Constants { lambda_hat, mu, beta, nu, a: p.a, excitation_k: p.k },
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ensemble_map, run, run_with, RunOptions};
    use crate::models::{control_model, ControlVariant, LinearModel, Model, NoiseLaw, NoiseSpec};
    use crate::spectral::{adapted_inner_product, split_jacobian};
    use nalgebra::DVector;

    fn stats_for(model: &dyn Model, schedule: &Schedule, x0: &[f64], n: usize, runs: usize, proj: Option<Projector>) -> IncrementStats {
        let trajs = ensemble_map(runs, 11, 4, |_, seed| run(model, schedule, x0, n, seed).unwrap()).unwrap();
        let mut s = IncrementStats::new(model.dim(), (0, n), 4.0, 1.0, proj, runs).unwrap();
        for t in &trajs {
            s.add(t).unwrap();
        }
        s
    }

    fn rademacher() -> LinearModel {
        LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Rademacher))
    }

    #[test]
    fn localization_drops_noise_but_keeps_remainder() {
        let model = control_model(ControlVariant::DivergentRemainder);
        let n = 2000;
        let sched = Schedule::harmonic(n).unwrap();
        let trajs = ensemble_map(40, 3, 4, |_, seed| run(&model, &sched, &[0.0], n, seed).unwrap()).unwrap();
        let mut s = IncrementStats::new(1, (0, n), 4.0, 1.0, None, 40)
            .unwrap()
            .localized(vec![0.0], 1e-3)
            .unwrap();
        for t in &trajs {
            s.add(t).unwrap();
        }
        assert_eq!(s.runs_at(0), 40);
        assert!(s.runs_at(n - 1) < 40);
        for k in [0, n / 2, n - 1] {
            let expected = 1.0 / (k + 1) as f64;
            assert!((s.mean_rem2(k).unwrap() - expected).abs() <= 1e-12 * expected);
        }
        let c = check_remainder_square_summable(&s, DEFAULT_CAUCHY_FRACTION, None).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
        assert!(IncrementStats::new(1, (0, n), 4.0, 1.0, None, 1).unwrap().localized(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn rademacher_excites_and_degenerate_does_not() {
        let sched = Schedule::harmonic(400).unwrap();
        let s = stats_for(&rademacher(), &sched, &[0.0], 400, 40, None);
        let c = check_noise_excitation(&s, 1, DEFAULT_EXCITATION_THRESHOLD, false, None).unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert_eq!(c.estimate("liminf_proxy"), Some(1.0));
        assert_eq!(c.estimate("limsup_proxy"), Some(1.0));
        let j = check_jump_moments(&s, 4.0, None).unwrap();
        assert_eq!(j.verdict, Verdict::Pass);
        assert_eq!(j.estimate("k"), Some(1.0));
        assert_eq!(j.estimate("tail_index"), Some(f64::INFINITY));

        let dead = control_model(ControlVariant::DegenerateNoise);
        let s = stats_for(&dead, &sched, &[0.0], 400, 40, None);
        let c = check_noise_excitation(&s, 1, DEFAULT_EXCITATION_THRESHOLD, false, None).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
        assert_eq!(c.estimate("liminf_proxy"), Some(0.0));
    }

    #[test]
    fn few_runs_inconclusive() {
        let sched = Schedule::harmonic(100).unwrap();
        let s = stats_for(&rademacher(), &sched, &[0.0], 100, 10, None);
        let c = check_noise_excitation(&s, 1, 1e-4, false, None).unwrap();
        assert_eq!(c.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn heavy_tails_fail_moment_check() {
        let m = LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Pareto { shape: 3.0 }));
        let sched = Schedule::harmonic(2000).unwrap();
        let s = stats_for(&m, &sched, &[0.0], 2000, 100, None);
        let j = check_jump_moments(&s, 4.0, None).unwrap();
        assert_eq!(j.verdict, Verdict::Fail, "{j:?}");
        let idx = j.estimate("tail_index").unwrap();
        assert!((idx - 3.0).abs() < 0.6, "{idx}");

        let g = LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Gaussian { sd: 1.0 }));
        let s = stats_for(&g, &sched, &[0.0], 2000, 100, None);
        assert_eq!(check_jump_moments(&s, 4.0, None).unwrap().verdict, Verdict::Pass);
        assert!(check_jump_moments(&s, 2.0, None).is_err());
    }

    #[test]
    fn remainder_series() {
        let sched = Schedule::harmonic(20_000).unwrap();
        let mut conv = LinearModel::new(
            "r1",
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            NoiseSpec::new(NoiseLaw::Rademacher),
            crate::models::RemainderLaw::Power { exponent: 1.0, scale: 1.0 },
        )
        .unwrap();
        let s = stats_for(&conv, &sched, &[0.0], 20_000, 2, None);
        assert_eq!(check_remainder_square_summable(&s, 1e-3, None).unwrap().verdict, Verdict::Pass);
        conv = control_model(ControlVariant::DivergentRemainder);
        let s = stats_for(&conv, &sched, &[0.0], 20_000, 2, None);
        let c = check_remainder_square_summable(&s, 1e-3, None).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
        // nested windows sharing the right end: a fail stays a fail
        for w0 in [5_000, 1_000, 0] {
            let c = check_remainder_square_summable(&s, 1e-3, Some((w0, 20_000))).unwrap();
            assert_eq!(c.verdict, Verdict::Fail);
        }
        let empty = IncrementStats::new(1, (0, 10), 4.0, 1.0, None, 1).unwrap();
        assert_eq!(check_remainder_square_summable(&empty, 1e-3, None).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn drift_sign_examples() {
        let sched = Schedule::harmonic(500).unwrap();
        let spec = DriftSpec { x_star: vec![0.0], rho: 10.0, mode: DriftMode::Nonneg, metric: DriftMetric::Euclidean, window: None };
        let t = run(&rademacher(), &sched, &[0.0], 500, 1).unwrap();
        assert_eq!(check_drift_sign(std::slice::from_ref(&t), &spec).unwrap().verdict, Verdict::Pass);

        let attract = LinearModel::new(
            "attract",
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
            NoiseSpec::new(NoiseLaw::Rademacher),
            Default::default(),
        )
        .unwrap();
        let t = run(&attract, &sched, &[0.3], 500, 1).unwrap();
        assert_eq!(check_drift_sign(&[t], &spec).unwrap().verdict, Verdict::Fail);

        let far = DriftSpec { rho: 1e-9, ..spec.clone() };
        let t = run(&rademacher(), &sched, &[1.0], 10, 1).unwrap();
        assert_eq!(check_drift_sign(&[t], &far).unwrap().verdict, Verdict::Inconclusive);
    }

    #[test]
    fn adapted_drift_on_saddle() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, -2.0, -3.0]);
        let split = split_jacobian(&h, None).unwrap();
        let norm = adapted_inner_product(&split.h_plus).unwrap();
        let model = LinearModel::new("saddle", h.clone(), DVector::zeros(2), NoiseSpec::new(NoiseLaw::Rademacher), Default::default()).unwrap();
        let sched = Schedule::harmonic(2000).unwrap();
        let t = run(&model, &sched, &[0.01, -0.02], 2000, 3).unwrap();
        let spec = DriftSpec {
            x_star: vec![0.0, 0.0],
            rho: 1e9,
            mode: DriftMode::Coercive { beta: norm.lambda },
            metric: DriftMetric::adapted(&split, &norm),
            window: None,
        };
        let c = check_drift_sign(std::slice::from_ref(&t), &spec).unwrap();
        assert_eq!(c.verdict, Verdict::Pass, "{c:?}");
        // Euclidean sign fails somewhere on the saddle
        let eu = DriftSpec { metric: DriftMetric::Euclidean, mode: DriftMode::Nonneg, ..spec };
        let xs: Vec<Trajectory> = (0..20).map(|s| run(&model, &sched, &[0.01, -0.02], 2000, s).unwrap()).collect();
        assert_eq!(check_drift_sign(&xs, &eu).unwrap().verdict, Verdict::Fail);
    }

    fn split_with_mu(mu: f64) -> TrapSplit {
        split_jacobian(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, mu]), None).unwrap()
    }

    #[test]
    fn rate_condition_examples() {
        let sched = Schedule::harmonic(100_000).unwrap();
        let rates = sched.rate_constants((1000, 100_000)).unwrap();
        let split = split_with_mu(-1.0);
        let c = check_rate_condition(&rates, &split, 1.0, DEFAULT_LAMBDA_MARGIN).unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert!((c.estimate("lambda_hat").unwrap() + 0.5).abs() < 0.01);
        assert_eq!(c.estimate("beta"), Some(c.estimate("lambda_hat").unwrap().max(-1.0)));
        assert!((c.estimate("margin").unwrap() - 0.5).abs() < 0.02);

        let c = check_rate_condition(&rates, &split, 0.1, DEFAULT_LAMBDA_MARGIN).unwrap();
        assert_eq!(c.verdict, Verdict::Pass);
        assert!((c.estimate("margin").unwrap() - 0.05).abs() < 0.01);

        let slow = Schedule::power(0.75, 0.75, 100_000).unwrap();
        let rates = slow.rate_constants((1000, 100_000)).unwrap();
        let c = check_rate_condition(&rates, &split, 1.0, DEFAULT_LAMBDA_MARGIN).unwrap();
        assert_eq!(c.verdict, Verdict::Fail);
        assert!(check_rate_condition(&rates, &split, 0.0, 0.05).is_err());
    }

    #[test]
    fn schedule_conditions() {
        let h = Schedule::harmonic(100_000).unwrap();
        assert_eq!(check_gamma_square_tail(&h).unwrap().verdict, Verdict::Pass);
        assert_eq!(check_gamma_divergent(&h).verdict, Verdict::Pass);
        assert_eq!(check_gamma_o_c(&h).verdict, Verdict::Pass);
        let fast_c = Schedule::power(0.6, 1.0, 100_000).unwrap();
        assert_eq!(check_gamma_o_c(&fast_c).verdict, Verdict::Fail);
        let summable = Schedule::power(2.0, 1.0, 100_000).unwrap();
        assert_eq!(check_gamma_divergent(&summable).verdict, Verdict::Fail);
    }

    #[test]
    fn stable_noise_tail_trend() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let split = split_jacobian(&h, None).unwrap();
        let sched = Schedule::harmonic(10_000).unwrap();
        let model = LinearModel::new("s", h, DVector::zeros(2), NoiseSpec::new(NoiseLaw::Rademacher), Default::default()).unwrap();
        let opts = RunOptions::new(10_000);
        let trajs = ensemble_map(40, 3, 4, |_, s| run_with(&model, &sched, &[0.0, 0.0], &opts, s).unwrap()).unwrap();
        for (nu, expect) in [(1.0, Verdict::Pass), (0.25, Verdict::Fail)] {
            let mut st = IncrementStats::new(2, (0, 10_000), 4.0, nu, Some(Projector::from_split(&split)), 40).unwrap();
            for t in &trajs {
                st.add(t).unwrap();
            }
            assert_eq!(check_stable_noise_tail(&st, &sched).unwrap().verdict, expect, "ν = {nu}");
        }
    }

    #[test]
    fn order_k_sums_scale() {
        let sched = Schedule::harmonic(2000).unwrap();
        let g = LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Gaussian { sd: 1.0 }));
        let s = stats_for(&g, &sched, &[0.0], 2000, 200, None);
        let c1 = check_noise_excitation(&s, 1, 1e-4, false, None).unwrap();
        let c2 = check_noise_excitation(&s, 2, 1e-4, false, None).unwrap();
        let (m1, m2) = (c1.estimate("window_mean").unwrap(), c2.estimate("window_mean").unwrap());
        let se = c2.estimate("window_se").unwrap();
        assert!((m2 - 2.0 * m1).abs() <= 3.0 * se, "{m1} {m2} {se}");
    }

    #[test]
    fn report_assembly() {
        let sched = Schedule::harmonic(1000).unwrap();
        let model = rademacher();
        let split = split_jacobian(&DMatrix::from_element(1, 1, 1.0), None).unwrap();
        let s = stats_for(&model, &sched, &[0.0], 1000, 50, Some(Projector::from_split(&split)));
        let trajs: Vec<Trajectory> = (0..5).map(|i| run(&model, &sched, &[0.0], 1000, i).unwrap()).collect();
        let spec = DriftSpec { x_star: vec![0.0], rho: 0.5, mode: DriftMode::Nonneg, metric: DriftMetric::Euclidean, window: None };
        let mut tally = DriftTally::default();
        for t in &trajs {
            tally = tally.merge(tally_drift(t, &spec).unwrap());
        }
        let params = CheckParams::default();
        let drift = [(spec, tally)];
        let inputs = CheckInputs { stats: &s, schedule: &sched, split: Some(&split), rates: None, drift: &drift, params: &params };
        for th in [TheoremId::Th2n, TheoremId::Th3bd, TheoremId::Th4dI] {
            let r = evaluate(th, &inputs).unwrap();
            assert_eq!(r.verdict, Verdict::Pass, "{}", r.render_table());
        }
        let r = evaluate(TheoremId::Th5d, &inputs).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert_eq!(r.condition("hyperbolic_unstable").unwrap().verdict, Verdict::Pass);
        assert_eq!(r.condition("rate_condition").unwrap().verdict, Verdict::Inconclusive);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"theorem_id\":\"th5d\""));
        let back: HypothesisReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(Verdict::combine([Verdict::Pass, Verdict::Inconclusive]), Verdict::Inconclusive);
        assert_eq!(Verdict::combine([Verdict::Inconclusive, Verdict::Fail]), Verdict::Fail);
    }
}
