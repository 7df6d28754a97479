//! Mean-field flow and the pseudotrajectory diagnostics.
//!
//! Time is the drift clock `m(n) = Σ_{1≤k≤n} γ_k`; a run seen on that clock
//! is a [`TimeChangedPath`], which is compared against restarts of the flow
//! (`apt_deficit`) and against the unstable manifold (`manifold_rate`).

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{fmt_float, Trajectory};
use crate::models::{AffineManifold, FieldError, VectorField};
use crate::sequences::Schedule;

/// Target number of flow comparison points per APT window.
pub const APT_POINTS: usize = 512;
/// Number of distance samples in a manifold-rate fit.
pub const MANIFOLD_POINTS: usize = 200;
pub const DISTANCE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("flow left the field's domain at time {time}: {source}")]
    DomainExit {
        time: f64,
        #[source]
        source: FieldError,
    },
    #[error("degenerate time change: {0}")]
    Degenerate(String),
}

fn axpy(out: &mut [f64], x: &[f64], a: f64, k: &[f64]) {
    for i in 0..out.len() {
        out[i] = x[i] + a * k[i];
    }
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(d: usize) -> Self {
        Rk4 { k1: vec![0.0; d], k2: vec![0.0; d], k3: vec![0.0; d], k4: vec![0.0; d], tmp: vec![0.0; d] }
    }

    fn step(&mut self, f: &dyn VectorField, x: &mut [f64], h: f64, t: f64) -> Result<(), FlowError> {
        let exit = |source| FlowError::DomainExit { time: t, source };
        f.eval(x, &mut self.k1).map_err(exit)?;
        axpy(&mut self.tmp, x, 0.5 * h, &self.k1);
        f.eval(&self.tmp, &mut self.k2).map_err(exit)?;
        axpy(&mut self.tmp, x, 0.5 * h, &self.k2);
        f.eval(&self.tmp, &mut self.k3).map_err(exit)?;
        axpy(&mut self.tmp, x, h, &self.k3);
        f.eval(&self.tmp, &mut self.k4).map_err(exit)?;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::DomainExit { time: t + h, source: FieldError::Domain("non-finite state".into()) });
        }
        Ok(())
    }
}

fn check_step(f: &dyn VectorField, x0: &[f64], h: f64) -> Result<(), FlowError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(FlowError::InvalidArgument(format!("step {h} must be positive")));
    }
    if x0.len() != f.dim() {
        return Err(FlowError::InvalidArgument(format!("x0 has length {}, field dimension {}", x0.len(), f.dim())));
    }
    Ok(())
}

/// `φ_T(x0)` by classical RK4 with step at most `h`; the last step is
/// shortened to land on `T`.
pub fn integrate_flow(f: &dyn VectorField, x0: &[f64], h: f64, t_end: f64) -> Result<Vec<f64>, FlowError> {
    let mut out = integrate_at(f, x0, h, &[t_end])?;
    Ok(out.pop().unwrap())
}

/// `φ_t(x0)` at each of the non-decreasing times `times`.
pub fn integrate_at(f: &dyn VectorField, x0: &[f64], h: f64, times: &[f64]) -> Result<Vec<Vec<f64>>, FlowError> {
    check_step(f, x0, h)?;
    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(FlowError::InvalidArgument("times must be finite, non-negative and sorted".into()));
    }
    let mut rk = Rk4::new(x0.len());
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / h).ceil().max(1.0) as usize;
            let dt = span / steps as f64;
            for i in 0..steps {
                rk.step(f, &mut x, dt, t + i as f64 * dt)?;
            }
            t = target;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// A run on the drift clock, linearly interpolated between samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeChangedPath {
    pub dim: usize,
    pub s_grid: Vec<f64>,
    /// `s_grid.len() × dim`, row-major.
    pub states: Vec<f64>,
    /// `max γ_{n+1}‖G_n‖` over retained records: bounds the gap between the
    /// chord and the drift segment of the interpolated process.
    #[serde(with = "crate::serde_ext::opt_f64", default)]
    pub chord_bound: Option<f64>,
}

impl TimeChangedPath {
    pub fn from_samples(s_grid: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self, FlowError> {
        if s_grid.is_empty() || s_grid.len() != states.len() {
            return Err(FlowError::InvalidArgument("grid and states must be non-empty and of equal length".into()));
        }
        if s_grid.windows(2).any(|w| !(w[1] > w[0])) || s_grid.iter().any(|s| !s.is_finite()) {
            return Err(FlowError::Degenerate("s grid must be finite and strictly increasing".into()));
        }
        let dim = states[0].len();
        if states.iter().any(|x| x.len() != dim) {
            return Err(FlowError::InvalidArgument("states of unequal length".into()));
        }
        Ok(TimeChangedPath { dim, s_grid, states: states.concat(), chord_bound: None })
    }

    pub fn len(&self) -> usize {
        self.s_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_grid.is_empty()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.s_grid[0], *self.s_grid.last().unwrap())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// `X^m_s`, exact at grid points.
    pub fn at(&self, s: f64) -> Result<Vec<f64>, FlowError> {
        let (lo, hi) = self.range();
        if !(s >= lo && s <= hi) {
            return Err(FlowError::InvalidArgument(format!("time {s} outside [{lo}, {hi}]")));
        }
        let i = self.s_grid.partition_point(|&g| g <= s);
        if i > 0 && self.s_grid[i - 1] == s {
            return Ok(self.state(i - 1).to_vec());
        }
        let (a, b) = (i - 1, i);
        let w = (s - self.s_grid[a]) / (self.s_grid[b] - self.s_grid[a]);
        Ok(self
            .state(a)
            .iter()
            .zip(self.state(b))
            .map(|(x, y)| x + w * (y - x))
            .collect())
    }
}

/// Fractional index `n + θ` with `m(n + θ) = s`, linear between integers.
pub fn inverse_clock(schedule: &Schedule, s: f64) -> Result<f64, FlowError> {
    let n = schedule.horizon();
    let m = |k: usize| schedule.drift_clock(k).unwrap();
    if !(s >= 0.0 && s <= m(n)) {
        return Err(FlowError::InvalidArgument(format!("clock value {s} outside [0, {}]", m(n))));
    }
    let (mut lo, mut hi) = (0usize, n);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if m(mid) <= s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if m(lo) == s {
        return Ok(lo as f64);
    }
    let span = m(hi) - m(lo);
    if span <= 0.0 {
        return Err(FlowError::Degenerate(format!("clock is flat between {lo} and {hi}")));
    }
    Ok(lo as f64 + (s - m(lo)) / span)
}

/// The run on the drift clock: `s_n = m(n)` at every stored state.
pub fn time_change(traj: &Trajectory, schedule: &Schedule) -> Result<TimeChangedPath, FlowError> {
    let n = traj.n_steps();
    if n > schedule.horizon() {
        return Err(FlowError::InvalidArgument(format!("run of {n} steps exceeds the horizon")));
    }
    let s_grid: Vec<f64> = (0..=n).map(|k| schedule.drift_clock(k).unwrap()).collect();
    if let Some(k) = s_grid.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(FlowError::Degenerate(format!("γ_{} = 0: the clock does not advance", k + 1)));
    }
    let chord = (0..traj.n_records())
        .map(|i| {
            let g2: f64 = traj.g_at(i).iter().map(|v| v * v).sum();
            traj.gamma[i] * g2.sqrt()
        })
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    Ok(TimeChangedPath { dim: traj.dim, s_grid, states: traj.states.clone(), chord_bound: chord })
}

/// Least-squares line through `(x, y)`: `(slope, intercept, rms residual)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    Some((slope, icpt, (rss / n as f64).sqrt()))
}

/// Start index of the tail third of a grid of `len` points.
fn tail_third(len: usize) -> usize {
    len - len.div_ceil(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AptDeficit {
    pub window: f64,
    pub t: Vec<f64>,
    /// `sup_{0≤h≤T} ‖X^m_{t+h} − φ_h(X^m_t)‖`; `+∞` where the flow left the
    /// field's domain.
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub deficit: Vec<f64>,
    /// `(1/t) log deficit`
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub rate: Vec<f64>,
    /// Slope of `log deficit` against `t` over the tail third of the grid.
    #[serde(with = "crate::serde_ext::f64")]
    pub slope: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub fit_residual: f64,
    /// Grid points excluded from the fit (domain exits or zero deficit).
    pub excluded: Vec<usize>,
}

/// Evenly thinned indices `lo..hi`, always keeping the last.
fn thinned(lo: usize, hi: usize, target: usize) -> Vec<usize> {
    if hi <= lo {
        return Vec::new();
    }
    let stride = (hi - lo).div_ceil(target).max(1);
    let mut out: Vec<usize> = (lo..hi).step_by(stride).collect();
    if *out.last().unwrap() != hi - 1 {
        out.push(hi - 1);
    }
    out
}

/// Pseudotrajectory deficit. At each `t` of `t_grid` the flow is restarted
/// from `X^m_t` and compared with the path at up to `APT_POINTS` grid times
/// in `(t, t + T)`, plus `t + T` itself.
pub fn apt_deficit(
    path: &TimeChangedPath,
    f: &dyn VectorField,
    window: f64,
    t_grid: &[f64],
    h: f64,
) -> Result<AptDeficit, FlowError> {
    if !(window >= 0.0 && window.is_finite()) {
        return Err(FlowError::InvalidArgument(format!("window {window} must be non-negative")));
    }
    let (s0, s1) = path.range();
    if let Some(t) = t_grid.iter().find(|&&t| !(t >= s0 && t + window <= s1)) {
        return Err(FlowError::InvalidArgument(format!("[{t}, {t} + {window}] outside the path range [{s0}, {s1}]")));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FlowError::InvalidArgument("t grid must be strictly increasing".into()));
    }
    let mut deficit = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let x = path.at(t)?;
        let lo = path.s_grid.partition_point(|&g| g <= t);
        let hi = path.s_grid.partition_point(|&g| g < t + window);
        let mut times: Vec<f64> = thinned(lo, hi, APT_POINTS).into_iter().map(|i| path.s_grid[i] - t).collect();
        times.push(window);
        let flow = match integrate_at(f, &x, h, &times) {
            Ok(v) => v,
            Err(FlowError::DomainExit { .. }) => {
                deficit.push(f64::INFINITY);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut sup = 0.0f64;
        for (dt, phi) in times.iter().zip(&flow) {
            let y = path.at(t + dt)?;
            let dist = y.iter().zip(phi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            sup = sup.max(dist);
        }
        deficit.push(sup);
    }
    let rate = t_grid
        .iter()
        .zip(&deficit)
        .map(|(t, d)| if *t > 0.0 { d.ln() / t } else { f64::NAN })
        .collect();
    let excluded: Vec<usize> = (0..deficit.len()).filter(|&i| !(deficit[i].is_finite() && deficit[i] > 0.0)).collect();
    let start = tail_third(t_grid.len());
    let (xs, ys): (Vec<f64>, Vec<f64>) = (start..t_grid.len())
        .filter(|i| !excluded.contains(i))
        .map(|i| (t_grid[i], deficit[i].ln()))
        .unzip();
    let (slope, _, resid) = fit_line(&xs, &ys).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    Ok(AptDeficit { window, t: t_grid.to_vec(), deficit, rate, slope, fit_residual: resid, excluded })
}

/// `n` evenly spaced points from `a` to `b`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldRate {
    pub s: Vec<f64>,
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub log_distance: Vec<f64>,
    /// Slope of `log d(X^m_s, K)` against `s`; `−∞` when the path lies on `K`.
    #[serde(with = "crate::serde_ext::f64")]
    pub slope: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub fit_residual: f64,
    /// Some distance fell below `DISTANCE_FLOOR` and was clamped.
    pub clamped: bool,
}

/// Tail slope of `log d(X^m_s, K)` over `MANIFOLD_POINTS` evenly spaced
/// times: in `window` when given, else the last third of the path's range.
pub fn manifold_rate(
    path: &TimeChangedPath,
    k: &AffineManifold,
    window: Option<(f64, f64)>,
) -> Result<ManifoldRate, FlowError> {
    if k.basepoint.len() != path.dim {
        return Err(FlowError::InvalidArgument(format!(
            "manifold in dimension {}, path in {}",
            k.basepoint.len(),
            path.dim
        )));
    }
    let (s0, s1) = path.range();
    let (a, b) = window.unwrap_or((s0 + (s1 - s0) * 2.0 / 3.0, s1));
    if !(a >= s0 && b <= s1 && a < b) {
        return Err(FlowError::InvalidArgument(format!("window [{a}, {b}] outside [{s0}, {s1}]")));
    }
    let s = linspace(a, b, MANIFOLD_POINTS);
    let mut clamped = false;
    let mut all_zero = true;
    let mut log_distance = Vec::with_capacity(s.len());
    for &t in &s {
        let dist = k.distance(&path.at(t)?);
        if dist != 0.0 {
            all_zero = false;
        }
        if dist < DISTANCE_FLOOR {
            clamped = true;
        }
        log_distance.push(dist.max(DISTANCE_FLOOR).ln());
    }
    let (slope, resid) = if all_zero {
        (f64::NEG_INFINITY, 0.0)
    } else {
        let (m, _, r) = fit_line(&s, &log_distance).unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        (m, r)
    };
    Ok(ManifoldRate { s, log_distance, slope, fit_residual: resid, clamped })
}

/// CSV `t,deficit,rate`.
pub fn write_apt_csv<W: Write>(apt: &AptDeficit, mut w: W) -> io::Result<()> {
    writeln!(w, "t,deficit,rate")?;
    for i in 0..apt.t.len() {
        writeln!(w, "{},{},{}", fmt_float(apt.t[i]), fmt_float(apt.deficit[i]), fmt_float(apt.rate[i]))?;
    }
    Ok(())
}

/// CSV `s,log_distance`.
pub fn write_manifold_csv<W: Write>(rate: &ManifoldRate, mut w: W) -> io::Result<()> {
    writeln!(w, "s,log_distance")?;
    for (s, l) in rate.s.iter().zip(&rate.log_distance) {
        writeln!(w, "{},{}", fmt_float(*s), fmt_float(*l))?;
    }
    Ok(())
}
