//! Deterministic step and noise schedules.
//!
//! A [`Schedule`] holds the drift steps `γ_n` and the noise steps `c_n` of the
//! recursion `X_{n+1} = X_n + γ_{n+1} G_n + c_{n+1} (ε_{n+1} + r_{n+1})`, together
//! with the two derived rate quantities used throughout the crate:
//!
//! * the tail noise scale `α(t) = sqrt(Σ_{n>t} c_n²)`, and
//! * the drift clock `m(t) = Σ_{k≤t} γ_k`.
//!
//! Prefix and suffix sums are materialized once at construction, so every query
//! is O(1) and a schedule can be shared read-only across Monte Carlo workers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by schedule construction and queries.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tail Σ c_n² diverges for {0}")]
    Divergent(String),
    #[error("index {requested} is beyond the materialized horizon {horizon}")]
    InsufficientHorizon { requested: f64, horizon: usize },
    #[error("degenerate schedule: {0}")]
    Degenerate(String),
}

/// One non-negative deterministic sequence `a_0, a_1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum Sequence {
    /// `a_n = 0`.
    Zero,
    /// `a_n = value` for every `n ≥ 0`.
    Constant { value: f64 },
    /// `a_n = scale · n^{-exponent}` for `n ≥ 1`, and `a_0 = 0`.
    Power { exponent: f64, scale: f64 },
    /// `a_n = scale · ratio^n` for `n ≥ 0`.
    Geometric { ratio: f64, scale: f64 },
    /// Explicit values; must cover the schedule horizon.
    Custom { values: Vec<f64> },
}

/// Closed-form tag of a sequence, used to decide how a tail is completed
/// beyond the materialized horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum ClosedForm {
    Power { exponent: f64 },
    Harmonic,
    Geometric { ratio: f64 },
    Constant,
    Custom,
}

impl Sequence {
    pub fn power(exponent: f64) -> Self {
        Sequence::Power { exponent, scale: 1.0 }
    }

    pub fn harmonic() -> Self {
        Sequence::power(1.0)
    }

    pub fn geometric(ratio: f64) -> Self {
        Sequence::Geometric { ratio, scale: 1.0 }
    }

    pub fn constant(value: f64) -> Self {
        Sequence::Constant { value }
    }

    /// Value at index `n`. Custom sequences return 0 past their end.
    pub fn value(&self, n: usize) -> f64 {
        match self {
            Sequence::Zero => 0.0,
            Sequence::Constant { value } => *value,
            Sequence::Power { exponent, scale } => {
                if n == 0 {
                    0.0
                } else {
                    scale * (n as f64).powf(-exponent)
                }
            }
            Sequence::Geometric { ratio, scale } => scale * ratio.powi(n as i32),
            Sequence::Custom { values } => values.get(n).copied().unwrap_or(0.0),
        }
    }

    pub fn closed_form(&self) -> ClosedForm {
        match self {
            Sequence::Zero | Sequence::Constant { .. } => ClosedForm::Constant,
            Sequence::Power { exponent, .. } if *exponent == 1.0 => ClosedForm::Harmonic,
            Sequence::Power { exponent, .. } => ClosedForm::Power { exponent: *exponent },
            Sequence::Geometric { ratio, .. } => ClosedForm::Geometric { ratio: *ratio },
            Sequence::Custom { .. } => ClosedForm::Custom,
        }
    }

    fn validate(&self, name: &str, horizon: usize) -> Result<(), ScheduleError> {
        let bad = |msg: String| Err(ScheduleError::Invalid(format!("{name}: {msg}")));
        match self {
            Sequence::Zero => Ok(()),
            Sequence::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return bad(format!("constant value {value} must be finite and ≥ 0"));
                }
                Ok(())
            }
            Sequence::Power { exponent, scale } => {
                if !(exponent.is_finite() && *exponent >= 0.0) {
                    return bad(format!("power exponent {exponent} must be finite and ≥ 0"));
                }
                if !(scale.is_finite() && *scale >= 0.0) {
                    return bad(format!("scale {scale} must be finite and ≥ 0"));
                }
                Ok(())
            }
            Sequence::Geometric { ratio, scale } => {
                if !(ratio.is_finite() && *ratio >= 0.0) {
                    return bad(format!("geometric ratio {ratio} must be finite and ≥ 0"));
                }
                if !(scale.is_finite() && *scale >= 0.0) {
                    return bad(format!("scale {scale} must be finite and ≥ 0"));
                }
                Ok(())
            }
            Sequence::Custom { values } => {
                if values.len() <= horizon {
                    return bad(format!(
                        "custom sequence has {} values, horizon {horizon} needs {}",
                        values.len(),
                        horizon + 1
                    ));
                }
                if let Some((i, v)) = values
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
                {
                    return bad(format!("value {v} at index {i} must be finite and ≥ 0"));
                }
                Ok(())
            }
        }
    }
}

/// `Σ_{n>k} n^{-q}` for `q > 1`.
///
/// Sums directly up to a cutoff and completes with the Euler–Maclaurin
/// expansion, which is accurate to machine precision once the cutoff is ≥ 50.
fn power_tail(q: f64, k: usize) -> f64 {
    const CUTOFF: usize = 64;
    let start = k.max(CUTOFF);
    let nf = start as f64;
    let euler_maclaurin = nf.powf(1.0 - q) / (q - 1.0) - 0.5 * nf.powf(-q)
        + q / 12.0 * nf.powf(-q - 1.0)
        - q * (q + 1.0) * (q + 2.0) / 720.0 * nf.powf(-q - 3.0)
        + q * (q + 1.0) * (q + 2.0) * (q + 3.0) * (q + 4.0) / 30240.0 * nf.powf(-q - 5.0);
    // smallest terms first
    let mut head = 0.0;
    for n in ((k + 1)..=start).rev() {
        head += (n as f64).powf(-q);
    }
    euler_maclaurin + head
}

/// Specification of a schedule as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `γ_n = gamma_scale · n^{-gamma_exp}`, `c_n = c_scale · n^{-c_exp}`.
    Power {
        gamma_exp: f64,
        c_exp: f64,
        horizon: usize,
        #[serde(default = "one")]
        gamma_scale: f64,
        #[serde(default = "one")]
        c_scale: f64,
    },
    /// `γ_n = c_n = 1/n`.
    Harmonic { horizon: usize },
    /// Independent sequence descriptions for `γ` and `c`.
    Sequences {
        gamma: Sequence,
        c: Sequence,
        horizon: usize,
    },
}

fn one() -> f64 {
    1.0
}

impl ScheduleSpec {
    pub fn horizon(&self) -> usize {
        match self {
            ScheduleSpec::Power { horizon, .. }
            | ScheduleSpec::Harmonic { horizon }
            | ScheduleSpec::Sequences { horizon, .. } => *horizon,
        }
    }

    pub fn build(&self) -> Result<Schedule, ScheduleError> {
        match self {
            ScheduleSpec::Power {
                gamma_exp,
                c_exp,
                horizon,
                gamma_scale,
                c_scale,
            } => Schedule::new(
                Sequence::Power { exponent: *gamma_exp, scale: *gamma_scale },
                Sequence::Power { exponent: *c_exp, scale: *c_scale },
                *horizon,
            ),
            ScheduleSpec::Harmonic { horizon } => Schedule::harmonic(*horizon),
            ScheduleSpec::Sequences { gamma, c, horizon } => {
                Schedule::new(gamma.clone(), c.clone(), *horizon)
            }
        }
    }
}

/// The pair `(γ_n, c_n)` materialized up to a finite horizon `N`.
#[derive(Debug, Clone)]
pub struct Schedule {
    gamma: Sequence,
    c: Sequence,
    horizon: usize,
    gamma_values: Vec<f64>,
    c_values: Vec<f64>,
    /// `Σ_{k≤n} γ_k`
    gamma_prefix: Vec<f64>,
    /// `Σ_{k≤n} c_k²`
    c2_prefix: Vec<f64>,
    /// `Σ_{n<k≤N} c_k²`, i.e. the truncated tail strictly after `n`.
    c2_suffix: Vec<f64>,
}

impl Schedule {
    pub fn new(gamma: Sequence, c: Sequence, horizon: usize) -> Result<Self, ScheduleError> {
        if horizon == 0 {
            return Err(ScheduleError::Invalid("horizon must be positive".into()));
        }
        gamma.validate("gamma", horizon)?;
        c.validate("c", horizon)?;

        let gamma_values: Vec<f64> = (0..=horizon).map(|n| gamma.value(n)).collect();
        let c_values: Vec<f64> = (0..=horizon).map(|n| c.value(n)).collect();

        let mut gamma_prefix = Vec::with_capacity(horizon + 1);
        let mut acc = 0.0;
        for g in &gamma_values {
            acc += g;
            gamma_prefix.push(acc);
        }
        let mut c2_prefix = Vec::with_capacity(horizon + 1);
        let mut acc = 0.0;
        for c in &c_values {
            acc += c * c;
            c2_prefix.push(acc);
        }
        // backward accumulation keeps small tails accurate
        let mut c2_suffix = vec![0.0; horizon + 1];
        let mut acc = 0.0;
        for n in (0..horizon).rev() {
            acc += c_values[n + 1] * c_values[n + 1];
            c2_suffix[n] = acc;
        }

        Ok(Schedule {
            gamma,
            c,
            horizon,
            gamma_values,
            c_values,
            gamma_prefix,
            c2_prefix,
            c2_suffix,
        })
    }

    /// `γ_n = c_n = 1/n`.
    pub fn harmonic(horizon: usize) -> Result<Self, ScheduleError> {
        Schedule::new(Sequence::harmonic(), Sequence::harmonic(), horizon)
    }

    /// `γ_n = n^{-gamma_exp}`, `c_n = n^{-c_exp}`.
    pub fn power(gamma_exp: f64, c_exp: f64, horizon: usize) -> Result<Self, ScheduleError> {
        Schedule::new(Sequence::power(gamma_exp), Sequence::power(c_exp), horizon)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma_sequence(&self) -> &Sequence {
        &self.gamma
    }

    pub fn c_sequence(&self) -> &Sequence {
        &self.c
    }

    /// `γ_n`; zero beyond the horizon.
    #[inline]
    pub fn gamma(&self, n: usize) -> f64 {
        self.gamma_values.get(n).copied().unwrap_or(0.0)
    }

    /// `c_n`; zero beyond the horizon.
    #[inline]
    pub fn c(&self, n: usize) -> f64 {
        self.c_values.get(n).copied().unwrap_or(0.0)
    }

    /// `Σ_{k≤n} c_k²` for `n ≤ N`.
    pub fn c2_prefix(&self, n: usize) -> Option<f64> {
        self.c2_prefix.get(n).copied()
    }

    /// Squared tail beyond the horizon, `Σ_{n>N} c_n²`, when the `c` sequence
    /// has a closed form.
    fn c2_beyond(&self, k: usize) -> Result<Option<f64>, ScheduleError> {
        match &self.c {
            Sequence::Zero => Ok(Some(0.0)),
            Sequence::Constant { value } => {
                if *value == 0.0 {
                    Ok(Some(0.0))
                } else {
                    Err(ScheduleError::Divergent(format!("constant c_n = {value}")))
                }
            }
            Sequence::Power { exponent, scale } => {
                if *scale == 0.0 {
                    Ok(Some(0.0))
                } else if *exponent <= 0.5 {
                    Err(ScheduleError::Divergent(format!(
                        "c_n = n^-{exponent} (exponent must exceed 1/2)"
                    )))
                } else {
                    Ok(Some(scale * scale * power_tail(2.0 * exponent, k)))
                }
            }
            Sequence::Geometric { ratio, scale } => {
                if *scale == 0.0 {
                    Ok(Some(0.0))
                } else if *ratio >= 1.0 {
                    Err(ScheduleError::Divergent(format!("geometric ratio {ratio}")))
                } else {
                    let r2 = ratio * ratio;
                    Ok(Some(scale * scale * r2.powi(k as i32 + 1) / (1.0 - r2)))
                }
            }
            Sequence::Custom { .. } => Ok(None),
        }
    }

    fn floor_index(t: f64) -> Result<usize, ScheduleError> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(ScheduleError::InvalidArgument(format!(
                "time {t} must be finite and non-negative"
            )));
        }
        Ok(t.floor() as usize)
    }

    /// `α(t) = sqrt(Σ_{n>t} c_n²)`.
    ///
    /// Closed-form `c` sequences are completed analytically beyond the horizon.
    /// Custom sequences are truncated at the horizon; see
    /// [`Schedule::tail_l2_with_bound`] for the accompanying error proxy.
    pub fn tail_l2(&self, t: f64) -> Result<f64, ScheduleError> {
        self.tail_l2_with_bound(t).map(|(a, _)| a)
    }

    /// `α(t)` together with a truncation-error proxy: zero for closed forms,
    /// `c_N² · N` for custom sequences.
    pub fn tail_l2_with_bound(&self, t: f64) -> Result<(f64, f64), ScheduleError> {
        let k = Self::floor_index(t)?;
        if matches!(self.c, Sequence::Geometric { .. }) {
            // exact at every index; avoids the suffix round-off entirely
            let a2 = self.c2_beyond(k)?.unwrap_or(0.0);
            return Ok((a2.sqrt(), 0.0));
        }
        match self.c2_beyond(self.horizon.max(k))? {
            Some(beyond) => {
                let a2 = if k <= self.horizon {
                    self.c2_suffix[k] + beyond
                } else {
                    beyond
                };
                Ok((a2.sqrt(), 0.0))
            }
            None => {
                if k > self.horizon {
                    return Err(ScheduleError::InsufficientHorizon {
                        requested: t,
                        horizon: self.horizon,
                    });
                }
                let cn = self.c_values[self.horizon];
                Ok((self.c2_suffix[k].sqrt(), cn * cn * self.horizon as f64))
            }
        }
    }

    /// `m(t) = Σ_{k≤⌊t⌋} γ_k`.
    pub fn partial_drift_sum(&self, t: f64) -> Result<f64, ScheduleError> {
        let k = Self::floor_index(t)?;
        self.gamma_prefix
            .get(k)
            .copied()
            .ok_or(ScheduleError::InsufficientHorizon {
                requested: t,
                horizon: self.horizon,
            })
    }

    /// Drift clock of the interpolated process, `Σ_{1≤k≤n} γ_k`, so that the
    /// clock starts at 0 at index 0.
    #[inline]
    pub fn drift_clock(&self, n: usize) -> Option<f64> {
        self.gamma_prefix.get(n).map(|p| p - self.gamma_values[0])
    }

    /// Checks that every window of `window` consecutive indices in `1..=N`
    /// contains a nonzero `c_n`.
    pub fn check_noise_windows(&self, window: usize) -> Result<(), ScheduleError> {
        if window == 0 {
            return Err(ScheduleError::InvalidArgument("window must be positive".into()));
        }
        let mut last_nonzero = 0usize;
        for n in 1..=self.horizon {
            if self.c_values[n] != 0.0 {
                last_nonzero = n;
            } else if n - last_nonzero >= window {
                return Err(ScheduleError::Degenerate(format!(
                    "c_n vanishes on the {window} indices ending at {n}"
                )));
            }
        }
        Ok(())
    }

    /// Rate constants over an index window; see [`RateConstants`].
    pub fn rate_constants(&self, window: (usize, usize)) -> Result<RateConstants, ScheduleError> {
        rate_constants(self, window)
    }
}

/// `a / b` with `0/0 = 1` and `a/0 = ±∞` (sign of `a`).
pub fn convention_ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else if a > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        a / b
    }
}

/// Finite-window estimates of the limits relating noise decay to the drift
/// clock, `λ = limsup log α(t) / m(t)` and the matching liminf.
///
/// `lambda_hat` and `liminf_proxy` are the max and min, over consecutive
/// points of a geometric grid in the window, of the increment ratio
/// `Δ log α / Δ m`. When `m → ∞` these increment ratios bracket the limit
/// points of `log α / m`, and unlike the raw ratio they are not biased by the
/// additive constants of `log α` and `m` (for `γ_n = c_n = 1/n` the raw ratio
/// is still ≈ −0.46 at `t = 10³` while the increment ratio is −0.500).
/// The raw-ratio extremes are kept in `ratio_max` / `ratio_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub window: (usize, usize),
    pub grid: Vec<usize>,
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub log_alpha: Vec<f64>,
    pub m: Vec<f64>,
    #[serde(with = "crate::serde_ext::f64")]
    pub lambda_hat: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub liminf_proxy: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub ratio_max: f64,
    #[serde(with = "crate::serde_ext::f64")]
    pub ratio_min: f64,
}

impl RateConstants {
    /// Interpolated `α(t)` on the sampled grid (exact at grid points).
    pub fn alpha_at(&self, t: usize) -> Option<f64> {
        self.grid
            .iter()
            .position(|&g| g == t)
            .map(|i| self.log_alpha[i].exp())
    }
}

const GRID_POINTS_PER_DECADE: f64 = 40.0;

fn window_grid(lo: usize, hi: usize) -> Vec<usize> {
    let mut grid = vec![lo];
    let start = lo.max(1) as f64;
    let decades = (hi as f64 / start).log10();
    let count = (decades * GRID_POINTS_PER_DECADE).ceil().max(1.0) as usize;
    for i in 1..=count {
        let t = (start * 10f64.powf(decades * i as f64 / count as f64)).round() as usize;
        let t = t.min(hi);
        if t > *grid.last().unwrap() {
            grid.push(t);
        }
    }
    if *grid.last().unwrap() != hi {
        grid.push(hi);
    }
    grid
}

/// Samples `log α(t)` and `m(t)` on a geometric grid over `window` and
/// computes the limsup/liminf proxies.
pub fn rate_constants(
    schedule: &Schedule,
    window: (usize, usize),
) -> Result<RateConstants, ScheduleError> {
    let (lo, hi) = window;
    if lo >= hi {
        return Err(ScheduleError::InvalidArgument(format!(
            "window [{lo}, {hi}] must contain at least two indices"
        )));
    }
    if hi > schedule.horizon() {
        return Err(ScheduleError::InsufficientHorizon {
            requested: hi as f64,
            horizon: schedule.horizon(),
        });
    }
    let grid = window_grid(lo, hi);
    let mut log_alpha = Vec::with_capacity(grid.len());
    let mut m = Vec::with_capacity(grid.len());
    for &t in &grid {
        let a = schedule.tail_l2(t as f64)?;
        if !(a > 0.0) {
            return Err(ScheduleError::Degenerate(format!("α({t}) = {a} is not positive")));
        }
        log_alpha.push(a.ln());
        m.push(schedule.partial_drift_sum(t as f64)?);
    }

    let ratios: Vec<f64> = log_alpha
        .iter()
        .zip(&m)
        .map(|(la, mm)| convention_ratio(*la, *mm))
        .collect();
    let slopes: Vec<f64> = (1..grid.len())
        .map(|i| convention_ratio(log_alpha[i] - log_alpha[i - 1], m[i] - m[i - 1]))
        .collect();

    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);

    Ok(RateConstants {
        window,
        lambda_hat: max(&slopes),
        liminf_proxy: min(&slopes),
        ratio_max: max(&ratios),
        ratio_min: min(&ratios),
        grid,
        log_alpha,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn geometric_tail_from_zero() {
        let s = Schedule::new(Sequence::Zero, Sequence::geometric(0.5), 50).unwrap();
        assert_relative_eq!(s.tail_l2(0.0).unwrap(), (1.0f64 / 3.0).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn geometric_tail_matches_formula_everywhere() {
        let r: f64 = 0.7;
        let s = Schedule::new(Sequence::Zero, Sequence::geometric(r), 40).unwrap();
        for k in [0usize, 3, 17, 39, 40, 41, 200] {
            let exact = (r.powi(2 * (k as i32 + 1)) / (1.0 - r * r)).sqrt();
            assert_relative_eq!(s.tail_l2(k as f64).unwrap(), exact, max_relative = 1e-14);
        }
    }

    #[test]
    fn real_times_use_floor() {
        let s = Schedule::harmonic(100).unwrap();
        assert_eq!(s.tail_l2(3.7).unwrap(), s.tail_l2(3.0).unwrap());
        assert_eq!(s.partial_drift_sum(4.99).unwrap(), s.partial_drift_sum(4.0).unwrap());
    }

    #[test]
    fn partial_sums_small() {
        let s = Schedule::harmonic(10).unwrap();
        assert_relative_eq!(s.partial_drift_sum(4.0).unwrap(), 25.0 / 12.0, max_relative = 1e-15);
        let z = Schedule::new(Sequence::Zero, Sequence::harmonic(), 10).unwrap();
        assert_eq!(z.partial_drift_sum(7.0).unwrap(), 0.0);
    }

    #[test]
    fn partial_sum_beyond_horizon_errors() {
        let s = Schedule::harmonic(10).unwrap();
        assert!(matches!(
            s.partial_drift_sum(11.0),
            Err(ScheduleError::InsufficientHorizon { .. })
        ));
        assert!(s.partial_drift_sum(-1.0).is_err());
    }

    #[test]
    fn divergent_tails() {
        let s = Schedule::power(1.0, 0.5, 10).unwrap();
        assert!(matches!(s.tail_l2(1.0), Err(ScheduleError::Divergent(_))));
        let s = Schedule::new(Sequence::Zero, Sequence::constant(0.1), 10).unwrap();
        assert!(matches!(s.tail_l2(1.0), Err(ScheduleError::Divergent(_))));
    }

    #[test]
    fn custom_truncates_and_reports_bound() {
        let values: Vec<f64> = (0..=20).map(|n| if n == 0 { 0.0 } else { 1.0 / n as f64 }).collect();
        let s = Schedule::new(
            Sequence::Zero,
            Sequence::Custom { values: values.clone() },
            20,
        )
        .unwrap();
        let (a, bound) = s.tail_l2_with_bound(10.0).unwrap();
        let direct: f64 = (11..=20).map(|n| 1.0 / (n * n) as f64).sum();
        assert_relative_eq!(a, direct.sqrt(), max_relative = 1e-14);
        assert_relative_eq!(bound, 20.0 / 400.0, max_relative = 1e-14);
        assert!(matches!(
            s.tail_l2(21.0),
            Err(ScheduleError::InsufficientHorizon { .. })
        ));
    }

    #[test]
    fn custom_too_short_rejected() {
        let r = Schedule::new(Sequence::Zero, Sequence::Custom { values: vec![1.0; 5] }, 10);
        assert!(matches!(r, Err(ScheduleError::Invalid(_))));
    }

    #[test]
    fn negative_values_rejected() {
        let r = Schedule::new(Sequence::constant(-1.0), Sequence::harmonic(), 10);
        assert!(r.is_err());
    }

    #[test]
    fn power_tail_beyond_horizon_is_continuous() {
        let s = Schedule::power(1.0, 0.75, 1000).unwrap();
        // crossing the horizon must not jump
        let before = s.tail_l2(1000.0).unwrap();
        let after = s.tail_l2(1001.0).unwrap();
        let c = 1001f64.powf(-0.75);
        assert_relative_eq!(before * before - after * after, c * c, max_relative = 1e-9);
    }

    #[test]
    fn convention_cases() {
        assert_eq!(convention_ratio(0.0, 0.0), 1.0);
        assert_eq!(convention_ratio(-0.3, 0.0), f64::NEG_INFINITY);
        assert_eq!(convention_ratio(0.3, 0.0), f64::INFINITY);
        // log α / m with α = 1, m = 0
        assert_eq!(convention_ratio(1f64.ln(), 0.0), 1.0);
        assert_eq!(convention_ratio(0.5f64.ln(), 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn noise_windows() {
        let s = Schedule::harmonic(100).unwrap();
        assert!(s.check_noise_windows(1).is_ok());
        let mut v = vec![1.0; 101];
        for x in v.iter_mut().skip(40).take(10) {
            *x = 0.0;
        }
        let s = Schedule::new(Sequence::Zero, Sequence::Custom { values: v }, 100).unwrap();
        assert!(s.check_noise_windows(11).is_ok());
        assert!(s.check_noise_windows(10).is_err());
    }

    #[test]
    fn rate_window_validation() {
        let s = Schedule::harmonic(100).unwrap();
        assert!(s.rate_constants((50, 50)).is_err());
        assert!(s.rate_constants((50, 101)).is_err());
        let zero = Schedule::new(Sequence::harmonic(), Sequence::Custom { values: vec![0.0; 101] }, 100)
            .unwrap();
        assert!(matches!(
            zero.rate_constants((10, 50)),
            Err(ScheduleError::Degenerate(_))
        ));
    }

    #[test]
    fn spec_round_trip() {
        let json = r#"{ "kind": "power", "gamma_exp": 1.0, "c_exp": 1.0, "horizon": 100000 }"#;
        let spec: ScheduleSpec = serde_json::from_str(json).unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s.horizon(), 100_000);
        assert_eq!(s.gamma(4), 0.25);
    }
}
