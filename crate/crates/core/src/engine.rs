//! Execution of the recursion and reproducible Monte Carlo ensembles.
//!
//! Every step computes the three parts `γ_{n+1} G_n`, `c_{n+1} ε_{n+1}` and
//! `c_{n+1} r_{n+1}` once, forms the increment `Δ = (drift + martingale) +
//! remainder`, and sets `X_{n+1} = X_n + Δ`. The same expression is used by
//! [`recompose`], so the recursion identity holds bitwise on stored records.

use std::io::{self, Write};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Increment, Model, ModelError, Process, StreamRng};
use crate::sequences::Schedule;

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;
pub const DEFAULT_RADIUS: f64 = 1e-2;
pub const QUANTILE_LEVELS: [f64; 9] = [0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{n_steps} steps exceed the schedule horizon {horizon}")]
    Horizon { n_steps: usize, horizon: usize },
    #[error("numerical blow-up at step {n}: state {x:?}")]
    BlowUp {
        n: usize,
        x: Vec<f64>,
        prefix: Option<Box<Trajectory>>,
    },
    #[error("step {n} is not covered by full records (stride {stride})")]
    InsufficientRecords { n: usize, stride: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Record stride used when none is requested: every step up to `10⁵` steps,
/// every 16th beyond.
pub fn default_stride(n_steps: usize) -> usize {
    if n_steps <= 100_000 {
        1
    } else {
        16
    }
}

/// `x + ((γ g + c ε) + c r)`, the canonical evaluation order of one step.
#[inline]
pub fn recompose(x: f64, gamma: f64, g: f64, c: f64, eps: f64, rem: f64) -> f64 {
    x + ((gamma * g + c * eps) + c * rem)
}

/// One step in full.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub eps: Vec<f64>,
    pub rem: Vec<f64>,
}

/// What an observer sees at each step `n → n + 1`.
#[derive(Debug)]
pub struct StepView<'a> {
    pub n: usize,
    pub gamma: f64,
    pub c: f64,
    pub x: &'a [f64],
    pub x_next: &'a [f64],
    pub inc: &'a Increment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub n_steps: usize,
    pub stride: Option<usize>,
    pub blowup_bound: f64,
}

impl RunOptions {
    pub fn new(n_steps: usize) -> Self {
        RunOptions { n_steps, stride: None, blowup_bound: DEFAULT_BLOWUP_BOUND }
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or_else(|| default_stride(self.n_steps)).max(1)
    }
}

/// Advances `x` by one step of the recursion, writing `X_{n+1}` to `x_next`.
pub fn step_into(
    process: &mut dyn Process,
    x: &[f64],
    n: usize,
    schedule: &Schedule,
    rng: &mut StreamRng,
    inc: &mut Increment,
    x_next: &mut [f64],
    blowup_bound: f64,
) -> Result<(), EngineError> {
    if n + 1 > schedule.horizon() {
        return Err(EngineError::Horizon { n_steps: n + 1, horizon: schedule.horizon() });
    }
    process.increment(x, n, schedule, rng, inc)?;
    let gamma = schedule.gamma(n + 1);
    let c = schedule.c(n + 1);
    let mut norm2 = 0.0;
    for i in 0..x.len() {
        let v = recompose(x[i], gamma, inc.g[i], c, inc.eps[i], inc.rem[i]);
        x_next[i] = v;
        norm2 += v * v;
    }
    if !norm2.is_finite() || norm2.sqrt() > blowup_bound {
        return Err(EngineError::BlowUp { n: n + 1, x: x_next.to_vec(), prefix: None });
    }
    Ok(())
}

/// One step with freshly allocated outputs.
pub fn step(
    process: &mut dyn Process,
    x: &[f64],
    n: usize,
    schedule: &Schedule,
    rng: &mut StreamRng,
) -> Result<(StepRecord, Vec<f64>), EngineError> {
    let d = x.len();
    let mut inc = Increment::zeros(d);
    let mut next = vec![0.0; d];
    step_into(process, x, n, schedule, rng, &mut inc, &mut next, f64::INFINITY)?;
    Ok((
        StepRecord { n, x: x.to_vec(), g: inc.g, eps: inc.eps, rem: inc.rem },
        next,
    ))
}

/// Runs the recursion, calling `observer` after every step, and returns the
/// final state. Nothing is stored.
pub fn run_observed(
    model: &dyn Model,
    schedule: &Schedule,
    x0: &[f64],
    opts: &RunOptions,
    seed: u64,
    observer: &mut dyn FnMut(&StepView),
) -> Result<Vec<f64>, EngineError> {
    if opts.n_steps > schedule.horizon() {
        return Err(EngineError::Horizon { n_steps: opts.n_steps, horizon: schedule.horizon() });
    }
    let d = model.dim();
    if x0.len() != d {
        return Err(ModelError::DimensionMismatch { expected: d, got: x0.len() }.into());
    }
    let mut process = model.process(x0)?;
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut inc = Increment::zeros(d);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    for n in 0..opts.n_steps {
        step_into(process.as_mut(), &x, n, schedule, &mut rng, &mut inc, &mut next, opts.blowup_bound)?;
        observer(&StepView {
            n,
            gamma: schedule.gamma(n + 1),
            c: schedule.c(n + 1),
            x: &x,
            x_next: &next,
            inc: &inc,
        });
        std::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

/// A realized run. States are kept at every index; drift, noise and
/// remainder at indices that are multiples of `stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub model_id: String,
    pub seed: u64,
    pub dim: usize,
    pub stride: usize,
    pub schedule_horizon: usize,
    /// `(N + 1) × d`, row-major.
    pub states: Vec<f64>,
    pub record_n: Vec<usize>,
    pub gamma: Vec<f64>,
    pub c: Vec<f64>,
    pub g: Vec<f64>,
    pub eps: Vec<f64>,
    pub rem: Vec<f64>,
}

impl Trajectory {
    fn new(model_id: String, seed: u64, dim: usize, stride: usize, horizon: usize, x0: &[f64], n_steps: usize) -> Self {
        let mut states = Vec::with_capacity((n_steps + 1) * dim);
        states.extend_from_slice(x0);
        let cap = n_steps / stride + 1;
        Trajectory {
            model_id,
            seed,
            dim,
            stride,
            schedule_horizon: horizon,
            states,
            record_n: Vec::with_capacity(cap),
            gamma: Vec::with_capacity(cap),
            c: Vec::with_capacity(cap),
            g: Vec::with_capacity(cap * dim),
            eps: Vec::with_capacity(cap * dim),
            rem: Vec::with_capacity(cap * dim),
        }
    }

    fn push(&mut self, v: &StepView) {
        self.states.extend_from_slice(v.x_next);
        if v.n.is_multiple_of(self.stride) {
            self.record_n.push(v.n);
            self.gamma.push(v.gamma);
            self.c.push(v.c);
            self.g.extend_from_slice(&v.inc.g);
            self.eps.extend_from_slice(&v.inc.eps);
            self.rem.extend_from_slice(&v.inc.rem);
        }
    }

    /// Number of steps `N`.
    pub fn n_steps(&self) -> usize {
        self.states.len() / self.dim - 1
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.dim..(n + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.n_steps())
    }

    pub fn n_records(&self) -> usize {
        self.record_n.len()
    }

    /// Index into the record arrays for step `n`, if retained.
    pub fn record_index(&self, n: usize) -> Option<usize> {
        if !n.is_multiple_of(self.stride) {
            return None;
        }
        let i = n / self.stride;
        (i < self.record_n.len() && self.record_n[i] == n).then_some(i)
    }

    pub fn g_at(&self, i: usize) -> &[f64] {
        &self.g[i * self.dim..(i + 1) * self.dim]
    }

    pub fn eps_at(&self, i: usize) -> &[f64] {
        &self.eps[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rem_at(&self, i: usize) -> &[f64] {
        &self.rem[i * self.dim..(i + 1) * self.dim]
    }

    pub fn record(&self, i: usize) -> StepRecord {
        let n = self.record_n[i];
        StepRecord {
            n,
            x: self.state(n).to_vec(),
            g: self.g_at(i).to_vec(),
            eps: self.eps_at(i).to_vec(),
            rem: self.rem_at(i).to_vec(),
        }
    }

    /// Largest `|X_{n+1} − recompose(X_n, record)|` over retained records;
    /// zero by construction.
    pub fn reconstruction_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_records() {
            let n = self.record_n[i];
            let (x, next) = (self.state(n), self.state(n + 1));
            for k in 0..self.dim {
                let v = recompose(x[k], self.gamma[i], self.g_at(i)[k], self.c[i], self.eps_at(i)[k], self.rem_at(i)[k]);
                worst = worst.max((v - next[k]).abs());
            }
        }
        worst
    }

    /// CSV with header `n,x_0..,g_0..,eps_0..,rem_0..`; record columns are
    /// empty at steps without a record. Floats carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dim;
        let mut header = vec!["n".to_string()];
        for prefix in ["x", "g", "eps", "rem"] {
            header.extend((0..d).map(|i| format!("{prefix}_{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for n in 0..=self.n_steps() {
            line.clear();
            line.push_str(&n.to_string());
            for v in self.state(n) {
                line.push_str(&format!(",{}", fmt_float(*v)));
            }
            match (n < self.n_steps()).then(|| self.record_index(n)).flatten() {
                Some(i) => {
                    for part in [self.g_at(i), self.eps_at(i), self.rem_at(i)] {
                        for v in part {
                            line.push_str(&format!(",{}", fmt_float(*v)));
                        }
                    }
                }
                None => line.push_str(&",".repeat(3 * d)),
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Scientific notation with 17 significant digits; round-trips exactly.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Runs with default options.
pub fn run(
    model: &dyn Model,
    schedule: &Schedule,
    x0: &[f64],
    n_steps: usize,
    seed: u64,
) -> Result<Trajectory, EngineError> {
    run_with(model, schedule, x0, &RunOptions::new(n_steps), seed)
}

/// Runs and stores the trajectory. On blow-up the error carries the prefix.
pub fn run_with(
    model: &dyn Model,
    schedule: &Schedule,
    x0: &[f64],
    opts: &RunOptions,
    seed: u64,
) -> Result<Trajectory, EngineError> {
    let mut traj = Trajectory::new(
        model.id(),
        seed,
        model.dim(),
        opts.stride(),
        schedule.horizon(),
        x0,
        opts.n_steps,
    );
    let out = run_observed(model, schedule, x0, opts, seed, &mut |v| traj.push(v));
    match out {
        Ok(_) => Ok(traj),
        Err(EngineError::BlowUp { n, x, .. }) => Err(EngineError::BlowUp { n, x, prefix: Some(Box::new(traj)) }),
        Err(e) => Err(e),
    }
}

/// Seed of run `index` under `master`: two rounds of the splitmix64 finalizer.
pub fn run_seed(master: u64, index: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, EngineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))
}

/// Evaluates `f(run_index, run_seed)` for every run on `workers` threads and
/// returns the results in run order.
pub fn ensemble_map<T, F>(n_runs: usize, master_seed: u64, workers: usize, f: F) -> Result<Vec<T>, EngineError>
where
    T: Send,
    F: Fn(usize, u64) -> T + Sync,
{
    let pool = pool(workers)?;
    Ok(pool.install(|| {
        (0..n_runs)
            .into_par_iter()
            .map(|i| f(i, run_seed(master_seed, i)))
            .collect()
    }))
}

/// Like [`ensemble_map`], but folds results into `acc` in run order, chunk by
/// chunk, so at most `chunk` results are alive at once.
pub fn ensemble_fold<T, A, F, G>(
    n_runs: usize,
    master_seed: u64,
    workers: usize,
    chunk: usize,
    f: F,
    mut acc: A,
    mut fold: G,
) -> Result<A, EngineError>
where
    T: Send,
    F: Fn(usize, u64) -> T + Sync,
    G: FnMut(A, usize, T) -> A,
{
    let pool = pool(workers)?;
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n_runs {
        let end = (start + chunk).min(n_runs);
        let results: Vec<T> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|i| f(i, run_seed(master_seed, i)))
                .collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            acc = fold(acc, start + k, r);
        }
        start = end;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOptions {
    pub n_steps: usize,
    pub n_runs: usize,
    pub master_seed: u64,
    pub workers: usize,
    pub radius: f64,
    pub blowup_bound: f64,
    /// Trap point; defaults to the model's equilibrium, else `x0`.
    pub trap: Option<Vec<f64>>,
}

impl EnsembleOptions {
    pub fn new(n_steps: usize, n_runs: usize, master_seed: u64) -> Self {
        EnsembleOptions {
            n_steps,
            n_runs,
            master_seed,
            workers: 1,
            radius: DEFAULT_RADIUS,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            trap: None,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { n_steps: self.n_steps, stride: None, blowup_bound: self.blowup_bound }
    }
}

/// Checkpoint indices `N/4, N/2, 3N/4, N`.
pub fn checkpoints(n_steps: usize) -> Vec<usize> {
    vec![n_steps / 4, n_steps / 2, 3 * n_steps / 4, n_steps]
}

/// First index of the last quarter of a run of `n_steps` steps.
pub fn tail_start(n_steps: usize) -> usize {
    n_steps - n_steps / 4
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
struct RunStats {
    blow_up: Option<usize>,
    checkpoint_states: Vec<Vec<f64>>,
    tail_sup: f64,
    terminal: Vec<f64>,
}

fn run_stats(
    model: &dyn Model,
    schedule: &Schedule,
    x0: &[f64],
    opts: &EnsembleOptions,
    trap: &[f64],
    seed: u64,
) -> Result<RunStats, EngineError> {
    let cps = checkpoints(opts.n_steps);
    let tail = tail_start(opts.n_steps);
    let mut states = Vec::with_capacity(cps.len());
    let mut sup = if tail == 0 { dist(x0, trap) } else { 0.0f64 };
    for &c in &cps {
        if c == 0 {
            states.push(x0.to_vec());
        }
    }
    let mut observer = |v: &StepView| {
        let m = v.n + 1;
        if m >= tail {
            sup = sup.max(dist(v.x_next, trap));
        }
        for &c in &cps {
            if c == m {
                states.push(v.x_next.to_vec());
            }
        }
    };
    match run_observed(model, schedule, x0, &opts.run_options(), seed, &mut observer) {
        Ok(terminal) => Ok(RunStats { blow_up: None, checkpoint_states: states, tail_sup: sup, terminal }),
        Err(EngineError::BlowUp { n, .. }) => Ok(RunStats {
            blow_up: Some(n),
            checkpoint_states: Vec::new(),
            tail_sup: f64::INFINITY,
            terminal: Vec::new(),
        }),
        Err(e) => Err(e),
    }
}

/// Ensemble statistics. Runs that blew up are flagged and excluded from
/// fractions and quantiles; their state slots are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub model_id: String,
    pub n_runs: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub master_seed: u64,
    pub trap_point: Vec<f64>,
    pub radius: f64,
    pub seeds: Vec<u64>,
    pub blowup_count: usize,
    /// `(run index, step)` of every blow-up.
    pub blown_up: Vec<(usize, usize)>,
    pub checkpoints: Vec<usize>,
    /// Near-trap fraction at each checkpoint, at `radius`.
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub near_trap_fraction: Vec<f64>,
    /// Fraction of runs whose sup of `‖X_n − x*‖` over the last quarter is
    /// below `radius`.
    #[serde(with = "crate::serde_ext::f64")]
    pub tail_near_trap_fraction: f64,
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub tail_sup: Vec<f64>,
    pub quantile_levels: Vec<f64>,
    /// Quantiles of `‖X_N − x*‖`.
    #[serde(with = "crate::serde_ext::f64_vec")]
    pub terminal_distance_quantiles: Vec<f64>,
    /// `[checkpoint][run]`.
    pub checkpoint_states: Vec<Vec<Vec<f64>>>,
    pub terminal_states: Vec<Vec<f64>>,
}

impl EnsembleSummary {
    pub fn valid_runs(&self) -> usize {
        self.n_runs - self.blowup_count
    }

    fn fraction(&self, hits: usize) -> f64 {
        match self.valid_runs() {
            0 => f64::NAN,
            v => hits as f64 / v as f64,
        }
    }

    /// Fraction of valid runs with `‖X_t − x*‖ < radius` at checkpoint `k`.
    pub fn near_trap_fraction_at(&self, k: usize, radius: f64) -> f64 {
        let hits = self.checkpoint_states[k]
            .iter()
            .filter(|s| !s.is_empty() && dist(s, &self.trap_point) < radius)
            .count();
        self.fraction(hits)
    }

    /// Fraction of valid runs staying within `radius` over the last quarter.
    pub fn tail_near_trap_fraction_at(&self, radius: f64) -> f64 {
        let hits = self.tail_sup.iter().filter(|s| **s < radius).count();
        self.fraction(hits)
    }

    pub fn terminal_distances(&self) -> Vec<f64> {
        self.terminal_states
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| dist(s, &self.trap_point))
            .collect()
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], level: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = level.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    if w == 0.0 || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Runs `n_runs` independent trajectories and summarizes them. The result
/// does not depend on `workers`.
pub fn monte_carlo(
    model: &dyn Model,
    schedule: &Schedule,
    x0: &[f64],
    opts: &EnsembleOptions,
) -> Result<EnsembleSummary, EngineError> {
    if opts.n_runs == 0 {
        return Err(EngineError::InvalidArgument("n_runs must be at least 1".into()));
    }
    if opts.n_steps > schedule.horizon() {
        return Err(EngineError::Horizon { n_steps: opts.n_steps, horizon: schedule.horizon() });
    }
    let trap: Vec<f64> = opts
        .trap
        .clone()
        .or_else(|| model.equilibrium().map(|e| e.x_star.as_slice().to_vec()))
        .unwrap_or_else(|| x0.to_vec());
    if trap.len() != model.dim() {
        return Err(ModelError::DimensionMismatch { expected: model.dim(), got: trap.len() }.into());
    }
    let stats = ensemble_map(opts.n_runs, opts.master_seed, opts.workers, |_, seed| {
        run_stats(model, schedule, x0, opts, &trap, seed)
    })?;
    let stats: Vec<RunStats> = stats.into_iter().collect::<Result<_, _>>()?;

    let cps = checkpoints(opts.n_steps);
    let mut checkpoint_states = vec![Vec::with_capacity(opts.n_runs); cps.len()];
    let mut blown_up = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        match s.blow_up {
            Some(n) => {
                blown_up.push((i, n));
                for cs in checkpoint_states.iter_mut() {
                    cs.push(Vec::new());
                }
            }
            None => {
                for (k, cs) in checkpoint_states.iter_mut().enumerate() {
                    cs.push(s.checkpoint_states[k].clone());
                }
            }
        }
    }
    let mut summary = EnsembleSummary {
        model_id: model.id(),
        n_runs: opts.n_runs,
        n_steps: opts.n_steps,
        dim: model.dim(),
        master_seed: opts.master_seed,
        trap_point: trap,
        radius: opts.radius,
        seeds: (0..opts.n_runs).map(|i| run_seed(opts.master_seed, i)).collect(),
        blowup_count: blown_up.len(),
        blown_up,
        checkpoints: cps,
        near_trap_fraction: Vec::new(),
        tail_near_trap_fraction: 0.0,
        tail_sup: stats.iter().map(|s| s.tail_sup).collect(),
        quantile_levels: QUANTILE_LEVELS.to_vec(),
        terminal_distance_quantiles: Vec::new(),
        checkpoint_states,
        terminal_states: stats.into_iter().map(|s| s.terminal).collect(),
    };
    summary.near_trap_fraction = (0..summary.checkpoints.len())
        .map(|k| summary.near_trap_fraction_at(k, opts.radius))
        .collect();
    summary.tail_near_trap_fraction = summary.tail_near_trap_fraction_at(opts.radius);
    let mut d = summary.terminal_distances();
    d.sort_by(f64::total_cmp);
    summary.terminal_distance_quantiles = QUANTILE_LEVELS.iter().map(|&l| quantile(&d, l)).collect();
    Ok(summary)
}

/// Per-step parts of the increment over a range of fully recorded steps.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementDecomposition {
    pub dim: usize,
    pub n: Vec<usize>,
    /// `γ_{n+1} G_n`
    pub drift: Vec<f64>,
    /// `c_{n+1} ε_{n+1}`
    pub martingale: Vec<f64>,
    /// `c_{n+1} r_{n+1}`
    pub remainder: Vec<f64>,
    /// `(drift + martingale) + remainder`, the stored step `X_{n+1} − X_n`.
    pub increment: Vec<f64>,
    /// `M_{n+1} = Σ_{k≤n+1} c_k ε_k`, accumulated from the start of the range.
    pub cumulative_martingale: Vec<f64>,
}

impl IncrementDecomposition {
    pub fn part(v: &[f64], d: usize, i: usize) -> &[f64] {
        &v[i * d..(i + 1) * d]
    }
}

/// Splits each step in `range` (defaults to the whole run) into its parts.
/// Requires a record at every step of the range.
pub fn empirical_increment_decomposition(
    traj: &Trajectory,
    range: Option<(usize, usize)>,
) -> Result<IncrementDecomposition, EngineError> {
    let (lo, hi) = range.unwrap_or((0, traj.n_steps()));
    if lo > hi || hi > traj.n_steps() {
        return Err(EngineError::InvalidArgument(format!("range [{lo}, {hi}) outside the run")));
    }
    let d = traj.dim;
    let mut out = IncrementDecomposition {
        dim: d,
        n: Vec::with_capacity(hi - lo),
        drift: Vec::with_capacity((hi - lo) * d),
        martingale: Vec::with_capacity((hi - lo) * d),
        remainder: Vec::with_capacity((hi - lo) * d),
        increment: Vec::with_capacity((hi - lo) * d),
        cumulative_martingale: Vec::with_capacity((hi - lo) * d),
    };
    let mut m = vec![0.0; d];
    for n in lo..hi {
        let i = traj
            .record_index(n)
            .ok_or(EngineError::InsufficientRecords { n, stride: traj.stride })?;
        let (gamma, c) = (traj.gamma[i], traj.c[i]);
        out.n.push(n);
        for k in 0..d {
            let drift = gamma * traj.g_at(i)[k];
            let mart = c * traj.eps_at(i)[k];
            let rem = c * traj.rem_at(i)[k];
            out.drift.push(drift);
            out.martingale.push(mart);
            out.remainder.push(rem);
            out.increment.push((drift + mart) + rem);
            m[k] += mart;
            out.cumulative_martingale.push(m[k]);
        }
    }
    Ok(out)
}
