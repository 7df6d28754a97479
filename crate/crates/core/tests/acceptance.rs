//! Acceptance suite. One `PASS`/`FAIL` line per criterion; exits non-zero
//! when any criterion fails, including on a blown runtime budget.
//!
//! Run alone with `cargo test -p nonconv-core --test acceptance`, or pick
//! criteria by id: `cargo test -p nonconv-core --test acceptance -- 3 7`.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{char_poly, matrix_with_spectrum, poly_roots, spectrum_distance, Spectrum};
use nalgebra::{DMatrix, DVector};
use nonconv_core::engine::{ensemble_map, monte_carlo, run_observed, EnsembleOptions, RunOptions};
use nonconv_core::experiment::{run_experiment, DiagnosticSpec, ExperimentConfig, ExperimentSummary, RunContext};
use nonconv_core::flow::{apt_deficit, integrate_at, linspace, manifold_rate, TimeChangedPath};
use nonconv_core::hypotheses::{TheoremId, Verdict};
use nonconv_core::models::{
    control_model, vrrw_field, AffineManifold, ControlVariant, FnField, LinearModel, NoiseLaw, NoiseSpec, VrrwConfig,
};
use nonconv_core::sequences::Schedule;
use nonconv_core::spectral::{adapted_inner_product, split_jacobian};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

type Outcome = Result<(bool, String), String>;

struct Criterion {
    id: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn config(name: &str) -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).map_err(|e| e.to_string())
}

fn experiment(cfg: &ExperimentConfig, workers: usize, out: Option<PathBuf>) -> Result<ExperimentSummary, String> {
    let ctx = RunContext { workers: Some(workers), out_dir: out, simulate_only: false };
    run_experiment(cfg, &ctx).map_err(|e| e.to_string())
}

fn rademacher() -> LinearModel {
    LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Rademacher))
}

/// 1. sup of `|X_n|` over the last quarter below `10⁻²` in at most 0.5% of runs.
fn c1() -> Outcome {
    let n = 100_000;
    let sched = Schedule::harmonic(n).map_err(|e| e.to_string())?;
    let mut opts = EnsembleOptions::new(n, 1000, 20240601).with_workers(workers());
    opts.radius = 1e-2;
    let s = monte_carlo(&rademacher(), &sched, &[0.0], &opts).map_err(|e| e.to_string())?;
    let f = s.tail_near_trap_fraction;
    Ok((f <= 0.005, format!("tail near-trap fraction {f} (≤ 0.005), {} blow-ups", s.blowup_count)))
}

/// 2. Sharpness controls.
fn c2() -> Outcome {
    // (a) no noise from the trap
    let a = experiment(&config("control_degenerate_noise.json")?, workers(), None)?;
    let fr = &a.ensemble.near_trap_fraction;
    let ok_a = fr.iter().all(|&f| f == 1.0) && a.ensemble.tail_near_trap_fraction == 1.0;

    // (b) noise on the stable coordinate only, started on the stable axis
    let model = control_model(ControlVariant::StableNoise);
    let n = 10_000;
    let sched = Schedule::harmonic(n).map_err(|e| e.to_string())?;
    let moved = ensemble_map(100, 12, workers(), |_, seed| {
        let mut moved = 0usize;
        run_observed(&model, &sched, &[0.0, 0.5], &RunOptions::new(n), seed, &mut |v| {
            if v.x_next[0] != 0.0 {
                moved += 1;
            }
        })
        .map(|_| moved)
    })
    .map_err(|e| e.to_string())?;
    let moved: usize = moved.into_iter().map(|m| m.map_err(|e| e.to_string())).sum::<Result<_, _>>()?;
    let ok_b = moved == 0;

    // (c) r_n = n^{-1/2}
    let c = experiment(&config("control_divergent_remainder.json")?, workers(), None)?;
    let verdict = c
        .report(TheoremId::Th2n)
        .and_then(|r| r.condition("remainder_square_summable"))
        .map(|c| c.verdict);
    let ok_c = verdict == Some(Verdict::Fail);
    Ok((
        ok_a && ok_b && ok_c,
        format!(
            "(a) fractions {:?} tail {}; (b) {moved} steps left the stable axis; (c) remainder verdict {:?}",
            fr, a.ensemble.tail_near_trap_fraction, verdict
        ),
    ))
}

/// 3. VRRW on the complete graph, `α = 2`.
fn c3() -> Outcome {
    let s = experiment(&config("vrrw_d3.json")?, workers(), None)?;
    let near = *s.ensemble.near_trap_fraction.last().ok_or("no checkpoints")?;
    let r = s.report(TheoremId::Th5d).ok_or("no th5d report")?;
    let k = &r.constants;
    let (lam, mu, beta, nu) = (
        k.lambda_hat.unwrap_or(f64::NAN),
        k.mu.unwrap_or(f64::NAN),
        k.beta.unwrap_or(f64::NAN),
        k.nu.unwrap_or(f64::NAN),
    );
    let rate = r.condition("rate_condition").ok_or("no rate condition")?;
    let margin = rate.estimate("margin").unwrap_or(f64::NAN);
    let ok = near <= 0.01
        && (lam + 0.5).abs() <= 0.02
        && (mu + 1.0).abs() <= 1e-9
        && (beta + 0.5).abs() <= 0.02
        && nu == 1.0
        && rate.verdict == Verdict::Pass
        && margin >= 0.45;
    Ok((
        ok,
        format!(
            "near-trap {near} (≤ 0.01); λ̂ {lam:.4} μ {mu} β {beta:.4} ν {nu}; rate {:?} margin {margin:.4} (≥ 0.45)",
            rate.verdict
        ),
    ))
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng)).normalize()
}

/// 4. Coercivity of the adapted norm on repulsive matrices.
fn c4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_gap = f64::INFINITY;
    let mut worst_res = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..=6);
        let (h, _) = matrix_with_spectrum(&mut rng, d, 1e-2, Some(true));
        let norm = adapted_inner_product(&h).map_err(|e| e.to_string())?;
        worst_res = worst_res.max(norm.residual);
        for _ in 0..100 {
            let x = unit_vector(&mut rng, d);
            let gap = x.dot(&(&norm.s * &h * &x)) - norm.lambda * norm.norm_sq(&x);
            worst_gap = worst_gap.min(gap);
        }
    }
    Ok((
        worst_gap >= -1e-9 && worst_res <= 1e-8,
        format!("min gap {worst_gap:e} (≥ -1e-9), max Lyapunov residual {worst_res:e} (≤ 1e-8)"),
    ))
}

fn spectrum_of(m: &DMatrix<f64>) -> Spectrum {
    m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
}

/// 5. Splitting of random hyperbolic matrices.
fn c5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_res, mut worst_spec, mut worst_mu) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.random_range(2..=6);
        let (h, spectrum) = matrix_with_spectrum(&mut rng, d, 1e-2, None);
        let split = split_jacobian(&h, None).map_err(|e| e.to_string())?;
        worst_res = worst_res.max(split.residual(&h) / (1.0 + h.norm()));
        let got: Spectrum = split.eigenvalues.iter().map(|e| (e.re, e.im)).collect();
        worst_spec = worst_spec
            .max(spectrum_distance(&got, &spectrum))
            .max(spectrum_distance(&spectrum_of(&split.block_diagonal()), &spectrum));
        if d <= 4 {
            let oracle = poly_roots(&char_poly(&h))
                .iter()
                .map(|r| r.0)
                .filter(|re| *re < 0.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let oracle = if oracle.is_finite() { oracle } else { 0.0 };
            worst_mu = worst_mu.max((split.mu - oracle).abs() / (1.0 + oracle.abs()));
        }
    }
    Ok((
        worst_res <= 1e-8 && worst_spec <= 1e-8 && worst_mu <= 1e-6,
        format!(
            "residual/(1+‖H‖) {worst_res:e} (≤ 1e-8), spectrum {worst_spec:e} (≤ 1e-8), μ vs roots {worst_mu:e} (≤ 1e-6)"
        ),
    ))
}

/// 6. `α(t) ~ √2 t^{-1/4}` for `c_n = n^{-3/4}`.
fn c6() -> Outcome {
    let sched = Schedule::power(1.0, 0.75, 10_000).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for t in 1000..=10_000 {
        let a = sched.tail_l2(t as f64).map_err(|e| e.to_string())?;
        let reference = 2f64.sqrt() * (t as f64).powf(-0.25);
        worst = worst.max((a / reference - 1.0).abs());
    }
    Ok((worst <= 0.02, format!("max relative error {worst:.5} (≤ 0.02)")))
}

/// 7. Pseudotrajectory deficit rate: criterion-1 ensemble and noiseless path.
fn c7() -> Outcome {
    let mut cfg = config("linear_repulsive.json")?;
    cfg.n_runs = 100;
    cfg.checks.clear();
    cfg.check_runs = None;
    cfg.output = Default::default();
    cfg.diagnostics = vec![DiagnosticSpec::Apt { window: 1.0, points: 60, step: 1e-3, runs: 100, t_range: None }];
    let s = experiment(&cfg, workers(), None)?;
    let apt = s.diagnostic("apt").ok_or("no apt diagnostic")?;
    let median = apt.median_slope;
    let ok_a = median <= -0.4;

    // exact flow of x' = x sampled on a 10⁻³ grid; restarts on grid points
    let f = FnField::new(1, |x: &[f64], out: &mut [f64]| {
        out[0] = x[0];
        Ok(())
    });
    let s_end = sched_clock(100_000)?;
    let n = (s_end * 1000.0).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
    let states: Vec<Vec<f64>> = grid.iter().map(|t| vec![1e-5 * t.exp()]).collect();
    let path = TimeChangedPath::from_samples(grid.clone(), states).map_err(|e| e.to_string())?;
    let last = n - 1 - 1000;
    let starts: Vec<f64> = (0..60).map(|k| grid[k * last / 59]).collect();
    let noiseless = apt_deficit(&path, &f, 1.0, &starts, 1e-3).map_err(|e| e.to_string())?;
    let worst = noiseless.deficit.iter().fold(0.0f64, |m, &d| m.max(d));
    let ok_b = worst <= 1e-6;
    Ok((
        ok_a && ok_b,
        format!(
            "(a) median deficit slope {median:.4} (≤ -0.4) over {} runs; (b) noiseless deficit {worst:e} (≤ 1e-6)",
            apt.runs_used
        ),
    ))
}

fn sched_clock(n: usize) -> Result<f64, String> {
    let sched = Schedule::harmonic(n).map_err(|e| e.to_string())?;
    sched.drift_clock(n).ok_or_else(|| "clock".to_string())
}

/// 8. Attraction to the unstable manifold.
fn c8() -> Outcome {
    let f = FnField::new(2, |x: &[f64], out: &mut [f64]| {
        out[0] = x[0];
        out[1] = -x[1];
        Ok(())
    });
    let s = linspace(0.0, 10.0, 1001);
    let states = integrate_at(&f, &[0.0, 0.5], 1e-3, &s).map_err(|e| e.to_string())?;
    let path = TimeChangedPath::from_samples(s, states).map_err(|e| e.to_string())?;
    let k = AffineManifold::from_directions(&[0.0, 0.0], &DMatrix::from_column_slice(2, 1, &[1.0, 0.0]))
        .map_err(|e| e.to_string())?;
    let slope = manifold_rate(&path, &k, None).map_err(|e| e.to_string())?.slope;
    let ok_a = (slope + 1.0).abs() <= 1e-3;

    let summary = experiment(&config("synthetic.json")?, workers(), None)?;
    let d = summary.diagnostic("manifold_rate").ok_or("no manifold diagnostic")?;
    let median = d.median_slope;
    let ok_b = (-1.1..=-0.4).contains(&median);
    Ok((
        ok_a && ok_b,
        format!(
            "(a) flow slope {slope:.6} (-1 ± 1e-3); (b) ensemble median slope {median:.4} in [-1.1, -0.4] over {} runs",
            d.runs_used
        ),
    ))
}

/// 9. Byte-identical summaries for 1 and 16 workers.
fn c9() -> Outcome {
    let cfg = config("linear_repulsive.json")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut texts = Vec::new();
    for w in [1, 16] {
        let out = dir.path().join(format!("w{w}"));
        experiment(&cfg, w, Some(out.clone()))?;
        let text = std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?;
        let cut = text.find("\"meta\"").ok_or("no meta key")?;
        texts.push(text[..cut].to_string());
    }
    let same = texts[0] == texts[1];
    Ok((same, format!("summary.json before meta {} ({} bytes)", if same { "identical" } else { "differs" }, texts[0].len())))
}

fn simplex_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// 10. `Σ f_i = 0` on the simplex and `f(uniform) = 0`.
fn c10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_sum, mut worst_eq) = (0.0f64, 0.0f64);
    for d in 2..=6 {
        for alpha in [1.0, 1.5, 2.0, 3.0] {
            for cfg in [VrrwConfig::complete(d, alpha), VrrwConfig::complete_looped(d, alpha)] {
                let cfg = cfg.map_err(|e| e.to_string())?;
                for _ in 0..10_000 {
                    let v = simplex_point(&mut rng, d);
                    let f = vrrw_field(&v, &cfg).map_err(|e| e.to_string())?;
                    worst_sum = worst_sum.max(f.iter().sum::<f64>().abs());
                }
                let f = vrrw_field(&vec![1.0 / d as f64; d], &cfg).map_err(|e| e.to_string())?;
                worst_eq = worst_eq.max(f.iter().fold(0.0f64, |m, x| m.max(x.abs())));
            }
        }
    }
    Ok((
        worst_sum <= 1e-12 && worst_eq <= 1e-12,
        format!("max |Σf| {worst_sum:e}, max |f(uniform)| {worst_eq:e} (≤ 1e-12)"),
    ))
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: "1", budget: secs(120), run: c1 },
        Criterion { id: "2", budget: secs(60), run: c2 },
        Criterion { id: "3", budget: secs(300), run: c3 },
        Criterion { id: "4", budget: secs(30), run: c4 },
        Criterion { id: "5", budget: secs(30), run: c5 },
        Criterion { id: "6", budget: secs(5), run: c6 },
        Criterion { id: "7", budget: secs(180), run: c7 },
        Criterion { id: "8", budget: secs(180), run: c8 },
        Criterion { id: "9", budget: secs(240), run: c9 },
        Criterion { id: "10", budget: secs(10), run: c10 },
    ];
    // libtest flags such as --nocapture are ignored; bare ids select criteria
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w == c.id)) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let in_budget = took <= c.budget;
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "{} {}: {detail} [{:.1} s of {} s{}]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
        if !ok {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
