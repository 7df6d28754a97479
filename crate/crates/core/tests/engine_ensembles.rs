use nonconv_core::engine::{
    ensemble_map, monte_carlo, run, run_observed, run_seed, EnsembleOptions, RunOptions,
};
use nonconv_core::hypotheses::IncrementStats;
use nonconv_core::models::{LinearModel, Model, NoiseLaw, NoiseSpec, VrrwConfig, VrrwModel};
use nonconv_core::sequences::Schedule;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn rademacher() -> LinearModel {
    LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Rademacher))
}

#[test]
fn repulsive_runs_escape_the_noise_scale() {
    let n = 100_000;
    let sched = Schedule::harmonic(n).unwrap();
    let alpha_n = sched.tail_l2(n as f64).unwrap();
    let mut opts = EnsembleOptions::new(n, 1000, 2024).with_workers(workers());
    opts.radius = 0.01;
    let s = monte_carlo(&rademacher(), &sched, &[0.0], &opts).unwrap();
    assert_eq!(s.blowup_count, 0);
    let beyond = s.terminal_states.iter().filter(|x| x[0].abs() > alpha_n).count();
    assert!(beyond as f64 >= 0.99 * 1000.0, "{beyond} of 1000 beyond α(N) = {alpha_n}");
    assert!(s.near_trap_fraction.last().unwrap() <= &0.005);

    // doubling N cannot bring runs back
    let sched2 = Schedule::harmonic(2 * n).unwrap();
    let mut opts2 = EnsembleOptions::new(2 * n, 1000, 2024).with_workers(workers());
    opts2.radius = 0.01;
    let s2 = monte_carlo(&rademacher(), &sched2, &[0.0], &opts2).unwrap();
    assert!(s2.near_trap_fraction.last().unwrap() <= s.near_trap_fraction.last().unwrap());
}

#[test]
fn summary_is_worker_independent() {
    let sched = Schedule::harmonic(5000).unwrap();
    let base = EnsembleOptions::new(5000, 97, 5);
    let reference = monte_carlo(&rademacher(), &sched, &[0.0], &base.clone().with_workers(1)).unwrap();
    for w in [4, 16] {
        let s = monte_carlo(&rademacher(), &sched, &[0.0], &base.clone().with_workers(w)).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), serde_json::to_string(&reference).unwrap());
    }
}

#[test]
fn single_run_summary_matches_the_run() {
    let sched = Schedule::harmonic(1000).unwrap();
    let s = monte_carlo(&rademacher(), &sched, &[0.0], &EnsembleOptions::new(1000, 1, 3)).unwrap();
    let t = run(&rademacher(), &sched, &[0.0], 1000, run_seed(3, 0)).unwrap();
    assert_eq!(s.terminal_states[0], t.final_state());
    let d = t.final_state()[0].abs();
    assert!(s.terminal_distance_quantiles.iter().all(|&q| q == d));
}

/// Cross-run mean of `ε_{n+1}` within `4 sd / √runs`; a handful of steps may
/// exceed it by chance, so only the exceedance rate is asserted.
#[test]
fn martingale_increments_are_centered() {
    let n = 2000;
    let runs = 400;
    let sched = Schedule::harmonic(n).unwrap();
    let model = LinearModel::scalar_repulsive(NoiseSpec::new(NoiseLaw::Gaussian { sd: 1.0 }));
    let trajs = ensemble_map(runs, 9, workers(), |_, seed| run(&model, &sched, &[0.0], n, seed).unwrap()).unwrap();
    let mut stats = IncrementStats::new(1, (0, n), 4.0, 1.0, None, runs).unwrap();
    for t in &trajs {
        stats.add(t).unwrap();
    }
    let bound = 4.0 / (runs as f64).sqrt();
    let flagged = (0..n).filter(|&k| stats.mean_eps(k).unwrap()[0].abs() > bound).count();
    assert!(flagged <= 3, "{flagged} steps flagged");
}

#[test]
fn vrrw_stays_on_simplex() {
    let n = 20_000;
    let sched = Schedule::harmonic(n).unwrap();
    let model = VrrwModel::new(VrrwConfig::complete(4, 2.0).unwrap()).unwrap();
    let x0 = vec![0.25; 4];
    let worst = ensemble_map(20, 17, workers(), |_, seed| {
        let mut worst = 0.0f64;
        run_observed(&model, &sched, &x0, &RunOptions::new(n), seed, &mut |v| {
            let sum: f64 = v.x_next.iter().sum();
            let neg = v.x_next.iter().copied().fold(0.0f64, |m, x| m.max(-x));
            worst = worst.max((sum - 1.0).abs()).max(neg);
        })
        .unwrap();
        worst
    })
    .unwrap();
    assert!(worst.iter().all(|&w| w <= 1e-12), "{worst:?}");
    assert_eq!(model.dim(), 4);
}
