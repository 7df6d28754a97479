use nonconv_core::experiment::{run_experiment, ExperimentConfig, RunContext};

fn median_apt_slope(h: f64, runs: usize) -> f64 {
    let text = format!(
        r#"{{
            "schema_version": 1,
            "model": {{"kind": "linear", "h": [[{h}]], "noise": {{"law": "rademacher"}}}},
            "schedule": {{"kind": "harmonic", "horizon": 100000}},
            "x0": [0.0],
            "n_steps": 100000,
            "n_runs": {runs},
            "master_seed": 7,
            "diagnostics": [{{"kind": "apt", "window": 1.0, "runs": {runs}}}]
        }}"#
    );
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    let ctx = RunContext { workers: Some(4), out_dir: None, simulate_only: false };
    run_experiment(&cfg, &ctx).unwrap().diagnostic("apt").unwrap().median_slope
}

/// Bounded trajectories: the deficit decays like `α(t) ~ e^{-t/2}`.
#[test]
fn stable_ensemble_deficit_rate_is_minus_half() {
    let slope = median_apt_slope(-1.0, 60);
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}

/// Escaping trajectories grow like `e^t` on the drift clock, so the Euler
/// step error `γ‖X‖` stays of order one and the deficit does not decay.
#[test]
fn repulsive_ensemble_deficit_does_not_decay() {
    let slope = median_apt_slope(1.0, 60);
    assert!(slope.abs() <= 0.1, "slope {slope}");
}
