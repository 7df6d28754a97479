use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use nonconv_core::experiment::{run_experiment, ExperimentConfig, ExperimentSummary, RunContext};
use nonconv_core::spectral::{adapted_inner_product, split_jacobian, AdaptedNorm, Classification, SpectralError};

/// Simulate stochastic approximation ensembles near unstable equilibria and
/// check the non-convergence hypotheses.
#[derive(Parser)]
#[command(name = "nonconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ensemble only and write summary.json.
    Simulate(RunArgs),
    /// Run the ensemble, the hypothesis checks and the diagnostics.
    /// Exits with 2 when a check fails.
    Check(RunArgs),
    /// Split a Jacobian and classify its equilibrium. Exits with 2 for
    /// center, non-hyperbolic or near-center spectra.
    Spectral {
        /// JSON matrix such as `[[1,0],[0,-2]]`, or a path to a file holding one.
        #[arg(long)]
        matrix: String,
        /// Ambiguity scale; defaults to 1e-8 times the Frobenius norm.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Print the tables of an existing summary.json.
    Report {
        /// summary.json, or the directory containing it.
        #[arg(long)]
        summary: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print summary.json to stdout instead of tables.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8, String> {
    match cmd {
        Command::Simulate(args) => run(args, true),
        Command::Check(args) => run(args, false),
        Command::Spectral { matrix, tol, json } => spectral(&matrix, tol, json),
        Command::Report { summary, json } => {
            let path = if summary.is_dir() { summary.join("summary.json") } else { summary };
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let s = ExperimentSummary::from_json(&text).map_err(|e| e.to_string())?;
            if json {
                println!("{}", s.to_json());
            } else {
                print_summary(&s);
            }
            Ok(s.exit_code() as u8)
        }
    }
}

fn run(args: RunArgs, simulate_only: bool) -> Result<u8, String> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    let ctx = RunContext { workers: args.workers, out_dir: args.out, simulate_only };
    let s = run_experiment(&cfg, &ctx).map_err(|e| e.to_string())?;
    if args.json {
        println!("{}", s.to_json());
    } else {
        print_summary(&s);
    }
    Ok(s.exit_code() as u8)
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        format!("{v}")
    }
}

fn print_summary(s: &ExperimentSummary) {
    let e = &s.ensemble;
    println!("model {}  d={}  N={}  runs={}  seed={}", e.model_id, e.dim, e.n_steps, e.n_runs, e.master_seed);
    println!("config sha256 {}", s.provenance.config_sha256);
    if let Some(t) = &s.trap {
        println!("trap {:?}: {} (δ⁺={}, δ⁻={}, μ={})", t.x_star, t.classification, t.delta_plus, t.delta_minus, fmt(t.mu));
    }
    println!("blow-ups {}", e.blowup_count);
    for (n, f) in e.checkpoints.iter().zip(&e.near_trap_fraction) {
        println!("  P(|X_{n} - x*| < {}) = {}", e.radius, fmt(*f));
    }
    println!("  tail fraction near trap = {}", fmt(e.tail_near_trap_fraction));
    if let Some(r) = &s.rates {
        println!("rates on {:?}: lambda_hat={} liminf={}", r.window, fmt(r.lambda_hat), fmt(r.liminf_proxy));
    }
    for d in &s.diagnostics {
        println!(
            "{}: median slope {} over {} runs ({} excluded)",
            d.kind,
            fmt(d.median_slope),
            d.runs_used,
            d.excluded_runs.len()
        );
    }
    for r in &s.reports {
        println!();
        print!("{}", r.render_table());
    }
    for n in &s.notes {
        println!("note: {n}");
    }
    if !s.reports.is_empty() {
        println!();
        println!("verdict: {}", s.verdict.as_str());
        for c in &s.failed_conditions {
            println!("  failed {c}");
        }
    }
}

fn parse_matrix(arg: &str) -> Result<DMatrix<f64>, String> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?
    } else {
        arg.to_string()
    };
    let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| format!("matrix: {e}"))?;
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err("matrix rows must be non-empty and of equal length".into());
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn spectral(arg: &str, tol: Option<f64>, json: bool) -> Result<u8, String> {
    let h = parse_matrix(arg)?;
    let split = match split_jacobian(&h, tol) {
        Ok(s) => s,
        Err(e @ SpectralError::NearCenter { .. }) => {
            if json {
                println!("{}", serde_json::json!({ "classification": "near_center", "error": e.to_string() }));
            } else {
                println!("classification: near_center ({e})");
            }
            return Ok(2);
        }
        Err(e) => return Err(e.to_string()),
    };
    let residual = split.residual(&h);
    // adapted norm of the unstable block
    let adapted: Option<AdaptedNorm> = if split.delta_plus > 0 {
        Some(adapted_inner_product(&split.h_plus).map_err(|e| e.to_string())?)
    } else {
        None
    };
    if json {
        let v = serde_json::json!({
            "classification": split.classification.as_str(),
            "hyperbolic": split.is_hyperbolic(),
            "delta_plus": split.delta_plus,
            "delta_minus": split.delta_minus,
            "mu": split.mu,
            "tol": split.tol,
            "eigenvalues": split.eigenvalues,
            "residual": residual,
            "p": rows(&split.p),
            "p_inv": rows(&split.p_inv),
            "adapted_norm": adapted.as_ref().map(|a| serde_json::json!({
                "s": rows(&a.s),
                "lambda": a.lambda,
                "lyapunov_residual": a.residual,
            })),
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
    } else {
        println!("classification: {}", split.classification.as_str());
        println!("hyperbolic: {}", split.is_hyperbolic());
        println!("delta_plus: {}  delta_minus: {}", split.delta_plus, split.delta_minus);
        println!("mu: {}", split.mu);
        for (i, ev) in split.eigenvalues.iter().enumerate() {
            let block = if i < split.delta_plus { "+" } else { "-" };
            println!("  [{block}] {} {:+}i", ev.re, ev.im);
        }
        println!("block residual: {residual:e}");
        if let Some(a) = &adapted {
            println!("adapted norm on H+: lambda = {}  (Lyapunov residual {:e})", a.lambda, a.residual);
            for i in 0..a.s.nrows() {
                let row: Vec<String> = a.s.row(i).iter().map(|v| format!("{v:.6}")).collect();
                println!("  S[{i}] = [{}]", row.join(", "));
            }
        }
    }
    let flagged = split.classification == Classification::Center || !split.is_hyperbolic();
    Ok(if flagged { 2 } else { 0 })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
