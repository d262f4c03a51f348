//! Experiment CLI: configuration-driven ensembles, sweeps, early-stop and
//! scaling studies, the exact-identity verification suite, and the toy
//! inverse problem.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 verification failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fmrg::config::ExperimentConfig;
use fmrg::experiment::{
    self, early_stop_study, lambda_sweep, prediction_checks, run_ensemble, scaling_slope,
    toy_inverse_problem, verify_suite, CheckOutcome, EnsembleSummary, RunReport,
};
use fmrg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fmrg",
    version,
    about = "Reward-guided generative flows on analytically tractable targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one Monte Carlo ensemble and print its summary row.
    Run(RunArgs),
    /// One summary row per (method, strength) pair of the sweep section.
    Sweep(RunArgs),
    /// Early-stopping study plus the matched-stop-time marker row.
    Earlystop(RunArgs),
    /// Log-log scaling of the greedy-vs-exact control gap.
    Slope(RunArgs),
    /// Exact-identity and flow-axiom verification suite.
    Verify(VerifyArgs),
    /// Toy inverse problem on the 2-D mixture benchmark.
    Inverse(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (flat dotted-key TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV/JSON artifacts named in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Particle-count override.
    #[arg(long)]
    particles: Option<usize>,
    /// Worker thread count (results are identical for any value).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Optional configuration; supplies the seed and output paths.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the JSON report named in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread count.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => ensemble_command(a, |cfg| Ok(vec![run_ensemble(cfg)?])),
        Command::Sweep(a) => ensemble_command(a, lambda_sweep),
        Command::Earlystop(a) => ensemble_command(a, early_stop_study),
        Command::Slope(a) => slope_command(a),
        Command::Verify(a) => verify_command(a),
        Command::Inverse(a) => inverse_command(a),
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Ignore the error from a second initialization; the pool is global.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(n) = args.particles {
        cfg.ensemble.n_particles = n;
    }
    Ok(cfg)
}

fn out_path(dir: &Option<PathBuf>, name: &str) -> PathBuf {
    match dir {
        Some(d) => d.join(name),
        None => PathBuf::from(name),
    }
}

fn write_json_report(
    path: &Path,
    cfg: &ExperimentConfig,
    checks: Vec<CheckOutcome>,
    started: Instant,
) -> Result<()> {
    let report = RunReport {
        config: cfg,
        git: experiment::git_describe(),
        wall_seconds: started.elapsed().as_secs_f64(),
        checks,
    };
    std::fs::write(path, experiment::report_to_json(&report)?)?;
    Ok(())
}

fn ensemble_command(
    args: RunArgs,
    run: impl Fn(&ExperimentConfig) -> Result<Vec<EnsembleSummary>>,
) -> Result<()> {
    init_threads(args.threads);
    let started = Instant::now();
    let cfg = load_config(&args)?;
    let rows = run(&cfg)?;
    let csv = experiment::summaries_to_csv(&rows);
    print!("{csv}");
    if let Some(name) = &cfg.output.csv {
        std::fs::write(out_path(&args.out, name), &csv)?;
    }
    if let Some(name) = &cfg.output.json {
        let mut checks = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for mut check in prediction_checks(row) {
                if rows.len() > 1 {
                    check.name = format!("{}-row{}", check.name, i);
                }
                checks.push(check);
            }
        }
        write_json_report(&out_path(&args.out, name), &cfg, checks, started)?;
    }
    Ok(())
}

fn slope_command(args: RunArgs) -> Result<()> {
    init_threads(args.threads);
    let started = Instant::now();
    let cfg = load_config(&args)?;
    let report = scaling_slope(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("slope report serializes"));
    if let Some(name) = &cfg.output.json {
        let checks = vec![
            CheckOutcome {
                name: "raw-gap-slope-is-quadratic".to_string(),
                pass: (1.9..=2.1).contains(&report.raw_slope),
                detail: format!("fit {:.4} +- {:.4}", report.raw_slope, report.raw_stderr),
            },
            CheckOutcome {
                name: "corrected-gap-slope-is-cubic".to_string(),
                pass: report.corrected_slope >= 2.8,
                detail: format!(
                    "fit {:.4} +- {:.4}",
                    report.corrected_slope, report.corrected_stderr
                ),
            },
        ];
        write_json_report(&out_path(&args.out, name), &cfg, checks, started)?;
    }
    Ok(())
}

fn inverse_command(args: RunArgs) -> Result<()> {
    init_threads(args.threads);
    let started = Instant::now();
    let cfg = load_config(&args)?;
    let report = toy_inverse_problem(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("inverse report serializes"));
    if let Some(name) = &cfg.output.json {
        let unguided = report
            .rows
            .iter()
            .find(|r| r.method == "unguided")
            .map(|r| r.median_sq_error)
            .unwrap_or(f64::INFINITY);
        let checks = report
            .rows
            .iter()
            .filter(|r| r.method != "unguided")
            .map(|r| CheckOutcome {
                name: format!("{}-improves-on-unguided", r.method),
                pass: r.median_sq_error < unguided,
                detail: format!(
                    "median error {} vs unguided {unguided} at {} queries",
                    r.median_sq_error, r.nfe
                ),
            })
            .collect();
        write_json_report(&out_path(&args.out, name), &cfg, checks, started)?;
    }
    Ok(())
}

fn verify_command(args: VerifyArgs) -> Result<()> {
    init_threads(args.threads);
    let started = Instant::now();
    let cfg = match &args.config {
        Some(path) => Some(ExperimentConfig::from_path(path)?),
        None => None,
    };
    let seed = args
        .seed
        .or_else(|| cfg.as_ref().map(|c| c.ensemble.seed))
        .unwrap_or(0);
    let checks = verify_suite(seed)?;
    for c in &checks {
        println!("{} {} - {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(cfg) = &cfg {
        if let Some(name) = &cfg.output.json {
            write_json_report(&out_path(&args.out, name), cfg, checks.clone(), started)?;
        }
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Error::Verify(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
