//! `gmmdo` command line: truth generation, twin experiments, self-checks and plot emission.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gmmdo_core::io::{
    emit_plots, inventory, load_config, read_report, write_manifest, write_report, write_snapshot, RunManifest,
    SnapshotMeta, SCHEMA_VERSION,
};
use gmmdo_core::twin::{generate_truth, run_experiment, truth_in_model_space, ExperimentConfig, RunOptions};
use gmmdo_core::{verify, Domain, Error};

const THREADS_ENV: &str = "GMMDO_THREADS";

#[derive(Parser)]
#[command(name = "gmmdo", version, about = "Bayesian learning of plankton models in a ridge flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the true model and write its fields at the observation times.
    Truth(RunArgs),
    /// Run a full twin experiment.
    Run(RunArgs),
    /// Run the property and oracle suites.
    Verify {
        /// Seed for the randomized suites.
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write plot-ready CSV tables and a plotting script from a report directory.
    Plot {
        /// Directory holding metrics.csv and kde.csv.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for the tables and script.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML); a built-in preset is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset used when no configuration file is given.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=4))]
    experiment: u8,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report, snapshots and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the manifest; computation is single-threaded.
    #[arg(long)]
    threads: Option<usize>,
    /// Uniform grid and ensemble reduction.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Ensemble size override, applied after scaling.
    #[arg(long)]
    n_r: Option<usize>,
    /// End time override.
    #[arg(long)]
    t_end: Option<f64>,
    /// Also write mean, standard-deviation and truth fields at every assimilation time.
    #[arg(long)]
    snapshots: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingParameter(_) | Error::Schema { .. } | Error::Parse { .. } => {
                Failure::Config(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

struct Resolved {
    cfg: ExperimentConfig,
    threads: usize,
    scale: f64,
}

fn resolve(args: &RunArgs) -> Result<Resolved, Failure> {
    let base = match &args.config {
        Some(p) => load_config(p).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("{}: {io}", p.display())),
            other => Failure::from(other),
        })?,
        None => ExperimentConfig::preset(args.experiment)?,
    };
    let mut cfg = base.scaled(args.scale)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_r {
        cfg.stochastic.n_r = n;
    }
    if let Some(t) = args.t_end {
        cfg.time.t_end = t;
        cfg.observations.end = cfg.observations.end.min(t);
    }
    cfg.validate()?;
    let threads = match args.threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| Failure::Config(format!("{THREADS_ENV}={v} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(Failure::Config("thread count must be at least 1".into()));
    }
    Ok(Resolved {
        cfg,
        threads,
        scale: args.scale,
    })
}

fn manifest(r: &Resolved, status: String, started: Instant, dir: &Path, files: &[PathBuf]) -> Result<(), Failure> {
    let m = RunManifest {
        schema: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        command: std::env::args().collect::<Vec<_>>().join(" "),
        seed: r.cfg.seed,
        scale: r.scale,
        threads: r.threads,
        wall_seconds: started.elapsed().as_secs_f64(),
        status,
        files: inventory(dir, files)?,
        config: r.cfg.clone(),
    };
    write_manifest(dir, &m)?;
    Ok(())
}

fn tracer_names(cfg: &ExperimentConfig, truth: bool) -> Vec<&'static str> {
    let model = if truth { cfg.truth.model } else { cfg.stochastic.model };
    model.tracer_names().to_vec()
}

fn cmd_truth(args: &RunArgs) -> Result<(), Failure> {
    let r = resolve(args)?;
    let started = Instant::now();
    let truth = generate_truth(&r.cfg)?;
    let dir = &args.out;
    let names = tracer_names(&r.cfg, true);
    let mut files = Vec::new();
    for (k, (t, state)) in truth.times.iter().zip(&truth.states).enumerate() {
        let meta = SnapshotMeta::new("truth", *t, &names, &r.cfg);
        files.extend(write_snapshot(dir, &format!("truth_{k:03}"), &meta, state)?);
    }
    manifest(&r, "completed".into(), started, dir, &files)?;
    println!("truth: {} snapshots written to {}", truth.times.len(), dir.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let r = resolve(args)?;
    let started = Instant::now();
    let outcome = run_experiment(
        &r.cfg,
        RunOptions {
            keep_snapshots: args.snapshots,
        },
    )?;
    let res = &outcome.result;
    let dir = &args.out;
    let mut files = write_report(&res.report, dir)?;
    if args.snapshots {
        let names = tracer_names(&r.cfg, false);
        let nc = Domain::new(&r.cfg.domain)?.grid.n_cells();
        for (k, s) in res.snapshots.iter().enumerate() {
            let meta = SnapshotMeta::new(&s.label, s.time, &names, &r.cfg);
            files.extend(write_snapshot(dir, &format!("{}_{:03}", s.label, k / 3), &meta, &s.data)?);
        }
        let init = truth_in_model_space(&r.cfg, nc, &res.truth.initial).concat();
        let meta = SnapshotMeta::new("truth", 0.0, &names, &r.cfg);
        files.extend(write_snapshot(dir, "truth_initial", &meta, &init)?);
    }
    let status = match &outcome.failure {
        None => "completed".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    manifest(&r, status, started, dir, &files)?;
    let d = &res.diagnostics;
    println!(
        "run: experiment {} seed {}: {} steps, {} updates, max orthonormality error {:.2e}, max divergence {:.2e}",
        r.cfg.id,
        r.cfg.seed,
        d.steps,
        res.updates.len(),
        d.max_orthonormality,
        d.max_divergence
    );
    match outcome.failure {
        None => Ok(()),
        Some(e) => Err(Failure::Runtime(format!("partial report written: {e}"))),
    }
}

fn cmd_verify(seed: u64) -> Result<(), Failure> {
    let results = verify::run_all(seed)?;
    let mut failed = 0;
    for c in &results {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} suites failed", results.len())));
    }
    Ok(())
}

fn cmd_plot(report: &Path, out: &Path) -> Result<(), Failure> {
    let rep = read_report(report)?;
    let files = emit_plots(&rep, out)?;
    println!("plot: {} files written to {}", files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Truth(a) => cmd_truth(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify { seed } => cmd_verify(*seed),
        Command::Plot { report, out } => cmd_plot(report, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
