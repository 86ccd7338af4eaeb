use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mc_coverage::run::{self, RunConfig};
use mc_coverage::Result;

#[derive(Parser)]
#[command(name = "mc-coverage", version, about = "Circumcision coverage by region, age, year and type")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the sampling and simulation seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and cross-check all inputs without fitting.
    Validate,
    /// Write a synthetic dataset from the `simulation` section.
    Simulate,
    /// Fit, draw posterior samples and summarize.
    Fit,
    /// Summaries from samples written by `fit`.
    Aggregate {
        /// Path to `samples.bin` (defaults to the output directory).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| mc_coverage::Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.inference.seed = seed;
        if let Some(sim) = cfg.simulation.as_mut() {
            sim.seed = seed;
        }
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    run::init_threads(cfg.threads)?;
    match &cli.command {
        Command::Validate => run::cmd_validate(&cfg),
        Command::Simulate => {
            run::cmd_simulate(&cfg)?;
            Ok(serde_json::json!({"status": "ok", "survey": cfg.paths.survey}))
        }
        Command::Fit => {
            let out = run::cmd_fit(&cfg)?;
            Ok(serde_json::json!({
                "status": "ok",
                "converged": out.fit.status.converged(),
                "objective": out.fit.objective,
                "gradient_max": out.fit.gradient_max,
                "draws": out.samples.draws.len(),
                "summary_rows": out.rows.len(),
            }))
        }
        Command::Aggregate { samples } => {
            let p = samples.clone().unwrap_or_else(|| cfg.output_dir.join("samples.bin"));
            let rows = run::cmd_aggregate(&cfg, &p)?;
            Ok(serde_json::json!({"status": "ok", "summary_rows": rows.len()}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", run::error_report(&e));
            ExitCode::FAILURE
        }
    }
}
