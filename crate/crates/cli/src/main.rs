use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand};
use tda_cli::config::{ExperimentConfig, Usage};
use tda_cli::{commands, exit_code, report};

#[derive(Parser)]
#[command(name = "tda", version, about = "Training data attribution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated method ids; defaults to every configured method.
    #[arg(long, global = true, value_delimiter = ',')]
    method: Option<Vec<String>>,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true)]
    parallel: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train and save checkpoints, batch log and manifest.
    Train,
    /// Compute attribution scores for the selected methods.
    Attribute,
    /// LDS and counterfactual evaluation of saved scores.
    Evaluate,
    /// Compare the unrolled derivative with finite differences and SOURCE.
    OracleCheck,
    /// Render SVG charts and a summary from the evaluation report.
    Report,
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let Some(path) = &cli.config else {
        bail!(Usage("--config is required".into()));
    };
    let mut cfg = ExperimentConfig::load(path, cli.seed)?;
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.parallel {
        if n == 0 {
            bail!(Usage("--parallel must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let methods: Option<Vec<String>> = cli
        .method
        .as_ref()
        .map(|m| m.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
    match cli.command {
        Command::Train => {
            let m = commands::train(&load(cli)?)?;
            println!("trained {} steps, {} checkpoints, digest {}", m.steps, m.checkpoints.len(), m.config_digest);
        }
        Command::Attribute => {
            for path in commands::attribute(&load(cli)?, methods.as_deref())? {
                println!("wrote {}", path.display());
            }
        }
        Command::Evaluate => {
            let r = commands::evaluate(&load(cli)?, methods.as_deref())?;
            for e in &r.lds {
                let l = &e.report;
                println!("lds {} alpha={} {:.4} [{:.4}, {:.4}]", l.method, l.alpha, l.mean, l.ci.0, l.ci.1);
            }
        }
        Command::OracleCheck => {
            let r = commands::oracle_check(&load(cli)?)?;
            for p in &r.points {
                println!("point {}: fd max rel error {:.3e}", p.train_index, p.fd_rel_error);
                for s in &p.source {
                    println!("  {} vs unrolled: max rel error {:.3e}", s.method, s.rel_error);
                }
            }
            println!("max fd rel error {:.3e}", r.max_fd_rel_error);
        }
        Command::Report => {
            let out = match (&cli.out, &cli.config) {
                (Some(out), _) => out.clone(),
                (None, Some(_)) => load(cli)?.out_dir()?.to_path_buf(),
                (None, None) => bail!(Usage("report needs --out or --config".into())),
            };
            let (written, text) = report::report(&out)?;
            print!("{text}");
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// Joins the cause chain, dropping causes already quoted by the previous message.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_some_and(|p| p.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
