use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use prior_core::evaluation::compare_markdown;
use prior_core::trainer::{run_experiment, ExperimentConfig, MetricsLine, Variant};

#[derive(Parser)]
#[command(name = "prior", version, about = "Preference-based reward learning with hindsight priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its outputs.
    Run {
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// pebble, oprior or prior. Resets unset coefficients to the
        /// variant's defaults.
        #[arg(long)]
        variant: Option<Variant>,
        /// Total query budget.
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long = "query-len")]
        query_len: Option<usize>,
        #[arg(long = "forced-negative")]
        forced_negative: bool,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Summarise finished runs as a Markdown table, one row per variant.
    Compare {
        /// Run directories (each containing metrics.jsonl).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        /// Bind address; falls back to $PRIOR_BIND, then 127.0.0.1:8080.
        #[arg(long)]
        bind: Option<String>,
        /// Directory that receives the outputs of finished runs.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn final_line(dir: &PathBuf) -> Result<(String, prior_core::evaluation::RecoveryReport)> {
    let path = dir.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    for line in text.lines().rev() {
        if let MetricsLine::Final { variant, report, .. } = serde_json::from_str(line)? {
            return Ok((variant.to_string(), report));
        }
    }
    bail!("{} has no final report", path.display())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            variant,
            queries,
            query_len,
            forced_negative,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                if v != cfg.variant {
                    cfg.lambda_p = None;
                    cfg.lambda_r0 = None;
                    cfg.lambda_r1 = None;
                }
                cfg.variant = v;
            }
            if let Some(q) = queries {
                cfg.query_budget = q;
            }
            if let Some(l) = query_len {
                cfg.query_length = l;
            }
            cfg.forced_negative |= forced_negative;
            let run = run_experiment(&cfg)?;
            run.write_to(&out)?;
            println!("{}", serde_json::to_string_pretty(&run.report)?);
            log::info!("outputs written to {}", out.display());
        }
        Command::Compare { runs } => {
            let rows = runs.iter().map(final_line).collect::<Result<Vec<_>>>()?;
            print!("{}", compare_markdown(&rows));
        }
        Command::Serve { bind, runs_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(prior_service::serve(bind, runs_dir))?;
        }
    }
    Ok(())
}
