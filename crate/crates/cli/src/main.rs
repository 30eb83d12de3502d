use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dpsynth::data::load_jsonl;
use dpsynth::experiment::{run_experiment, sweep, ExperimentConfig, SweepConfig};
use dpsynth::privacy::{
    audit_author_contributions, default_orders, effective_budget, epsilon_after, parse_epsilon,
    AuditDocument, PrivacyBudget,
};

#[derive(Parser)]
#[command(
    name = "dpsynth",
    version,
    about = "Differentially private synthetic text generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Target ε, a number or "inf".
        #[arg(long, value_parser = parse_eps)]
        epsilon_override: Option<f64>,
    },
    /// Run a grid of experiments and write table.md.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Audit author contributions of a JSONL corpus and report the effective budget.
    Audit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_eps)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        /// Assumed maximum contributions per author, when larger than the audited value.
        #[arg(long)]
        k: Option<usize>,
    },
    /// ε of DP-SGD for a given noise multiplier, sampling rate and step count.
    Accountant {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
}

fn parse_eps(s: &str) -> Result<f64, String> {
    parse_epsilon(s).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            epsilon_override,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                // Relative to the working directory, unlike paths inside the config.
                cfg.output_dir = std::env::current_dir()?.join(o);
            }
            if let Some(e) = epsilon_override {
                cfg.epsilon = e;
            }
            let summary = run_experiment(&cfg)?;
            log::info!("run written to {}", summary.output_dir.display());
            println!("{}", serde_json::to_string_pretty(&summary.metrics)?);
        }
        Command::Sweep { config } => {
            let (cells, out) = SweepConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let rows = sweep(&cells, &out)?;
            print!("{}", dpsynth::experiment::render_table(&rows));
            log::info!("sweep written to {}", out.display());
        }
        Command::Audit {
            data,
            epsilon,
            delta,
            k,
        } => {
            let records =
                load_jsonl(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut report = audit_author_contributions(&records);
            if let Some(k) = k {
                if k == 0 {
                    bail!("--k must be at least 1");
                }
                report.k_max = report.k_max.max(k);
            }
            let claimed = PrivacyBudget::new(epsilon, delta)?;
            let effective = effective_budget(claimed, &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&AuditDocument::new(claimed, &report, &effective))?
            );
        }
        Command::Accountant {
            sigma,
            q,
            steps,
            delta,
        } => {
            let (epsilon, order) = epsilon_after(sigma, q, steps, delta, &default_orders())?;
            let out = serde_json::json!({
                "sigma": sigma,
                "q": q,
                "steps": steps,
                "delta": delta,
                "epsilon": epsilon,
                "best_order": order,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}
