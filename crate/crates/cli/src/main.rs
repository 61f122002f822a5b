use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tame_core::harness::report::{evaluate_checkpoint, g6, summary_json};
use tame_core::harness::{run_experiment, run_sweep, ExperimentConfig, ExperimentResult};

#[derive(Parser, Debug)]
#[command(
    name = "tame",
    version,
    about = "Task-agnostic continual learning with expert networks"
)]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run one experiment per value of a config key. `Cp` reuses a single pass over the stream.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved run on its tasks' test sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// MNIST directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print every config key with its default value.
    Defaults {
        /// Start from the small synthetic preset.
        #[arg(long)]
        synthetic: bool,
    },
}

fn load_config(
    cli: &Cli,
    path: Option<&PathBuf>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override '{o}' is not key=value");
        };
        cfg.set(k, v).with_context(|| format!("override '{o}'"))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn print_result(out: &mut impl Write, label: &str, r: &ExperimentResult) -> io::Result<()> {
    writeln!(
        out,
        "{label}ACC {} | pre-prune {} | experts {} | params {} -> {} | selector {} | {:.1}s",
        g6(r.acc),
        g6(r.pre_prune_acc),
        r.expert_count,
        r.total_params,
        r.surviving_params,
        g6(r.selector_accuracy),
        r.wall_time_s
    )
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match run(&cli) {
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            Ok(())
        }
        other => other,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match &cli.command {
        Command::Run { config, overrides } => {
            let cfg = load_config(cli, config.as_ref(), overrides)?;
            let r = run_experiment(&cfg)?;
            print_result(&mut out, "", &r)?;
            if cfg.out.is_none() {
                writeln!(out, "{}", serde_json::to_string_pretty(&summary_json(&r))?)?;
            }
        }
        Command::Sweep {
            param,
            values,
            config,
            overrides,
        } => {
            let cfg = load_config(cli, config.as_ref(), overrides)?;
            let results = run_sweep(&cfg, param, values)?;
            for (v, r) in values.iter().zip(&results) {
                print_result(&mut out, &format!("{param}={v}: "), r)?;
            }
        }
        Command::Eval { checkpoint, data } => {
            let (row, acc) = evaluate_checkpoint(checkpoint, data.as_deref())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            for (t, a) in row.iter().enumerate() {
                if let Some(a) = a {
                    writeln!(out, "task {t}: {}", g6(*a))?;
                }
            }
            writeln!(out, "ACC {}", g6(acc))?;
        }
        Command::Defaults { synthetic } => {
            let cfg = if *synthetic {
                ExperimentConfig::synthetic_default()
            } else {
                ExperimentConfig::default()
            };
            write!(out, "{}", cfg.to_kv_string())?;
        }
    }
    Ok(())
}
