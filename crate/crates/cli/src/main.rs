use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddlab_cli::commands::*;
use ddlab_cli::config::{Direction, SweepAxis};
use ddlab_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "ddlab",
    version,
    about = "Desk-scale diffusion distillation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set sampler.k=2`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the ground-truth distribution.
    GenData,
    /// Train the base denoiser.
    TrainBase,
    /// Distill the base model into a few-step student.
    Distill {
        #[arg(long)]
        method: Option<String>,
    },
    /// Train the attribute slider on the direction's source model.
    TrainLora {
        #[arg(long)]
        direction: Option<String>,
    },
    /// Sample the arm named by `sampler.arm`.
    Sample,
    /// DT-distance curves and trajectory panels.
    DtViz,
    /// Compare base, distilled, hybrid and skip-first arms.
    Eval,
    /// Hybrid sweeps; all axes unless one is given.
    Sweep {
        #[arg(long)]
        axis: Option<String>,
    },
    /// Train a slider on one model and apply it to the other.
    ControlTransfer {
        #[arg(long)]
        direction: Option<String>,
    },
    /// Collate the run directory into report.md.
    Report,
}

fn load(cli: &Cli, extra: &[String]) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("config", "--config is required"))?;
    let mut overrides = cli.overrides.clone();
    overrides.extend_from_slice(extra);
    let mut cfg = RunConfig::load(path, &overrides)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn set(path: &str, value: &Option<String>) -> Vec<String> {
    value
        .iter()
        .map(|v| format!("{path}={}", serde_json::Value::String(v.clone())))
        .collect()
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData => {
            let n = cmd_gen_data(&load(cli, &[])?)?;
            println!("wrote {n} ground-truth samples");
        }
        Command::TrainBase => {
            let log = cmd_train_base(&load(cli, &[])?)?;
            println!(
                "base loss {} -> {}",
                log.initial_loss,
                log.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Distill { method } => {
            let out = cmd_distill(&load(cli, &set("distillation.method", method))?)?;
            for r in &out.log.rounds {
                println!(
                    "round to {} steps: {} log entries",
                    r.student_steps,
                    r.entries.len()
                );
            }
            println!("endpoint mse vs teacher {}", out.fidelity.endpoint_mse);
        }
        Command::TrainLora { direction } => {
            let (first, last) = cmd_train_lora(&load(cli, &set("control.direction", direction))?)?;
            println!("slider loss {first} -> {last}");
        }
        Command::Sample => {
            let r = cmd_sample(&load(cli, &[])?)?;
            println!("{}: {} evals, {:?}", r.name, r.evals, r.report);
        }
        Command::DtViz => {
            let v = cmd_dtviz(&load(cli, &[])?)?;
            println!(
                "first-step DT distance: base {:?}, distilled {:?}",
                v.base.value_at(1),
                v.distilled.value_at(1)
            );
        }
        Command::Eval => {
            for a in cmd_eval(&load(cli, &[])?)? {
                println!(
                    "{:<14} evals {:>3}  frechet {:.4}  diversity {:.4}",
                    a.name, a.evals, a.report.frechet, a.report.sample_diversity
                );
            }
        }
        Command::Sweep { axis } => {
            let axis: Option<SweepAxis> = axis.as_deref().map(str::parse).transpose()?;
            for s in cmd_sweep(&load(cli, &[])?, axis)? {
                for (v, a) in &s.rows {
                    println!(
                        "{}={v}: evals {} diversity {:.4} frechet {:.4}",
                        s.axis.as_str(),
                        a.evals,
                        a.report.sample_diversity,
                        a.report.frechet
                    );
                }
            }
        }
        Command::ControlTransfer { direction } => {
            if let Some(d) = direction {
                d.parse::<Direction>()?;
            }
            let r = cmd_control(&load(cli, &set("control.direction", direction))?)?;
            println!(
                "source shift {} target shift {} ratio {:?}",
                r.source_shift, r.target_shift, r.transfer_ratio
            );
        }
        Command::Report => {
            let dir = match (&cli.out, &cli.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load(cli, &[])?.out_dir,
                (None, None) => {
                    return Err(CliError::config("config", "give --config or --out"));
                }
            };
            println!("wrote {}", cmd_report(&dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
