use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use regate::eval::{emit_report, evaluate, fmt_sig9, RunRecords};
use regate::pipeline::{build_bank_from_manifest, describe_bank, run, write_run};
use regate::retrieval::MemoryBank;
use regate::store::Manifest;
use regate::synth::generate_dataset;
use regate::PipelineConfig;

#[derive(Parser)]
#[command(name = "regate", version, about = "Uncertainty-gated region retrieval")]
struct Cli {
    /// JSON config file layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set gate.policy=never`.
    #[arg(long = "set", global = true, value_name = "K=V")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Base directory for the relative paths in the config.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth,
    /// Build or inspect the memory bank.
    Bank {
        #[command(subcommand)]
        action: BankAction,
    },
    /// Gate, retrieve and fuse every evaluation scene.
    Run,
    /// Summarise a run into report files.
    Eval,
    /// Print the effective config as JSON.
    Config,
}

#[derive(Subcommand)]
enum BankAction {
    /// Build the bank from the manifest's bank split.
    Build,
    /// Print a summary of a saved bank.
    Inspect,
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let paths = cfg.paths.resolved(&cli.out);

    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Synth => {
            let manifest = generate_dataset(&cfg.synth, &paths.data_dir)?;
            println!(
                "wrote {} scenes to {}",
                manifest.scenes.len(),
                paths.data_dir.display()
            );
        }
        Command::Bank {
            action: BankAction::Build,
        } => {
            let manifest = Manifest::load(&paths.manifest)?;
            let bank = build_bank_from_manifest(&manifest, &cfg)?;
            bank.save(&paths.bank_dir)?;
            println!(
                "bank: {} scenes, {} entries -> {}",
                bank.scenes.len(),
                bank.entries.len(),
                paths.bank_dir.display()
            );
        }
        Command::Bank {
            action: BankAction::Inspect,
        } => {
            let bank = MemoryBank::load(&paths.bank_dir)?;
            print!("{}", describe_bank(&bank));
        }
        Command::Run => {
            let manifest = Manifest::load(&paths.manifest)?;
            let bank = MemoryBank::load(&paths.bank_dir)?;
            let out = run(&manifest, &bank, &cfg)?;
            write_run(&out, &paths.out_dir)?;
            let passed = out.records.iter().filter(|r| r.passed_gate).count();
            println!(
                "{}: {} of {} regions fused -> {}",
                out.policy,
                passed,
                out.records.len(),
                paths.out_dir.display()
            );
        }
        Command::Eval => {
            let records = RunRecords::load(paths.out_dir.join("records.json"))?;
            let report = evaluate(&records.records, &records.policy)?;
            emit_report(&report, &paths.out_dir)?;
            println!(
                "{}: cost {} ({} of {}), mean delta IoU {} targeted, {} always-on",
                report.policy,
                fmt_sig9(report.cost.fraction),
                report.cost.retrieved,
                report.cost.total,
                fmt_sig9(report.targeted.mean_delta_iou),
                fmt_sig9(report.always_on.mean_delta_iou),
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
