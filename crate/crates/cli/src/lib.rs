//! Command-line harness for the kdslu pipeline: stage commands writing run
//! directories, and the ablation table.

pub mod cli;
pub mod commands;
pub mod report;
pub mod rundir;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use kdslu_core::config::{ExperimentConfig, Preset};
use kdslu_core::Error;

use cli::{Cli, Command};
use rundir::{RunDir, RunRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISSING_DEPENDENCY: i32 = 2;
pub const EXIT_BAD_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::MissingDependency { .. }) => return EXIT_MISSING_DEPENDENCY,
            Some(Error::Config(_)) => return EXIT_BAD_CONFIG,
            _ => {}
        }
    }
    EXIT_RUNTIME
}

/// Resolves the experiment config from the file, preset, seed and overrides.
pub fn resolve_config(cli: &Cli, dotted: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut overrides = dotted.to_vec();
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?,
        None => String::new(),
    };
    let preset = cli.preset.map(Preset::from).unwrap_or_default();
    Ok(ExperimentConfig::from_toml(&text, preset, &overrides)?)
}

pub fn out_root(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(commands::default_out_root)
}

/// Executes a parsed command and returns its record.
pub fn execute(cli: &Cli, dotted: &[(String, String)]) -> Result<RunRecord> {
    let cfg = resolve_config(cli, dotted)?;
    let dir = RunDir::open(&out_root(cli), &cfg).context("opening run directory")?;
    match &cli.command {
        Command::Synth => commands::synth(&dir, &cfg),
        Command::FitCodebook => commands::fit_codebook_cmd(&dir, &cfg),
        Command::PretrainKd => commands::pretrain_kd(&dir, &cfg),
        Command::PretrainAm => commands::pretrain_am(&dir, &cfg),
        Command::Finetune(a) => commands::finetune(&dir, &cfg, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&dir, &cfg, a),
        Command::Ablate(a) => {
            let (rec, table) = commands::ablate(&dir, &cfg, a)?;
            print!("{}", table.to_text());
            Ok(rec)
        }
    }
}

/// Full entry point: parses `args`, runs, prints the final metrics as one
/// JSON line, and returns the process exit code.
pub fn main_with(args: Vec<String>) -> i32 {
    let (rest, dotted) = cli::split_dotted_overrides(args);
    let parsed = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&parsed, &dotted) {
        Ok(rec) => {
            let summary = serde_json::json!({
                "run_id": rec.run_id,
                "stage": rec.stage,
                "final_metrics": rec.final_metrics,
            });
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
