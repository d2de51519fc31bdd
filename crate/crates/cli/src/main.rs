//! `icon-probe`: synthetic cohorts, registration, atlas building, feature
//! extraction, linear probing and reports, one subcommand per stage.

mod config;
mod run;
mod stages;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icon_probe_core::eval::ResultRow;
use icon_probe_core::Error as CoreError;

use crate::config::{load_config, Config};
use crate::run::{MissingStage, Run};

#[derive(Parser)]
#[command(name = "icon-probe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out, the root of the run directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal knee cohort.
    SynthCohort(Common),
    /// Train the affine registration stack.
    Register(Common),
    /// Build the population atlas from healthy baseline knees.
    Atlas(Common),
    /// Align every scan to the atlas for the configured plans.
    Preprocess(Common),
    /// Extract features for every plan and extractor.
    Features(Common),
    /// Train and test a linear probe per plan, extractor and mode.
    Probe(Common),
    /// Render the probe results in the configured layout.
    Report(Common),
    /// Check the config, data paths and feature dimensions.
    Validate(Common),
    /// Probe registration taps of one leaf at a time.
    Fig1Sweep(Common),
}

/// Stable code for errors that have one.
fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.downcast_ref::<MissingStage>().is_some() {
            return "STAGE-MISSING";
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::DimensionMismatch(_) => "FEAT-DIM-MISMATCH",
                CoreError::UndefinedMetric { .. } => "METRIC-UNDEFINED",
                CoreError::MissingAtlas => "CFG-ATLAS-MISSING",
                CoreError::MissingRecord(_) => "FEAT-MISSING",
                _ => "ERROR",
            };
        }
    }
    "ERROR"
}

fn finish(run: Run, rows: Vec<ResultRow>, cfg: &Config) -> anyhow::Result<()> {
    let layout = cfg.layout()?;
    let verified = run.verified();
    let dir = run.dir.clone();
    let record = run.finish(rows, layout)?;
    let note = if verified { " (rerun, artifacts verified)" } else { "" };
    println!("run {} {}{note}", record.id, dir.display());
    Ok(())
}

fn execute(command: Command) -> anyhow::Result<()> {
    let (stage, common) = match &command {
        Command::SynthCohort(c) => ("synth-cohort", c),
        Command::Register(c) => ("register", c),
        Command::Atlas(c) => ("atlas", c),
        Command::Preprocess(c) => ("preprocess", c),
        Command::Features(c) => ("features", c),
        Command::Probe(c) => ("probe", c),
        Command::Report(c) => ("report", c),
        Command::Validate(c) => ("validate", c),
        Command::Fig1Sweep(c) => ("fig1-sweep", c),
    };
    if stage == "validate" {
        let diags = validate::validate_file(&common.config, common.seed, common.out.as_deref());
        if diags.is_empty() {
            println!("OK");
            return Ok(());
        }
        for d in &diags {
            println!("{d}");
        }
        anyhow::bail!("{} problem(s) found", diags.len());
    }
    let cfg = load_config(&common.config, common.seed, common.out.as_deref())?;
    let problems = cfg.diagnostics();
    if let Some(first) = problems.first() {
        for d in &problems {
            eprintln!("{d}");
        }
        anyhow::bail!("invalid config: {first}");
    }
    match stage {
        "synth-cohort" => finish(stages::synth_cohort(&cfg)?, Vec::new(), &cfg),
        "register" => finish(stages::register(&cfg)?, Vec::new(), &cfg),
        "atlas" => finish(stages::atlas(&cfg)?, Vec::new(), &cfg),
        "preprocess" => finish(stages::preprocess_stage(&cfg)?, Vec::new(), &cfg),
        "features" => finish(stages::features(&cfg)?, Vec::new(), &cfg),
        "probe" => {
            let (run, rows) = stages::probe(&cfg)?;
            finish(run, rows, &cfg)
        }
        "report" => {
            let (run, text, rows) = stages::report(&cfg)?;
            print!("{text}");
            finish(run, rows, &cfg)
        }
        "fig1-sweep" => {
            let (run, text, rows) = stages::fig1_sweep(&cfg)?;
            print!("{text}");
            let record = run.finish(rows, icon_probe_core::eval::ReportLayout::Fig1Sweep)?;
            println!("run {}", record.id);
            Ok(())
        }
        _ => unreachable!("every subcommand is matched above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}
