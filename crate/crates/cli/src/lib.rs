//! `mgt-lab`: configuration parsing, subcommand dispatch and result files.

pub mod configfile;
pub mod emit;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mgt_core::experiments::{
    run_ablation, run_beta_analysis, run_depth_scaling, run_rank_experiment, run_train,
    ExperimentOutput,
};
use mgt_core::report::summarize;
use mgt_core::verify::{run_verify, VerifySizes};
use mgt_core::{ExperimentConfig, MgtError, Result};

pub use configfile::{parse_config, parse_config_text};

#[derive(Debug, Parser)]
#[command(
    name = "mgt-lab",
    version,
    about = "MGT verification suite and desk-scale experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Verify,
    Train,
    RankScan,
    Ablate,
    BetaStats,
    DepthScale,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized property suite for the block mathematics.
    Verify(RunArgs),
    /// Train one configuration for every seed.
    Train(RunArgs),
    /// Effective-rank profiles of Standard vs. MGT across depths.
    RankScan(RunArgs),
    /// Four-variant ablation and synergy coefficient.
    Ablate(RunArgs),
    /// β statistics of a deep MGT at training checkpoints.
    BetaStats(RunArgs),
    /// Parameter-matched depth sweep.
    DepthScale(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print one line per finished run to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// `key=value` overrides applied after the file.
    pub overrides: Vec<String>,
}

/// Fully parsed command line.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub subcommand: CommandKind,
    pub config_path: PathBuf,
    pub overrides: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub verbosity: u8,
}

impl From<Cli> for CliConfig {
    fn from(cli: Cli) -> Self {
        let (subcommand, args) = match cli.command {
            Command::Verify(a) => (CommandKind::Verify, a),
            Command::Train(a) => (CommandKind::Train, a),
            Command::RankScan(a) => (CommandKind::RankScan, a),
            Command::Ablate(a) => (CommandKind::Ablate, a),
            Command::BetaStats(a) => (CommandKind::BetaStats, a),
            Command::DepthScale(a) => (CommandKind::DepthScale, a),
        };
        Self {
            subcommand,
            config_path: args.config,
            overrides: args.overrides,
            output_dir: args.out,
            verbosity: args.verbose,
        }
    }
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Verify => "verify",
            Self::Train => "train",
            Self::RankScan => "rank-scan",
            Self::Ablate => "ablate",
            Self::BetaStats => "beta-stats",
            Self::DepthScale => "depth-scale",
        }
    }
}

/// Exit status plus what to print.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: Vec<String>,
}

fn failure(subcommand: CommandKind, code: &str, message: &str, extra: serde_json::Value) -> String {
    json!({
        "status": "failed",
        "subcommand": subcommand.name(),
        "code": code,
        "message": message,
        "detail": extra,
    })
    .to_string()
}

/// Runs one subcommand; never panics on user error.
pub fn dispatch(cli: &CliConfig) -> Outcome {
    match execute(cli) {
        Ok(outcome) => outcome,
        Err(e) => Outcome {
            code: 1,
            stdout: vec![failure(
                cli.subcommand,
                e.code(),
                &e.to_string(),
                json!(null),
            )],
        },
    }
}

fn resolve_config(cli: &CliConfig) -> Result<ExperimentConfig> {
    let mut config = parse_config(&cli.config_path, &cli.overrides)?;
    if let Some(out) = &cli.output_dir {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn execute(cli: &CliConfig) -> Result<Outcome> {
    let config = resolve_config(cli)?;
    let dir = config.output_dir.clone();
    emit::check_writable(&dir)?;
    emit::write_atomic(&dir.join("config.echo"), &config.echo())?;
    if cli.subcommand == CommandKind::Verify {
        return verify(cli, &config, &dir);
    }
    let output = match cli.subcommand {
        CommandKind::Train => run_train(&config)?,
        CommandKind::RankScan => run_rank_experiment(&config)?,
        CommandKind::Ablate => run_ablation(&config)?,
        CommandKind::BetaStats => run_beta_analysis(&config)?,
        CommandKind::DepthScale => run_depth_scaling(&config)?,
        CommandKind::Verify => unreachable!("handled above"),
    };
    if cli.verbosity > 0 {
        for r in &output.runs {
            eprintln!(
                "run {} variant={} depth={} seed={} final_val_loss={:?} wall={:.1}s{}",
                r.config_hash,
                r.variant,
                r.depth,
                r.seed,
                r.final_record().map(|x| x.val_loss),
                r.wall_seconds,
                r.aborted
                    .as_deref()
                    .map(|a| format!(" ABORTED: {a}"))
                    .unwrap_or_default(),
            );
        }
    }
    let written = emit::emit_experiment(&dir, &output)?;
    Ok(report(cli.subcommand, &output, &written))
}

fn report(kind: CommandKind, output: &ExperimentOutput, written: &[PathBuf]) -> Outcome {
    let summary = summarize(output.experiment, &output.records);
    let mut stdout: Vec<String> = written
        .iter()
        .map(|p| format!("wrote {}", p.display()))
        .collect();
    let derived = &summary["derived"];
    match kind {
        CommandKind::Ablate => stdout.push(format!(
            "synergy_coefficient={} ({})",
            derived["synergy_coefficient"], derived["synergy_sign"]
        )),
        CommandKind::RankScan => stdout.push(format!("rho_check={}", derived["rho_check"])),
        _ => {}
    }
    let aborted: Vec<&str> = output
        .runs
        .iter()
        .filter(|r| r.aborted.is_some())
        .map(|r| r.config_hash.as_str())
        .collect();
    if !aborted.is_empty() {
        stdout.push(failure(
            kind,
            "run_aborted",
            "one or more runs aborted on a numerical failure",
            json!({ "runs": aborted }),
        ));
        return Outcome { code: 1, stdout };
    }
    if kind == CommandKind::RankScan && derived["rho_check"]["passed"] != json!(true) {
        stdout.push(failure(
            kind,
            "rho_check",
            "seed-averaged rank preservation of MGT is below Standard at the largest depth",
            derived["rho_check"].clone(),
        ));
        return Outcome { code: 1, stdout };
    }
    Outcome { code: 0, stdout }
}

fn verify(cli: &CliConfig, config: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let report = run_verify(config.seeds[0], VerifySizes::default())?;
    let summary = json!({
        "experiment": "verify",
        "passed": report.all_passed(),
        "families": report.families,
    });
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| MgtError::Io(e.to_string()))?;
    text.push('\n');
    emit::write_atomic(&dir.join("summary.json"), &text)?;
    let mut stdout: Vec<String> = report
        .families
        .iter()
        .map(|f| {
            format!(
                "{:<24} {:>4}/{:<4} worst={:e} tolerance={:e}",
                f.name, f.passed, f.cases, f.worst, f.tolerance
            )
        })
        .collect();
    if report.all_passed() {
        return Ok(Outcome { code: 0, stdout });
    }
    let failed: Vec<&str> = report
        .families
        .iter()
        .filter(|f| !f.ok())
        .map(|f| f.name)
        .collect();
    stdout.push(failure(
        cli.subcommand,
        "property_failed",
        "property suite failed",
        json!({ "families": failed }),
    ));
    Ok(Outcome { code: 1, stdout })
}
