mod config;
mod pool;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use formbench_core::datasets::validate_task_file;
use formbench_core::dialogue::TerminationPolicy;
use formbench_core::TaskKind;

use config::{ConfigInvalid, ExperimentConfig, Overrides, Purpose};
use run::MissingBaseline;

#[derive(Parser)]
#[command(name = "formbench", version, about = "Run and score format-selection prompting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single-model strategies (cot, autoform, forced_format, two_step_*).
    RunReason {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Multi-agent dialogue strategies.
    RunDialogue {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_name = "DIR")]
        baseline: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        max_rounds: Option<usize>,
        #[arg(long, value_parser = parse_policy)]
        policy: Option<TerminationPolicy>,
        /// Require a ΔTokens column (fails without a baseline).
        #[arg(long)]
        delta: bool,
    },
    /// Consolidate run directories into markdown and CSV tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Check a JSONL task file invariant by invariant.
    ValidateData {
        path: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_name = "N")]
        expected_count: Option<usize>,
    },
}

#[derive(Args)]
struct RunFlags {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a backend's endpoint URL.
    #[arg(long = "backend", value_name = "NAME=URL", value_parser = parse_backend_url)]
    backends: Vec<(String, String)>,
    #[arg(long, value_name = "ID")]
    tokenizer: Option<String>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            runs: self.runs,
            out: self.out.clone(),
            backend_urls: self.backends.clone(),
            tokenizer: self.tokenizer.clone(),
            ..Overrides::default()
        }
    }
}

fn parse_backend_url(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((name, url)) if !name.is_empty() && !url.is_empty() => Ok((name.to_string(), url.to_string())),
        _ => Err(format!("expected NAME=URL, got `{s}`")),
    }
}

fn parse_policy(s: &str) -> Result<TerminationPolicy, String> {
    s.parse()
}

fn print_outcome(outcome: &run::RunOutcome) -> ExitCode {
    println!("{}", outcome.dir.display());
    for failure in &outcome.report.failures {
        eprintln!("failed: {failure}");
    }
    if outcome.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::RunReason { flags } => {
            let config = ExperimentConfig::load(&flags.config, &flags.overrides(), Purpose::Reason)?;
            Ok(print_outcome(&run::run_reason(&config)?))
        }
        Command::RunDialogue { flags, baseline, max_rounds, policy, delta } => {
            let overrides = Overrides { baseline, max_rounds, policy, ..flags.overrides() };
            let config = ExperimentConfig::load(&flags.config, &overrides, Purpose::Dialogue)?;
            Ok(print_outcome(&run::run_dialogue_cmd(&config, delta)?))
        }
        Command::Report { runs, out } => {
            let consolidated = report::consolidate(&runs)?;
            for warning in &consolidated.warnings {
                eprintln!("warning: {warning}");
            }
            print!("{}", consolidated.markdown);
            if let Some(out) = out {
                report::write(&consolidated, &out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateData { path, task, expected_count } => {
            let report = validate_task_file(&path, task, expected_count);
            for check in &report.checks {
                let status = if check.passed { "PASS" } else { "FAIL" };
                if check.detail.is_empty() {
                    println!("{status} {}", check.name);
                } else {
                    println!("{status} {}: {}", check.name, check.detail);
                }
            }
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigInvalid>() || e.is::<MissingBaseline>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
