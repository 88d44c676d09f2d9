use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tablegen_cli::run::RunOutcome;
use tablegen_cli::{cmd_evaluate, cmd_replay_check, cmd_run, cmd_stats, render_stats, ExperimentConfig, Overrides};
use tablegen_core::backend::API_KEY_ENV;
use tablegen_core::dataset::CorpusSchema;
use tablegen_core::metrics::{render_summary, Averaging};

#[derive(Parser)]
#[command(name = "tablegen", version, about = "Text-to-table generation experiments with LLMs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, optionally refine, and score every selected example.
    Run(RunArgs),
    /// Score a predictions file against a corpus, without model calls.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "generic")]
        schema: CorpusSchema,
        #[arg(long, value_enum, default_value = "macro")]
        averaging: AveragingArg,
        /// Write the report JSON here as well as printing a summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print corpus statistics.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "generic")]
        schema: CorpusSchema,
        /// Write the statistics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a transcript twice and check the reports are byte-identical.
    ReplayCheck {
        #[command(flatten)]
        run: RunArgs,
        /// Report the replays must also reproduce.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AveragingArg {
    Macro,
    Micro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Macro => Averaging::Macro,
            AveragingArg::Micro => Averaging::Micro,
        }
    }
}

#[derive(Args)]
#[command(after_help = format!("The API key for the http backend is read from ${API_KEY_ENV}."))]
struct RunArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    schema: Option<CorpusSchema>,
    /// zero_shot, one_shot, zero_shot_cot, one_shot_cot or subtask_guided.
    #[arg(long)]
    strategy: Option<String>,
    /// none, table, row or cell.
    #[arg(long)]
    feedback_level: Option<String>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// http or replay.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    /// Output directory; each run writes to a fresh subdirectory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> Result<ExperimentConfig, String> {
        let overrides = Overrides {
            corpus: self.corpus,
            schema: self.schema,
            strategy: self.strategy,
            feedback_level: self.feedback_level,
            max_iterations: self.max_iterations,
            backend: self.backend,
            endpoint: self.endpoint,
            model: self.model,
            transcript: self.transcript,
            workers: self.workers,
            limit: self.limit,
            out: self.out,
        };
        ExperimentConfig::from_sources(self.config.as_deref(), overrides).map_err(|e| e.to_string())
    }
}

/// Exit status for usage and setup errors, distinct from "some examples failed".
const SETUP_FAILURE: u8 = 2;

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(SETUP_FAILURE)
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn print_run(outcome: &RunOutcome) {
    let m = &outcome.manifest;
    if let Some(report) = &outcome.report {
        print!("{}", render_summary(report));
    }
    for ex in m.examples.iter().filter(|e| !e.status.is_ok()) {
        if let tablegen_cli::ExampleStatus::Failed { kind, message, .. } = &ex.status {
            eprintln!("failed {}: {kind}: {message}", ex.id);
        }
    }
    println!("run {}: {} ok, {} failed -> {}", m.run_id, m.n_ok, m.n_failed, outcome.run_dir.display());
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => {
            let config = match args.resolve() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match cmd_run(&config) {
                Ok(outcome) => {
                    print_run(&outcome);
                    if outcome.manifest.n_failed == 0 {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Evaluate { predictions, corpus, schema, averaging, out } => {
            match cmd_evaluate(&predictions, &corpus, schema, averaging.into()) {
                Ok(report) => {
                    print!("{}", render_summary(&report));
                    if let Some(path) = out {
                        if let Err(e) = write_file(&path, &format!("{}\n", report.to_json())) {
                            return fail(e);
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Stats { corpus, schema, out } => match cmd_stats(&corpus, schema) {
            Ok(stats) => {
                print!("{}", render_stats(&stats));
                if let Some(path) = out {
                    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
                    if let Err(e) = write_file(&path, &format!("{json}\n")) {
                        return fail(e);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::ReplayCheck { run, report } => {
            let Some(transcript) = run.transcript.clone() else {
                return fail("replay-check needs --transcript");
            };
            let config = match (RunArgs { backend: Some("replay".into()), ..run }).resolve() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match cmd_replay_check(&config, &transcript, report.as_deref()) {
                Ok(check) => {
                    for dir in &check.runs {
                        println!("replayed into {}", dir.display());
                    }
                    if check.passed() {
                        println!("replay-check: identical reports");
                        ExitCode::SUCCESS
                    } else {
                        println!(
                            "replay-check: reports differ (first differing line {})",
                            check.first_difference.map_or("?".into(), |l| l.to_string())
                        );
                        ExitCode::FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
    }
}
