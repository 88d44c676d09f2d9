//! Experiment runs: generate → refine → score over a corpus, with every
//! artifact written under a fresh run directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use tablegen_core::backend::{
    BackendError, CallLedger, CallSettings, ChatBackend, HttpBackend, LedgerTotals, ModelClient, ReplayBackend,
    TranscriptSink,
};
use tablegen_core::dataset::{parse_corpus, DatasetError, ExperimentExample, Split};
use tablegen_core::metrics::{aggregate, EvalReport, ExampleScores, MetricsError, ReportConfig};
use tablegen_core::prompt::{run_generation, PromptError, PromptTemplates, Strategy};
use tablegen_core::refine::{refine, RefineError, RefinementTrace, TraceEntry};
use tablegen_core::table::{serialize_grid, Table, TableError};

use crate::config::{BackendKind, ExperimentConfig};
use crate::evaluate::{score_table, PredictionLine};

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot load corpus {path}: {source}")]
    CorpusUnloadable { path: PathBuf, source: DatasetError },
    #[error("cannot set up backend: {0}")]
    Backend(#[from] BackendError),
    #[error("cannot load prompt templates: {0}")]
    Templates(#[from] PromptError),
    #[error("artifact I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Why one example failed; the run itself continues.
#[derive(Debug, Error)]
enum ExampleError {
    #[error("generation of {table:?} failed: {source}")]
    Generate { table: String, source: PromptError },
    #[error("refinement of {table:?} failed: {source}")]
    Refine { table: String, source: RefineError },
    #[error("scoring of {table:?} failed: {source}")]
    Score { table: String, source: MetricsError },
    #[error("worker panicked: {0}")]
    Panic(String),
}

fn backend_kind(e: &BackendError) -> &'static str {
    match e {
        BackendError::BackendUnavailable { .. } => "BackendUnavailable",
        BackendError::ContextOverflow(_) => "ContextOverflow",
        BackendError::MissingScript(_) => "MissingScript",
        BackendError::Http { .. } => "Http",
        BackendError::InvalidResponse(_) => "InvalidResponse",
        BackendError::IoFailure(_) => "IoFailure",
        BackendError::MalformedTranscript { .. } => "MalformedTranscript",
    }
}

fn table_kind(e: &TableError) -> &'static str {
    match e {
        TableError::EmptyInput => "EmptyInput",
        TableError::HeaderlessTable(_) => "HeaderlessTable",
        TableError::UnrepairableTable { .. } => "UnrepairableTable",
        TableError::EmptySchema => "EmptySchema",
        TableError::Invalid(_) => "InvalidTable",
    }
}

fn prompt_kind(e: &PromptError) -> &'static str {
    match e {
        PromptError::MissingShotExample(_) => "MissingShotExample",
        PromptError::EmptySchema(_) => "EmptySchema",
        PromptError::NoTableFound => "NoTableFound",
        PromptError::Table(t) => table_kind(t),
        PromptError::Backend(b) => backend_kind(b),
        PromptError::UnknownPlaceholder { .. } => "UnknownPlaceholder",
        PromptError::Io(_) => "Io",
    }
}

impl ExampleError {
    fn kind(&self) -> &'static str {
        match self {
            ExampleError::Generate { source, .. } => prompt_kind(source),
            ExampleError::Refine { source, .. } => match source {
                RefineError::InvalidConfig => "InvalidConfig",
                RefineError::Backend(b) => backend_kind(b),
                RefineError::Table(t) => table_kind(t),
                RefineError::Prompt(p) => prompt_kind(p),
            },
            ExampleError::Score { source, .. } => match source {
                MetricsError::GoldNotNumeric { .. } => "GoldNotNumeric",
                MetricsError::EmptyInput => "EmptyInput",
            },
            ExampleError::Panic(_) => "Panic",
        }
    }

    fn stage(&self) -> &'static str {
        match self {
            ExampleError::Generate { .. } => "generate",
            ExampleError::Refine { .. } => "refine",
            ExampleError::Score { .. } => "score",
            ExampleError::Panic(_) => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ExampleStatus {
    Ok,
    Failed { kind: String, stage: String, message: String },
}

impl ExampleStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ExampleStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    #[serde(flatten)]
    pub status: ExampleStatus,
    /// Completed model calls made for this example, failed or not.
    pub calls: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub transcript: PathBuf,
    pub trace: PathBuf,
    pub predictions: PathBuf,
    /// Absent when no example succeeded.
    pub report: Option<PathBuf>,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub corpus_sha256: String,
    pub started_at: String,
    pub finished_at: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub examples: Vec<ExampleRecord>,
    pub ledger: LedgerTotals,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: Option<EvalReport>,
}

/// One line of the trace artifact: a refinement verdict plus its location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub example_id: String,
    pub table: String,
    #[serde(flatten)]
    pub entry: TraceEntry,
}

struct ExampleOutput {
    tables: Vec<Table>,
    traces: Vec<(String, RefinementTrace)>,
    scores: ExampleScores,
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    templates: &'a PromptTemplates,
    strategy: &'a Strategy,
    client: &'a ModelClient,
}

fn process_example(cx: &RunContext<'_>, example: &ExperimentExample) -> Result<ExampleOutput, ExampleError> {
    let mut out = ExampleOutput {
        tables: Vec::new(),
        traces: Vec::new(),
        scores: ExampleScores { example_id: example.id.clone(), tables: Vec::new() },
    };
    for target in &example.targets {
        let table_name = || target.name.clone();
        let generation = run_generation(cx.templates, example, target, cx.strategy, cx.client)
            .map_err(|source| ExampleError::Generate { table: table_name(), source })?;
        let table = match &cx.config.refinement {
            Some(rc) => {
                let r = refine(cx.templates, cx.client, &example.id, &example.passage, &generation.table, target, rc)
                    .map_err(|source| ExampleError::Refine { table: table_name(), source })?;
                out.traces.push((target.name.clone(), r.trace));
                r.final_table
            }
            None => generation.table,
        };
        let score = score_table(&table, target).map_err(|source| ExampleError::Score { table: table_name(), source })?;
        out.scores.tables.extend(score);
        out.tables.push(table);
    }
    Ok(out)
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

/// Selects the examples to run, in corpus order: split and id filters,
/// minus the demonstration example, then the limit.
fn select_examples<'c>(
    config: &ExperimentConfig,
    corpus: &'c [ExperimentExample],
    shot_id: Option<&str>,
) -> Result<Vec<&'c ExperimentExample>, RunError> {
    if let Some(ids) = &config.example_ids {
        if let Some(missing) = ids.iter().find(|id| !corpus.iter().any(|e| &e.id == *id)) {
            return Err(RunError::ConfigInvalid(format!("example id {missing:?} is not in the corpus")));
        }
    }
    let selected: Vec<_> = corpus
        .iter()
        .filter(|e| config.split.is_none_or(|s| e.split == s))
        .filter(|e| config.example_ids.as_ref().is_none_or(|ids| ids.contains(&e.id)))
        .filter(|e| Some(e.id.as_str()) != shot_id)
        .take(config.limit.unwrap_or(usize::MAX))
        .collect();
    if selected.is_empty() {
        return Err(RunError::ConfigInvalid("no examples left after filtering".into()));
    }
    Ok(selected)
}

fn resolve_strategy(config: &ExperimentConfig, corpus: &[ExperimentExample]) -> Result<Strategy, RunError> {
    if !config.strategy.needs_shot() {
        return Ok(Strategy::zero_shot(config.strategy));
    }
    let shot = match &config.shot_example_id {
        Some(id) => corpus
            .iter()
            .find(|e| &e.id == id)
            .ok_or_else(|| RunError::ConfigInvalid(format!("shot example {id:?} is not in the corpus")))?,
        None => corpus.iter().find(|e| e.split == Split::Train).ok_or_else(|| {
            RunError::ConfigInvalid(format!("{} needs a shot example and the corpus has no train split", config.strategy))
        })?,
    };
    Ok(Strategy::with_shot(config.strategy, shot.clone()))
}

/// Stable identifier for a (config, corpus) pair. The output directory is
/// left out so the same experiment gets the same id wherever it is written.
pub fn run_id(config: &ExperimentConfig, corpus_sha256: &str) -> String {
    let mut echo = config.clone();
    echo.out_dir = PathBuf::new();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&echo).expect("config serializes"));
    h.update(b"\n");
    h.update(corpus_sha256.as_bytes());
    hex::encode(h.finalize())[..12].to_string()
}

/// Creates `out/<id>`, or `out/<id>-2`, `-3`, … if taken: earlier runs are
/// never overwritten.
fn create_run_dir(out_dir: &Path, id: &str) -> Result<(String, PathBuf), RunError> {
    std::fs::create_dir_all(out_dir)?;
    for n in 1.. {
        let name = if n == 1 { id.to_string() } else { format!("{id}-{n}") };
        let dir = out_dir.join(&name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok((name, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create_new(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_new(path: &Path, text: &str) -> Result<(), RunError> {
    let mut f = File::create_new(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Builds the backend named by the config. The API key, if any, comes from
/// the environment only.
pub fn build_backend(config: &ExperimentConfig) -> Result<Arc<dyn ChatBackend>, RunError> {
    let b = &config.backend;
    Ok(match b.kind {
        BackendKind::Http => {
            let endpoint = b.endpoint.clone().ok_or_else(|| RunError::ConfigInvalid("missing endpoint".into()))?;
            Arc::new(HttpBackend::from_env(endpoint, Duration::from_secs(b.timeout_secs))?)
        }
        BackendKind::Replay => {
            let path = b.transcript.as_ref().ok_or_else(|| RunError::ConfigInvalid("missing transcript".into()))?;
            Arc::new(ReplayBackend::from_transcript(path)?)
        }
    })
}

/// Runs the experiment with the backend named in the config.
pub fn cmd_run(config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    // Load the corpus first so an unreadable corpus is reported as such even
    // when the backend would also fail.
    let corpus = load_corpus_bytes(config)?;
    let strategy = resolve_strategy(config, &corpus.1)?;
    select_examples(config, &corpus.1, strategy.shot_example.as_ref().map(|e| e.id.as_str()))?;
    let backend = build_backend(config)?;
    run_loaded(config, corpus, backend)
}

fn load_corpus_bytes(config: &ExperimentConfig) -> Result<(Vec<u8>, Vec<ExperimentExample>), RunError> {
    let unloadable = |source| RunError::CorpusUnloadable { path: config.corpus.clone(), source };
    let bytes = std::fs::read(&config.corpus).map_err(|e| unloadable(DatasetError::from(e)))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| {
        unloadable(DatasetError::from(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    })?;
    let corpus = parse_corpus(&text, config.schema).map_err(unloadable)?;
    if corpus.is_empty() {
        return Err(unloadable(DatasetError::EmptyCorpus));
    }
    Ok((bytes, corpus))
}

/// Runs the experiment against an explicit backend (used for scripted runs).
pub fn cmd_run_with_backend(config: &ExperimentConfig, backend: Arc<dyn ChatBackend>) -> Result<RunOutcome, RunError> {
    run_loaded(config, load_corpus_bytes(config)?, backend)
}

fn run_loaded(
    config: &ExperimentConfig,
    (bytes, corpus): (Vec<u8>, Vec<ExperimentExample>),
    backend: Arc<dyn ChatBackend>,
) -> Result<RunOutcome, RunError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let corpus_sha256 = hex::encode(Sha256::digest(&bytes));
    let templates = match &config.templates_dir {
        Some(dir) => PromptTemplates::from_dir(dir)?,
        None => PromptTemplates::builtin(),
    };
    let strategy = resolve_strategy(config, &corpus)?;
    let shot_id = strategy.shot_example.as_ref().map(|e| e.id.as_str());
    let examples = select_examples(config, &corpus, shot_id)?;

    let (run_id, run_dir) = create_run_dir(&config.out_dir, &run_id(config, &corpus_sha256))?;
    let transcript_path = run_dir.join(TRANSCRIPT_FILE);
    let ledger = Arc::new(CallLedger::new());
    let settings = CallSettings {
        model: config.backend.model.clone(),
        temperature: config.backend.temperature,
        max_output_tokens: config.backend.max_output_tokens,
    };
    let client = ModelClient::new(backend, settings)
        .with_ledger(ledger.clone())
        .with_transcript(Arc::new(TranscriptSink::open(&transcript_path)?));
    let cx = RunContext { config, templates: &templates, strategy: &strategy, client: &client };

    let results: Vec<Mutex<Option<Result<ExampleOutput, ExampleError>>>> =
        examples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..config.workers.min(examples.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(example) = examples.get(i) else { break };
                let result = catch_unwind(AssertUnwindSafe(|| process_example(&cx, example)))
                    .unwrap_or_else(|p| Err(ExampleError::Panic(panic_message(p))));
                *results[i].lock().unwrap() = Some(result);
            });
        }
    });

    // Single-threaded assembly, in corpus order.
    let mut records = Vec::new();
    let mut scores = Vec::new();
    let mut predictions = Vec::new();
    let mut trace_lines = Vec::new();
    for (example, slot) in examples.iter().zip(results) {
        let result = slot.into_inner().unwrap().expect("every example is processed");
        let totals = ledger.totals_where(|e| e.example_id == example.id);
        let status = match result {
            Ok(out) => {
                for table in &out.tables {
                    predictions.push(PredictionLine {
                        id: example.id.clone(),
                        table: table.name.clone(),
                        grid: serialize_grid(table),
                    });
                }
                for (table, trace) in out.traces {
                    trace_lines.extend(trace.entries().map(|entry| TraceLine {
                        example_id: example.id.clone(),
                        table: table.clone(),
                        entry: entry.clone(),
                    }));
                }
                if !out.scores.tables.is_empty() {
                    scores.push(out.scores);
                }
                ExampleStatus::Ok
            }
            Err(e) => ExampleStatus::Failed { kind: e.kind().into(), stage: e.stage().into(), message: e.to_string() },
        };
        records.push(ExampleRecord {
            id: example.id.clone(),
            status,
            calls: totals.calls,
            tokens_in: totals.tokens_in,
            tokens_out: totals.tokens_out,
        });
    }

    let trace_path = run_dir.join(TRACE_FILE);
    write_jsonl(&trace_path, &trace_lines)?;
    let predictions_path = run_dir.join(PREDICTIONS_FILE);
    write_jsonl(&predictions_path, &predictions)?;

    let totals = ledger.totals();
    let report = aggregate(&scores, config.averaging).ok().map(|aggregate| EvalReport {
        config: ReportConfig {
            strategy: config.strategy.as_str().into(),
            feedback_level: config.refinement.as_ref().map(|r| r.granularity.to_string()),
            max_iterations: config.refinement.as_ref().map(|r| r.max_iterations),
            averaging: config.averaging,
        },
        examples: scores,
        aggregate,
        ledger: Some(totals),
    });
    let report_path = match &report {
        Some(r) => {
            let path = run_dir.join(REPORT_FILE);
            write_new(&path, &format!("{}\n", r.to_json()))?;
            Some(path)
        }
        None => None,
    };

    let n_ok = records.iter().filter(|r| r.status.is_ok()).count();
    let manifest = RunManifest {
        run_id,
        config: config.clone(),
        corpus_sha256,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        n_ok,
        n_failed: records.len() - n_ok,
        examples: records,
        ledger: totals,
        artifacts: Artifacts {
            transcript: transcript_path,
            trace: trace_path,
            predictions: predictions_path,
            report: report_path,
            manifest: run_dir.join(MANIFEST_FILE),
        },
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    write_new(&manifest.artifacts.manifest, &format!("{manifest_json}\n"))?;
    Ok(RunOutcome { run_dir, manifest, report })
}
