//! Standalone scoring of prediction files, and the per-table scoring shared
//! with experiment runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tablegen_core::dataset::{load_corpus, CorpusSchema, DatasetError, ExperimentExample, TableTarget};
use tablegen_core::metrics::{
    aggregate, exact_match_scores, numeric_scores, Averaging, EvalReport, ExampleScores, MetricsError, ReportConfig,
    TableScore,
};
use tablegen_core::table::{parse_grid, repair_table, Table, TableError};

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("prediction on line {line_no} refers to unknown {what}")]
    IdMismatch { line_no: usize, what: String },
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("malformed prediction on line {line_no}: {cause}")]
    MalformedPrediction { line_no: usize, cause: String },
    #[error("duplicate prediction for example {id:?}, table {table:?} (line {line_no})")]
    DuplicatePrediction { line_no: usize, id: String, table: String },
    #[error("cannot load corpus: {0}")]
    CorpusUnloadable(#[from] DatasetError),
    #[error("cannot read predictions: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub table: String,
    /// Pipe-grid text; empty for an empty prediction.
    pub grid: String,
}

/// Scores one predicted table against the target's gold table. Numeric
/// scores are computed only when the target assigns column difficulties.
/// Returns `None` for targets without gold.
pub fn score_table(pred: &Table, target: &TableTarget) -> Result<Option<TableScore>, MetricsError> {
    let Some(gold) = &target.gold else { return Ok(None) };
    let numeric = if target.column_difficulty.is_empty() {
        None
    } else {
        Some(numeric_scores(pred, gold, &target.column_difficulty)?)
    };
    Ok(Some(TableScore { table: target.name.clone(), exact: exact_match_scores(pred, gold), numeric }))
}

/// Reads a predicted grid into the target's schema. An empty grid is an
/// empty table.
pub fn prediction_table(grid: &str, target: &TableTarget) -> Result<Table, TableError> {
    let parsed = match parse_grid(grid) {
        Ok(t) => t,
        Err(TableError::EmptyInput) => Table::new(&target.name, target.column_headers.clone(), Vec::new()),
        Err(e) => return Err(e),
    };
    let mut table = repair_table(&parsed, &target.column_headers)?;
    table.name = target.name.clone();
    Ok(table)
}

pub fn parse_predictions(text: &str) -> Result<Vec<(usize, PredictionLine)>, EvaluateError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|p| (i + 1, p))
                .map_err(|e| EvaluateError::MalformedPrediction { line_no: i + 1, cause: e.to_string() })
        })
        .collect()
}

/// Scores predictions against a loaded corpus. Examples are reported in
/// corpus order; a target of a predicted example with no prediction line is
/// scored as an empty table.
pub fn evaluate_predictions(
    predictions: &[(usize, PredictionLine)],
    corpus: &[ExperimentExample],
    averaging: Averaging,
) -> Result<EvalReport, EvaluateError> {
    if predictions.is_empty() {
        return Err(EvaluateError::EmptyInput);
    }
    let by_id: HashMap<&str, &ExperimentExample> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut grids: BTreeMap<(&str, &str), (usize, &str)> = BTreeMap::new();
    for (line_no, p) in predictions {
        let Some(example) = by_id.get(p.id.as_str()) else {
            return Err(EvaluateError::IdMismatch { line_no: *line_no, what: format!("example {:?}", p.id) });
        };
        if example.target(&p.table).is_none() {
            return Err(EvaluateError::IdMismatch {
                line_no: *line_no,
                what: format!("table {:?} of example {:?}", p.table, p.id),
            });
        }
        if grids.insert((&p.id, &p.table), (*line_no, &p.grid)).is_some() {
            return Err(EvaluateError::DuplicatePrediction { line_no: *line_no, id: p.id.clone(), table: p.table.clone() });
        }
    }

    let mut examples = Vec::new();
    for example in corpus {
        if !grids.keys().any(|(id, _)| *id == example.id) {
            continue;
        }
        let mut tables = Vec::new();
        for target in &example.targets {
            let pred = match grids.get(&(example.id.as_str(), target.name.as_str())) {
                Some((line_no, grid)) => prediction_table(grid, target)
                    .map_err(|e| EvaluateError::MalformedPrediction { line_no: *line_no, cause: e.to_string() })?,
                None => Table::new(&target.name, target.column_headers.clone(), Vec::new()),
            };
            tables.extend(score_table(&pred, target)?);
        }
        examples.push(ExampleScores { example_id: example.id.clone(), tables });
    }
    let aggregate = aggregate(&examples, averaging)?;
    Ok(EvalReport {
        config: ReportConfig { strategy: "predictions".into(), feedback_level: None, max_iterations: None, averaging },
        examples,
        aggregate,
        ledger: None,
    })
}

/// Scores a predictions JSONL file without any model calls.
pub fn cmd_evaluate(
    predictions: &Path,
    corpus: &Path,
    schema: CorpusSchema,
    averaging: Averaging,
) -> Result<EvalReport, EvaluateError> {
    let corpus = load_corpus(corpus, schema)?;
    let lines = parse_predictions(&std::fs::read_to_string(predictions)?)?;
    evaluate_predictions(&lines, &corpus, averaging)
}
