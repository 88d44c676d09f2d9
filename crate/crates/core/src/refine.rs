//! Iterative self-feedback over a generated table.
//!
//! One round reviews the whole table (1 call), every data row (one call per
//! row) or every data cell (one call per cell). Row and cell rounds only
//! ever change cell values; a table round may return a restructured grid,
//! which is repaired against the target schema.
//!
//! Within a round every unit sees the round's input table, so per-unit calls
//! are independent and may run concurrently. Results are merged by unit
//! coordinate.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallContext, Message, ModelClient};
use crate::dataset::TableTarget;
use crate::prompt::{column_list, extract_table, row_list, PromptError, PromptTemplates};
use crate::table::{normalize_cell, serialize_grid, Table, TableError};

pub const STAGE_FEEDBACK_TABLE: &str = "feedback-table";
pub const STAGE_FEEDBACK_ROW: &str = "feedback-row";
pub const STAGE_FEEDBACK_CELL: &str = "feedback-cell";

const NO_CHANGE: &str = "NO_CHANGE";
const KEEP: &str = "KEEP";
const UNPARSEABLE: &str = "unparseable-feedback";

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("max_iterations must be at least 1")]
    InvalidConfig,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackGranularity {
    Table,
    Row,
    Cell,
}

impl FeedbackGranularity {
    pub fn stage_label(self) -> &'static str {
        match self {
            FeedbackGranularity::Table => STAGE_FEEDBACK_TABLE,
            FeedbackGranularity::Row => STAGE_FEEDBACK_ROW,
            FeedbackGranularity::Cell => STAGE_FEEDBACK_CELL,
        }
    }

    /// Calls one round issues for a table of this shape.
    pub fn calls_per_round(self, table: &Table) -> usize {
        match self {
            FeedbackGranularity::Table => 1,
            FeedbackGranularity::Row => table.n_rows(),
            FeedbackGranularity::Cell => table.n_data_cells(),
        }
    }
}

impl fmt::Display for FeedbackGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackGranularity::Table => "table",
            FeedbackGranularity::Row => "row",
            FeedbackGranularity::Cell => "cell",
        })
    }
}

impl FromStr for FeedbackGranularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(FeedbackGranularity::Table),
            "row" => Ok(FeedbackGranularity::Row),
            "cell" => Ok(FeedbackGranularity::Cell),
            other => Err(format!("unknown feedback level {other:?}")),
        }
    }
}

fn default_max_iterations() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub granularity: FeedbackGranularity,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_true")]
    pub early_stop_on_no_change: bool,
    /// Whether cell prompts carry the passage.
    #[serde(default = "default_true")]
    pub cell_sees_passage: bool,
    /// Text for the domain-specific review criterion; empty means none.
    #[serde(default)]
    pub domain_feedback: String,
    /// Concurrent calls within a row or cell round.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl RefinementConfig {
    pub fn new(granularity: FeedbackGranularity, max_iterations: u32) -> Self {
        RefinementConfig {
            granularity,
            max_iterations,
            early_stop_on_no_change: true,
            cell_sees_passage: true,
            domain_feedback: String::new(),
            parallelism: 1,
        }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.max_iterations == 0 {
            return Err(RefineError::InvalidConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnitId {
    Table,
    Row { row: usize },
    Cell { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: u32,
    pub unit: UnitId,
    pub verdict: Verdict,
    pub old_value: String,
    pub new_value: String,
    pub feedback_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub table: Table,
    pub entries: Vec<TraceEntry>,
}

impl RoundOutcome {
    pub fn revisions(&self) -> usize {
        self.entries.iter().filter(|e| e.verdict == Verdict::Revise).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RefinementTrace {
    /// Entries of each executed round, in round order.
    pub iterations: Vec<Vec<TraceEntry>>,
    /// Initial table followed by the output of each round.
    pub tables: Vec<Table>,
}

impl RefinementTrace {
    pub fn rounds(&self) -> usize {
        self.iterations.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TraceEntry> {
        self.iterations.iter().flatten()
    }
}

/// Shared inputs of a feedback round.
pub struct RoundInput<'a> {
    pub templates: &'a PromptTemplates,
    pub client: &'a ModelClient,
    pub example_id: &'a str,
    pub passage: &'a str,
    pub target: &'a TableTarget,
    pub config: &'a RefinementConfig,
    pub iteration: u32,
}

impl RoundInput<'_> {
    fn ctx(&self, stage: &str) -> CallContext {
        CallContext::new(self.example_id, stage)
    }

    fn ask(&self, user: String, stage: &str) -> Result<String, BackendError> {
        let messages = vec![Message::system(self.templates.get("system")), Message::user(user)];
        Ok(self.client.chat(messages, &self.ctx(stage))?.text)
    }
}

fn contains_token(text: &str, token: &str) -> bool {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|w| w == token)
}

/// Runs `f` for each index, `parallelism` at a time, returning results in
/// index order regardless of completion order.
fn map_units<T, F>(n: usize, parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = parallelism.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunks: Vec<Vec<(usize, T)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        done.push((i, f(i)));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("feedback worker panicked")).collect()
    });
    for (i, v) in chunks.into_iter().flatten() {
        slots[i] = Some(v);
    }
    slots.into_iter().map(|v| v.expect("every unit produces a result")).collect()
}

pub fn table_feedback_round(input: &RoundInput<'_>, table: &Table) -> Result<RoundOutcome, RefineError> {
    let domain = if input.config.domain_feedback.trim().is_empty() {
        "none for this dataset."
    } else {
        input.config.domain_feedback.as_str()
    };
    let columns = column_list(&input.target.column_headers);
    let rows = row_list(&input.target.row_headers);
    let grid = serialize_grid(table);
    let user = input.templates.render(
        "feedback_table",
        &[
            ("passage", input.passage),
            ("row_headers", &rows),
            ("column_headers", &columns),
            ("table", &grid),
            ("domain_feedback", domain),
        ],
    )?;
    let response = input.ask(user, STAGE_FEEDBACK_TABLE)?;
    let mut entry = TraceEntry {
        iteration: input.iteration,
        unit: UnitId::Table,
        verdict: Verdict::Keep,
        old_value: grid.clone(),
        new_value: grid.clone(),
        feedback_text: response.clone(),
        note: None,
    };
    if contains_token(&response, NO_CHANGE) {
        return Ok(RoundOutcome { table: table.clone(), entries: vec![entry] });
    }
    let revised = match extract_table(&response, input.target) {
        Ok(t) => t,
        Err(PromptError::NoTableFound) => {
            entry.note = Some(UNPARSEABLE.into());
            return Ok(RoundOutcome { table: table.clone(), entries: vec![entry] });
        }
        Err(e) => return Err(e.into()),
    };
    if revised == *table {
        return Ok(RoundOutcome { table: table.clone(), entries: vec![entry] });
    }
    entry.verdict = Verdict::Revise;
    entry.new_value = serialize_grid(&revised);
    Ok(RoundOutcome { table: revised, entries: vec![entry] })
}

/// Parses a single revised row. Returns the data cells (row header excluded),
/// fitted to `width - 1` cells.
fn parse_row_reply(response: &str, row_header: &str, width: usize) -> Option<Vec<String>> {
    let line = response.lines().rev().find(|l| l.contains('|'))?;
    let mut s = line.trim();
    if s.starts_with('|') && s.len() > 1 && s.ends_with('|') {
        s = &s[1..s.len() - 1];
    }
    let cells: Vec<String> = s.split('|').map(|c| c.trim().to_string()).collect();
    let data_width = width.saturating_sub(1);
    let mut data: Vec<String> = if normalize_cell(&cells[0]) == normalize_cell(row_header) {
        cells[1..].to_vec()
    } else if cells.len() == data_width {
        cells
    } else {
        cells[1..].to_vec()
    };
    data.resize(data_width, String::new());
    Some(data)
}

fn row_feedback_unit(input: &RoundInput<'_>, table: &Table, row: usize) -> Result<(Vec<String>, TraceEntry), RefineError> {
    let original = &table.rows[row];
    let columns = column_list(&table.column_headers);
    let row_text = original.cells.join(" | ");
    let user = input.templates.render(
        "feedback_row",
        &[
            ("passage", input.passage),
            ("row_header", original.header()),
            ("column_headers", &columns),
            ("row", &row_text),
        ],
    )?;
    let response = input.ask(user, STAGE_FEEDBACK_ROW)?;
    let mut entry = TraceEntry {
        iteration: input.iteration,
        unit: UnitId::Row { row },
        verdict: Verdict::Keep,
        old_value: row_text.clone(),
        new_value: row_text,
        feedback_text: response.clone(),
        note: None,
    };
    if contains_token(&response, NO_CHANGE) {
        return Ok((original.cells.clone(), entry));
    }
    let Some(data) = parse_row_reply(&response, original.header(), table.n_columns()) else {
        entry.note = Some(UNPARSEABLE.into());
        return Ok((original.cells.clone(), entry));
    };
    let mut cells = Vec::with_capacity(table.n_columns());
    cells.push(original.header().to_string());
    cells.extend(data);
    if cells != original.cells {
        entry.verdict = Verdict::Revise;
        entry.new_value = cells.join(" | ");
    }
    Ok((cells, entry))
}

pub fn row_feedback_round(input: &RoundInput<'_>, table: &Table) -> Result<RoundOutcome, RefineError> {
    let results = map_units(table.n_rows(), input.config.parallelism, |row| row_feedback_unit(input, table, row));
    let mut out = table.clone();
    let mut entries = Vec::with_capacity(results.len());
    for (row, result) in results.into_iter().enumerate() {
        let (cells, entry) = result?;
        out.rows[row].cells = cells;
        entries.push(entry);
    }
    Ok(RoundOutcome { table: out, entries })
}

enum CellReply {
    Keep,
    Value(String),
    Unparseable,
}

fn parse_cell_reply(response: &str) -> CellReply {
    let trimmed = response.trim();
    if trimmed.starts_with(KEEP) && !trimmed[KEEP.len()..].starts_with(|c: char| c.is_ascii_alphanumeric()) {
        return CellReply::Keep;
    }
    for line in trimmed.lines() {
        let l = line.trim();
        if l.len() >= 6 && l[..6].eq_ignore_ascii_case("VALUE:") {
            let value = l[6..].trim();
            if value.contains('|') {
                return CellReply::Unparseable;
            }
            return CellReply::Value(normalize_cell(value));
        }
    }
    if contains_token(trimmed, KEEP) {
        return CellReply::Keep;
    }
    CellReply::Unparseable
}

fn cell_feedback_unit(input: &RoundInput<'_>, table: &Table, row: usize, col: usize) -> Result<(String, TraceEntry), RefineError> {
    let old = table.rows[row].cells[col].clone();
    let shown = if old.is_empty() { "(empty)" } else { old.as_str() };
    let passage = if input.config.cell_sees_passage { input.passage } else { "(omitted)" };
    let user = input.templates.render(
        "feedback_cell",
        &[
            ("passage", passage),
            ("row_header", table.rows[row].header()),
            ("column_header", &table.column_headers[col]),
            ("value", shown),
        ],
    )?;
    let response = input.ask(user, STAGE_FEEDBACK_CELL)?;
    let mut entry = TraceEntry {
        iteration: input.iteration,
        unit: UnitId::Cell { row, col },
        verdict: Verdict::Keep,
        old_value: old.clone(),
        new_value: old.clone(),
        feedback_text: response.clone(),
        note: None,
    };
    match parse_cell_reply(&response) {
        CellReply::Keep => Ok((old, entry)),
        CellReply::Unparseable => {
            entry.note = Some(UNPARSEABLE.into());
            Ok((old, entry))
        }
        // equal under normalization means the cell already holds this value
        CellReply::Value(v) if v == normalize_cell(&old) => Ok((old, entry)),
        CellReply::Value(v) => {
            entry.verdict = Verdict::Revise;
            entry.new_value = v.clone();
            Ok((v, entry))
        }
    }
}

pub fn cell_feedback_round(input: &RoundInput<'_>, table: &Table) -> Result<RoundOutcome, RefineError> {
    let width = table.n_columns();
    let data_cols = width.saturating_sub(1);
    let n = table.n_data_cells();
    let results = map_units(n, input.config.parallelism, |i| {
        cell_feedback_unit(input, table, i / data_cols, 1 + i % data_cols)
    });
    let mut out = table.clone();
    let mut entries = Vec::with_capacity(n);
    for (i, result) in results.into_iter().enumerate() {
        let (value, entry) = result?;
        out.rows[i / data_cols].cells[1 + i % data_cols] = value;
        entries.push(entry);
    }
    Ok(RoundOutcome { table: out, entries })
}

pub fn feedback_round(input: &RoundInput<'_>, table: &Table) -> Result<RoundOutcome, RefineError> {
    match input.config.granularity {
        FeedbackGranularity::Table => table_feedback_round(input, table),
        FeedbackGranularity::Row => row_feedback_round(input, table),
        FeedbackGranularity::Cell => cell_feedback_round(input, table),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub final_table: Table,
    pub trace: RefinementTrace,
}

/// Runs up to `max_iterations` rounds, stopping early after a round with no
/// revisions when configured to.
pub fn refine(
    templates: &PromptTemplates,
    client: &ModelClient,
    example_id: &str,
    passage: &str,
    initial: &Table,
    target: &TableTarget,
    config: &RefinementConfig,
) -> Result<Refinement, RefineError> {
    config.validate()?;
    let mut trace = RefinementTrace { iterations: Vec::new(), tables: vec![initial.clone()] };
    let mut current = initial.clone();
    for iteration in 1..=config.max_iterations {
        let input = RoundInput { templates, client, example_id, passage, target, config, iteration };
        let outcome = feedback_round(&input, &current)?;
        let revisions = outcome.revisions();
        current = outcome.table;
        trace.iterations.push(outcome.entries);
        trace.tables.push(current.clone());
        if revisions == 0 && config.early_stop_on_no_change {
            break;
        }
    }
    Ok(Refinement { final_table: current, trace })
}
