//! Exact-match precision/recall/F1 over cell tuples, and RMSE / cell error
//! rate over numeric tables grouped by column difficulty.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::LedgerTotals;
use crate::dataset::Difficulty;
use crate::table::{cell_tuples, normalize_cell, CellTuple, Table};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("gold cell at row {row:?}, column {column:?} is not an integer: {value:?}")]
    GoldNotNumeric { row: String, column: String, value: String },
    #[error("nothing to aggregate")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_gold: usize,
    pub n_matched: usize,
}

impl MatchScores {
    pub fn from_counts(n_pred: usize, n_gold: usize, n_matched: usize) -> Self {
        if n_pred == 0 && n_gold == 0 {
            return MatchScores { precision: 1.0, recall: 1.0, f1: 1.0, n_pred, n_gold, n_matched };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(n_matched, n_pred);
        let recall = ratio(n_matched, n_gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        MatchScores { precision, recall, f1, n_pred, n_gold, n_matched }
    }
}

/// Similarity between a predicted and a gold tuple in `[0, 1]`.
///
/// Hook for soft matching (e.g. embedding-based scores). Only the exact
/// scorer ships with this crate.
pub trait TupleScorer: Send + Sync {
    fn similarity(&self, pred: &CellTuple, gold: &CellTuple) -> f64;
}

pub struct ExactScorer;

impl TupleScorer for ExactScorer {
    fn similarity(&self, pred: &CellTuple, gold: &CellTuple) -> f64 {
        if pred == gold {
            1.0
        } else {
            0.0
        }
    }
}

pub fn exact_match_scores(pred: &Table, gold: &Table) -> MatchScores {
    let p = cell_tuples(pred);
    let g = cell_tuples(gold);
    MatchScores::from_counts(p.len(), g.len(), p.intersection(&g).count())
}

/// Squared-error and mismatch sums for one difficulty level. Pooling two
/// of these is plain addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub n_cells: usize,
    pub n_errors: usize,
    pub sum_sq_error: f64,
    pub rmse: f64,
    pub error_rate: f64,
}

impl LevelScores {
    fn push(&mut self, pred: Option<f64>, gold: f64) {
        let p = pred.unwrap_or(0.0);
        self.n_cells += 1;
        self.sum_sq_error += (p - gold).powi(2);
        if pred.is_none() || p != gold {
            self.n_errors += 1;
        }
        self.finish();
    }

    fn finish(&mut self) {
        if self.n_cells == 0 {
            self.rmse = 0.0;
            self.error_rate = 0.0;
        } else {
            self.rmse = (self.sum_sq_error / self.n_cells as f64).sqrt();
            self.error_rate = 100.0 * self.n_errors as f64 / self.n_cells as f64;
        }
    }

    pub fn pooled(&self, other: &LevelScores) -> LevelScores {
        let mut out = LevelScores {
            n_cells: self.n_cells + other.n_cells,
            n_errors: self.n_errors + other.n_errors,
            sum_sq_error: self.sum_sq_error + other.sum_sq_error,
            rmse: 0.0,
            error_rate: 0.0,
        };
        out.finish();
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NumericScores {
    pub levels: BTreeMap<Difficulty, LevelScores>,
}

impl NumericScores {
    pub fn pooled(&self, other: &NumericScores) -> NumericScores {
        let mut levels = self.levels.clone();
        for (level, s) in &other.levels {
            let merged = levels.get(level).map_or(*s, |mine| mine.pooled(s));
            levels.insert(*level, merged);
        }
        NumericScores { levels }
    }
}

fn parse_numeric(raw: &str) -> Option<f64> {
    let v: f64 = normalize_cell(raw).replace(',', "").parse().ok()?;
    v.is_finite().then_some(v)
}

/// RMSE and error rate per difficulty level. Cells are matched by row and
/// column header; a missing or non-numeric prediction counts as 0 and as
/// an error.
pub fn numeric_scores(
    pred: &Table,
    gold: &Table,
    difficulty: &BTreeMap<String, Difficulty>,
) -> Result<NumericScores, MetricsError> {
    let pred_cols: HashMap<String, usize> = pred
        .column_headers
        .iter()
        .enumerate()
        .map(|(i, h)| (normalize_cell(h), i))
        .collect();
    let mut pred_rows: HashMap<String, usize> = HashMap::new();
    for (i, row) in pred.rows.iter().enumerate() {
        pred_rows.entry(normalize_cell(row.header())).or_insert(i);
    }
    let mut levels: BTreeMap<Difficulty, LevelScores> = BTreeMap::new();
    for (col, header) in gold.column_headers.iter().enumerate().skip(1) {
        let Some(level) = difficulty.get(header) else { continue };
        let pred_col = pred_cols.get(&normalize_cell(header));
        for row in &gold.rows {
            let raw = row.cells.get(col).map(String::as_str).unwrap_or("");
            let gold_value = normalize_cell(raw)
                .parse::<i64>()
                .map_err(|_| MetricsError::GoldNotNumeric {
                    row: row.header().to_string(),
                    column: header.clone(),
                    value: raw.to_string(),
                })? as f64;
            let pred_value = pred_rows
                .get(&normalize_cell(row.header()))
                .zip(pred_col)
                .and_then(|(r, c)| pred.rows[*r].cells.get(*c))
                .and_then(|v| parse_numeric(v));
            levels.entry(*level).or_default().push(pred_value, gold_value);
        }
    }
    Ok(NumericScores { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean over table types of the per-type mean.
    #[default]
    Macro,
    /// Mean over every scored table instance.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableScore {
    pub table: String,
    pub exact: MatchScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub numeric: Option<NumericScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub example_id: String,
    pub tables: Vec<TableScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub n_tables: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_examples: usize,
    pub averaging: Averaging,
    /// Headline exact-match F1.
    pub exact_match_f1: f64,
    pub exact_match_precision: f64,
    pub exact_match_recall: f64,
    pub by_table: BTreeMap<String, MeanScores>,
    /// Cells pooled across examples before RMSE / error rate.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub numeric: BTreeMap<Difficulty, LevelScores>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportConfig {
    pub strategy: String,
    pub feedback_level: Option<String>,
    pub max_iterations: Option<u32>,
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub examples: Vec<ExampleScores>,
    pub aggregate: Aggregate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerTotals>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports are always serializable")
    }
}

pub fn aggregate(per_example: &[ExampleScores], averaging: Averaging) -> Result<Aggregate, MetricsError> {
    if per_example.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut sums: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    let mut numeric = NumericScores::default();
    for ex in per_example {
        for t in &ex.tables {
            let s = sums.entry(t.table.clone()).or_default();
            s.0 += 1;
            s.1 += t.exact.precision;
            s.2 += t.exact.recall;
            s.3 += t.exact.f1;
            if let Some(n) = &t.numeric {
                numeric = numeric.pooled(n);
            }
        }
    }
    let by_table: BTreeMap<String, MeanScores> = sums
        .into_iter()
        .map(|(name, (n, p, r, f))| {
            let k = n as f64;
            (name, MeanScores { n_tables: n, precision: p / k, recall: r / k, f1: f / k })
        })
        .collect();
    let (p, r, f) = match averaging {
        Averaging::Macro => {
            let k = by_table.len().max(1) as f64;
            by_table.values().fold((0.0, 0.0, 0.0), |(p, r, f), m| (p + m.precision / k, r + m.recall / k, f + m.f1 / k))
        }
        Averaging::Micro => {
            let k = by_table.values().map(|m| m.n_tables).sum::<usize>().max(1) as f64;
            by_table.values().fold((0.0, 0.0, 0.0), |(p, r, f), m| {
                let w = m.n_tables as f64 / k;
                (p + m.precision * w, r + m.recall * w, f + m.f1 * w)
            })
        }
    };
    Ok(Aggregate {
        n_examples: per_example.len(),
        averaging,
        exact_match_f1: f,
        exact_match_precision: p,
        exact_match_recall: r,
        by_table,
        numeric: numeric.levels,
    })
}

/// Plain-text summary: one strategy row with exact-match columns and, when
/// numeric scores exist, RMSE / ER per difficulty level.
pub fn render_summary(report: &EvalReport) -> String {
    let a = &report.aggregate;
    let label = match (&report.config.feedback_level, report.config.max_iterations) {
        (Some(level), Some(k)) => format!("{} + feedback({level}) x{k}", report.config.strategy),
        _ => report.config.strategy.clone(),
    };
    let mut header = vec!["Strategy".to_string(), "Exact Match".to_string()];
    let mut row = vec![label, format!("{:.4}", a.exact_match_f1)];
    for name in a.by_table.keys() {
        header.push(format!("EM {name}"));
        row.push(format!("{:.4}", a.by_table[name].f1));
    }
    for (level, s) in &a.numeric {
        header.push(format!("{level} RMSE"));
        header.push(format!("{level} ER"));
        row.push(format!("{:.3}", s.rmse));
        row.push(format!("{:.2}", s.error_rate));
    }
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let fmt_line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
    let mut out = format!("{}\n{rule}\n{}\n", fmt_line(&header), fmt_line(&row));
    if let Some(l) = &report.ledger {
        out.push_str(&format!(
            "examples: {}  calls: {}  tokens in/out: {}/{}\n",
            a.n_examples, l.calls, l.tokens_in, l.tokens_out
        ));
    } else {
        out.push_str(&format!("examples: {}\n", a.n_examples));
    }
    out
}
