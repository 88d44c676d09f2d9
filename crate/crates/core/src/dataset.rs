//! Corpus loading and corpus statistics.
//!
//! Corpora are JSONL, one example per line:
//!
//! ```json
//! {"id": "g1", "passage": "...", "split": "test",
//!  "tables": [{"name": "Team", "columns": ["Team", "Wins"],
//!              "rows": [["Hawks", "30"]], "row_headers": ["Hawks"],
//!              "difficulty": {"Wins": "easy"}}]}
//! ```
//!
//! `rows` is optional (inference-only corpora); `row_headers` is optional
//! when `rows` is present. Row 0 of every `rows` entry is the row header.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Row, Table};

pub const LIVESUM_ROW_HEADERS: [&str; 2] = ["Home Team", "Away Team"];

/// Bundled synthetic corpora: five RotoWire-shaped and five LiveSum-shaped games.
pub const MINI_ROTOWIRE: &str = include_str!("../data/mini_rotowire.jsonl");
pub const MINI_LIVESUM: &str = include_str!("../data/mini_livesum.jsonl");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line_no}: {cause}")]
    MalformedLine { line_no: usize, cause: String },
    #[error("line {line_no}: {message}")]
    SchemaViolation { line_no: usize, message: String },
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "validation" | "valid" | "val" | "dev" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSchema {
    Rotowire,
    Livesum,
    Generic,
}

impl FromStr for CorpusSchema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rotowire" => Ok(CorpusSchema::Rotowire),
            "livesum" => Ok(CorpusSchema::Livesum),
            "generic" => Ok(CorpusSchema::Generic),
            other => Err(format!("unknown corpus schema {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableTarget {
    pub name: String,
    pub column_headers: Vec<String>,
    pub row_headers: Vec<String>,
    pub gold: Option<Table>,
    #[serde(default)]
    pub column_difficulty: BTreeMap<String, Difficulty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentExample {
    pub id: String,
    pub passage: String,
    pub targets: Vec<TableTarget>,
    pub split: Split,
}

impl ExperimentExample {
    pub fn target(&self, name: &str) -> Option<&TableTarget> {
        self.targets.iter().find(|t| t.name == name)
    }
}

#[derive(Deserialize)]
struct RawExample {
    id: Option<String>,
    passage: Option<String>,
    split: Option<String>,
    tables: Option<Vec<RawTable>>,
}

#[derive(Deserialize)]
struct RawTable {
    name: Option<String>,
    columns: Option<Vec<String>>,
    rows: Option<Vec<Vec<String>>>,
    row_headers: Option<Vec<String>>,
    #[serde(default)]
    difficulty: BTreeMap<String, Difficulty>,
}

fn violation(line_no: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation {
        line_no,
        message: message.into(),
    }
}

fn convert_table(line_no: usize, raw: RawTable) -> Result<TableTarget, DatasetError> {
    let name = raw.name.ok_or_else(|| violation(line_no, "table missing \"name\""))?;
    let columns = raw
        .columns
        .filter(|c| !c.is_empty())
        .ok_or_else(|| violation(line_no, format!("table {name:?} missing \"columns\"")))?;
    let gold = match raw.rows {
        Some(rows) => {
            let table = Table::new(name.clone(), columns.clone(), rows.into_iter().map(|cells| Row { cells }).collect());
            table
                .validate()
                .map_err(|e| violation(line_no, format!("table {name:?}: {e}")))?;
            Some(table)
        }
        None => None,
    };
    let row_headers = match (raw.row_headers, &gold) {
        (Some(rh), _) => rh,
        (None, Some(g)) => g.row_headers(),
        (None, None) => {
            return Err(violation(
                line_no,
                format!("table {name:?} has neither \"rows\" nor \"row_headers\""),
            ))
        }
    };
    for key in raw.difficulty.keys() {
        if !columns.contains(key) {
            return Err(violation(line_no, format!("difficulty key {key:?} is not a column of {name:?}")));
        }
    }
    Ok(TableTarget {
        name,
        column_headers: columns,
        row_headers,
        gold,
        column_difficulty: raw.difficulty,
    })
}

fn check_schema(line_no: usize, schema: CorpusSchema, targets: &[TableTarget]) -> Result<(), DatasetError> {
    match schema {
        CorpusSchema::Generic => Ok(()),
        CorpusSchema::Rotowire => {
            let mut names: Vec<&str> = targets.iter().map(|t| t.name.as_str()).collect();
            names.sort_unstable();
            if names != ["Player", "Team"] {
                return Err(violation(line_no, format!("rotowire examples need Player and Team tables, found {names:?}")));
            }
            Ok(())
        }
        CorpusSchema::Livesum => {
            if targets.len() != 1 {
                return Err(violation(line_no, format!("livesum examples need exactly one table, found {}", targets.len())));
            }
            if targets[0].row_headers != LIVESUM_ROW_HEADERS {
                return Err(violation(
                    line_no,
                    format!("livesum row headers must be {LIVESUM_ROW_HEADERS:?}, found {:?}", targets[0].row_headers),
                ));
            }
            Ok(())
        }
    }
}

/// Parses corpus text (already read into memory). Line numbers are 1-based.
pub fn parse_corpus(text: &str, schema: CorpusSchema) -> Result<Vec<ExperimentExample>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| DatasetError::MalformedLine {
            line_no,
            cause: e.to_string(),
        })?;
        let id = raw.id.ok_or_else(|| violation(line_no, "missing \"id\""))?;
        let passage = raw
            .passage
            .filter(|p| !p.trim().is_empty())
            .ok_or_else(|| violation(line_no, "missing \"passage\""))?;
        let split = match raw.split {
            None => Split::Test,
            Some(s) => Split::parse(&s).ok_or_else(|| violation(line_no, format!("unknown split {s:?}")))?,
        };
        let tables = raw.tables.filter(|t| !t.is_empty()).ok_or_else(|| violation(line_no, "missing \"tables\""))?;
        let targets = tables
            .into_iter()
            .map(|t| convert_table(line_no, t))
            .collect::<Result<Vec<_>, _>>()?;
        check_schema(line_no, schema, &targets)?;
        if !ids.insert(id.clone()) {
            return Err(violation(line_no, format!("duplicate id {id:?}")));
        }
        out.push(ExperimentExample {
            id,
            passage,
            targets,
            split,
        });
    }
    Ok(out)
}

pub fn load_corpus(path: &Path, schema: CorpusSchema) -> Result<Vec<ExperimentExample>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    /// Number of gold tables the averages are taken over.
    pub n_tables: usize,
    pub avg_rows: f64,
    /// Data columns, excluding the row-header column.
    pub avg_cols: f64,
    pub avg_nonempty_cells: f64,
    /// Mean over tables of the per-table non-empty fraction, as a percentage.
    pub nonempty_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_examples: usize,
    pub n_by_split: BTreeMap<Split, usize>,
    pub avg_tokens: f64,
    pub tables: BTreeMap<String, TableStats>,
}

/// Whitespace token count.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn compute_stats(corpus: &[ExperimentExample]) -> Result<CorpusStats, DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    let mut n_by_split = BTreeMap::new();
    let mut tokens = 0usize;
    #[derive(Default)]
    struct Acc {
        n: usize,
        rows: usize,
        cols: usize,
        nonempty: usize,
        frac: f64,
    }
    let mut per_table: BTreeMap<String, Acc> = BTreeMap::new();
    for ex in corpus {
        *n_by_split.entry(ex.split).or_insert(0) += 1;
        tokens += count_tokens(&ex.passage);
        for target in &ex.targets {
            let Some(gold) = &target.gold else { continue };
            let acc = per_table.entry(target.name.clone()).or_default();
            let data_cells = gold.n_data_cells();
            let nonempty = gold.n_nonempty_cells();
            acc.n += 1;
            acc.rows += gold.n_rows();
            acc.cols += gold.n_columns().saturating_sub(1);
            acc.nonempty += nonempty;
            if data_cells > 0 {
                acc.frac += nonempty as f64 / data_cells as f64;
            }
        }
    }
    let tables = per_table
        .into_iter()
        .map(|(name, a)| {
            let n = a.n as f64;
            (
                name,
                TableStats {
                    n_tables: a.n,
                    avg_rows: a.rows as f64 / n,
                    avg_cols: a.cols as f64 / n,
                    avg_nonempty_cells: a.nonempty as f64 / n,
                    nonempty_pct: 100.0 * a.frac / n,
                },
            )
        })
        .collect();
    Ok(CorpusStats {
        n_examples: corpus.len(),
        n_by_split,
        avg_tokens: tokens as f64 / corpus.len() as f64,
        tables,
    })
}

impl CorpusStats {
    /// Count-weighted merge; equals `compute_stats` over the concatenated corpora.
    pub fn combine(&self, other: &CorpusStats) -> CorpusStats {
        fn wmean(a: f64, na: usize, b: f64, nb: usize) -> f64 {
            if na + nb == 0 {
                0.0
            } else {
                (a * na as f64 + b * nb as f64) / (na + nb) as f64
            }
        }
        let mut n_by_split = self.n_by_split.clone();
        for (split, n) in &other.n_by_split {
            *n_by_split.entry(*split).or_insert(0) += n;
        }
        let mut tables = self.tables.clone();
        for (name, b) in &other.tables {
            let merged = match tables.get(name) {
                None => b.clone(),
                Some(a) => TableStats {
                    n_tables: a.n_tables + b.n_tables,
                    avg_rows: wmean(a.avg_rows, a.n_tables, b.avg_rows, b.n_tables),
                    avg_cols: wmean(a.avg_cols, a.n_tables, b.avg_cols, b.n_tables),
                    avg_nonempty_cells: wmean(a.avg_nonempty_cells, a.n_tables, b.avg_nonempty_cells, b.n_tables),
                    nonempty_pct: wmean(a.nonempty_pct, a.n_tables, b.nonempty_pct, b.n_tables),
                },
            };
            tables.insert(name.clone(), merged);
        }
        CorpusStats {
            n_examples: self.n_examples + other.n_examples,
            n_by_split,
            avg_tokens: wmean(self.avg_tokens, self.n_examples, other.avg_tokens, other.n_examples),
            tables,
        }
    }
}
