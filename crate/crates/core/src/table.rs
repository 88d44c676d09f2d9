//! Table data model and the pipe-grid text format.
//!
//! A grid is one line per row with cells separated by `|`. The first line
//! holds the column headers; column 0 of every row is the row header (the
//! entity name). Markdown-style bordered lines (`| a | b |`) and separator
//! lines (`|---|---|`) are accepted on input; output is always the plain
//! `a | b` form.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("no non-blank lines in table text")]
    EmptyInput,
    #[error("header line has {0} cell(s); at least 2 are required")]
    HeaderlessTable(usize),
    #[error("none of the parsed headers {parsed:?} match the expected columns {expected:?}")]
    UnrepairableTable {
        parsed: Vec<String>,
        expected: Vec<String>,
    },
    #[error("expected column list is empty")]
    EmptySchema,
    #[error("invalid table: {0}")]
    Invalid(String),
}

/// One table row. `cells[0]` is the row header.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Row {
    pub cells: Vec<String>,
}

impl Row {
    pub fn new<I, S>(cells: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Row {
            cells: cells.into_iter().map(Into::into).collect(),
        }
    }

    pub fn header(&self) -> &str {
        self.cells.first().map(String::as_str).unwrap_or("")
    }

    /// Data cells, i.e. everything after the row header.
    pub fn values(&self) -> &[String] {
        self.cells.get(1..).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub column_headers: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(name: impl Into<String>, column_headers: Vec<String>, rows: Vec<Row>) -> Self {
        Table {
            name: name.into(),
            column_headers,
            rows,
        }
    }

    /// Convenience constructor used heavily in tests and fixtures.
    pub fn from_strs(name: &str, headers: &[&str], rows: &[&[&str]]) -> Self {
        Table {
            name: name.to_string(),
            column_headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: rows.iter().map(|r| Row::new(r.iter().copied())).collect(),
        }
    }

    pub fn n_columns(&self) -> usize {
        self.column_headers.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Number of data cells: rows × (columns − 1).
    pub fn n_data_cells(&self) -> usize {
        self.rows.len() * self.column_headers.len().saturating_sub(1)
    }

    pub fn n_nonempty_cells(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.values())
            .filter(|c| !c.trim().is_empty())
            .count()
    }

    pub fn row_headers(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.header().to_string()).collect()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows.get(row)?.cells.get(col).map(String::as_str)
    }

    /// Checks the structural invariants: non-empty headers unique under
    /// normalization, rectangular rows, no pipe or newline in any cell.
    pub fn validate(&self) -> Result<(), TableError> {
        let width = self.column_headers.len();
        if width == 0 {
            return Err(TableError::Invalid("table has no columns".into()));
        }
        let mut seen = BTreeSet::new();
        for h in &self.column_headers {
            if h.trim().is_empty() {
                return Err(TableError::Invalid("empty column header".into()));
            }
            if !seen.insert(normalize_cell(h)) {
                return Err(TableError::Invalid(format!("duplicate column header {h:?}")));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != width {
                return Err(TableError::Invalid(format!(
                    "row {i} has {} cells, expected {width}",
                    row.len()
                )));
            }
        }
        let all_cells = self.column_headers.iter().chain(self.rows.iter().flat_map(|r| &r.cells));
        for c in all_cells {
            if c.contains('|') || c.contains('\n') || c.contains('\r') {
                return Err(TableError::Invalid(format!("cell {c:?} contains a delimiter")));
            }
        }
        Ok(())
    }
}

/// (row header, column header, value), all normalized. The alignment unit
/// for exact-match scoring.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellTuple {
    pub row_header: String,
    pub column_header: String,
    pub value: String,
}

fn is_separator_line(line: &str) -> bool {
    line.contains('-') && line.chars().all(|c| matches!(c, '-' | ':' | ' ' | '\t' | '|'))
}

fn split_raw(line: &str) -> Vec<String> {
    line.split('|').map(|c| c.trim().to_string()).collect()
}

fn split_header_line(line: &str) -> Vec<String> {
    let mut s = line.trim();
    s = s.strip_prefix('|').unwrap_or(s);
    s = s.strip_suffix('|').unwrap_or(s);
    split_raw(s)
}

/// Splits a data line. Bordered lines (leading and trailing pipe) lose both
/// border pipes. An unbordered line keeps every cell, except that a dangling
/// edge pipe which would make the row exactly one cell wider than the header
/// is treated as a border.
fn split_data_line(line: &str, width: usize) -> Vec<String> {
    let s = line.trim();
    let starts = s.starts_with('|');
    let ends = s.len() > 1 && s.ends_with('|');
    if starts && ends {
        return split_raw(&s[1..s.len() - 1]);
    }
    let mut cells = split_raw(s);
    if cells.len() == width + 1 {
        if ends && cells.last().is_some_and(|c| c.is_empty()) {
            cells.pop();
        } else if starts && cells.first().is_some_and(|c| c.is_empty()) {
            cells.remove(0);
        }
    }
    cells
}

/// Parses pipe-grid text. Rows are returned as found; widths are not forced
/// to match the header (see [`repair_table`]).
pub fn parse_grid(text: &str) -> Result<Table, TableError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .filter(|l| !is_separator_line(l));
    let header_line = lines.next().ok_or(TableError::EmptyInput)?;
    let column_headers = split_header_line(header_line);
    if column_headers.len() < 2 {
        return Err(TableError::HeaderlessTable(column_headers.len()));
    }
    let width = column_headers.len();
    let rows = lines.map(|l| Row { cells: split_data_line(l, width) }).collect();
    Ok(Table {
        name: String::new(),
        column_headers,
        rows,
    })
}

/// Renders the plain grid form: header line first, cells joined by `" | "`.
pub fn serialize_grid(table: &Table) -> String {
    let mut lines = Vec::with_capacity(table.rows.len() + 1);
    lines.push(table.column_headers.join(" | "));
    for row in &table.rows {
        lines.push(row.cells.join(" | "));
    }
    lines.join("\n")
}

fn strip_quotes(s: &str) -> &str {
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

fn normalize_step(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let unquoted = strip_quotes(&collapsed);
    let unpercented = unquoted.strip_suffix('%').unwrap_or(unquoted);
    unpercented.trim().to_string()
}

/// Canonical form used for every equality comparison between cells.
///
/// Trims, collapses whitespace runs, lowercases, strips one pair of
/// surrounding quotes and one trailing `%`. Steps repeat until nothing
/// changes so the result is always a fixpoint.
pub fn normalize_cell(raw: &str) -> String {
    let mut current = normalize_step(raw);
    loop {
        let next = normalize_step(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Re-fits a parsed table onto the expected column list.
///
/// Columns are matched by normalized header. The row-header column falls
/// back to position 0 when its label differs (models often rename it).
/// Missing cells are padded with empty strings, extra cells are dropped.
pub fn repair_table(parsed: &Table, expected_columns: &[String]) -> Result<Table, TableError> {
    if expected_columns.is_empty() {
        return Err(TableError::EmptySchema);
    }
    let mut by_header: HashMap<String, usize> = HashMap::new();
    for (i, h) in parsed.column_headers.iter().enumerate() {
        by_header.entry(normalize_cell(h)).or_insert(i);
    }
    let mut mapping: Vec<Option<usize>> = expected_columns
        .iter()
        .map(|h| by_header.get(&normalize_cell(h)).copied())
        .collect();
    if mapping.iter().all(Option::is_none) {
        return Err(TableError::UnrepairableTable {
            parsed: parsed.column_headers.clone(),
            expected: expected_columns.to_vec(),
        });
    }
    if mapping[0].is_none() && !mapping.contains(&Some(0)) {
        mapping[0] = Some(0);
    }
    let rows = parsed
        .rows
        .iter()
        .map(|row| Row {
            cells: mapping
                .iter()
                .map(|src| src.and_then(|i| row.cells.get(i)).cloned().unwrap_or_default())
                .collect(),
        })
        .collect();
    Ok(Table {
        name: parsed.name.clone(),
        column_headers: expected_columns.to_vec(),
        rows,
    })
}

/// One tuple per non-empty data cell, deduplicated.
pub fn cell_tuples(table: &Table) -> BTreeSet<CellTuple> {
    let headers: Vec<String> = table.column_headers.iter().map(|h| normalize_cell(h)).collect();
    let mut out = BTreeSet::new();
    for row in &table.rows {
        let row_header = normalize_cell(row.header());
        for (col, raw) in row.cells.iter().enumerate().skip(1) {
            let value = normalize_cell(raw);
            if value.is_empty() {
                continue;
            }
            let Some(column_header) = headers.get(col) else {
                continue;
            };
            out.insert(CellTuple {
                row_header: row_header.clone(),
                column_header: column_header.clone(),
                value,
            });
        }
    }
    out
}
