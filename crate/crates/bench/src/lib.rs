//! Input generators shared by the benchmarks.

use tablegen_core::table::{serialize_grid, Row, Table};

/// A deterministic `rows` x `cols` table (including the row-header column)
/// with a mix of numeric, percent and empty cells.
pub fn synthetic_table(rows: usize, cols: usize) -> Table {
    let headers = std::iter::once("Player".to_string()).chain((1..cols).map(|c| format!("Stat {c}"))).collect();
    let rows = (0..rows)
        .map(|r| {
            let mut cells = vec![format!("Player {r}")];
            cells.extend((1..cols).map(|c| match (r * 31 + c * 7) % 5 {
                0 => String::new(),
                1 => format!("{}%", (r + c) % 100),
                _ => ((r * c) % 40).to_string(),
            }));
            Row { cells }
        })
        .collect();
    Table::new("Player", headers, rows)
}

/// The grid text of [`synthetic_table`] wrapped the way models tend to
/// answer: some prose, a sentinel line and a bordered markdown table.
pub fn markdown_reply(rows: usize, cols: usize) -> String {
    let t = synthetic_table(rows, cols);
    let mut out = String::from("Here is the table.\nFINAL TABLE:\n");
    for (i, line) in serialize_grid(&t).lines().enumerate() {
        out.push_str(&format!("| {line} |\n"));
        if i == 0 {
            out.push_str(&format!("|{}|\n", vec!["---"; cols].join("|")));
        }
    }
    out
}
