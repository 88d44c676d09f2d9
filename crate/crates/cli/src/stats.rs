use std::path::Path;

use thiserror::Error;

use tablegen_core::dataset::{compute_stats, load_corpus, CorpusSchema, CorpusStats, DatasetError, Split};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("cannot load corpus {path}: {source}")]
    CorpusUnloadable { path: String, source: DatasetError },
}

pub fn cmd_stats(corpus: &Path, schema: CorpusSchema) -> Result<CorpusStats, StatsError> {
    let unloadable = |source| StatsError::CorpusUnloadable { path: corpus.display().to_string(), source };
    let examples = load_corpus(corpus, schema).map_err(unloadable)?;
    compute_stats(&examples).map_err(unloadable)
}

/// Human-readable rendering; token counts are whitespace-delimited words,
/// so they run a little below subword tokenizer counts.
pub fn render_stats(stats: &CorpusStats) -> String {
    let split = |s| stats.n_by_split.get(&s).copied().unwrap_or(0);
    let mut out = format!(
        "examples: {} (train {}, validation {}, test {})\navg passage tokens (whitespace): {:.2}\n\n",
        stats.n_examples,
        split(Split::Train),
        split(Split::Validation),
        split(Split::Test),
        stats.avg_tokens
    );
    out.push_str(&format!(
        "{:<12} {:>7} {:>9} {:>9} {:>18}\n",
        "table", "tables", "avg rows", "avg cols", "avg non-empty"
    ));
    for (name, t) in &stats.tables {
        out.push_str(&format!(
            "{:<12} {:>7} {:>9.2} {:>9.2} {:>18}\n",
            name,
            t.n_tables,
            t.avg_rows,
            t.avg_cols,
            format!("{:.2} ({:.1}%)", t.avg_nonempty_cells, t.nonempty_pct)
        ));
    }
    out
}
