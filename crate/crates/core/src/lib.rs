//! LLM-driven text-to-table generation.
//!
//! The crate covers the whole offline-testable path of a text-to-table
//! experiment:
//!
//! - [`table`]: the pipe-grid table format, normalization and repair
//! - [`dataset`]: JSONL corpora (RotoWire- and LiveSum-shaped) and statistics
//! - [`backend`]: chat-completion backends, call ledger, transcripts, replay
//! - [`prompt`]: prompts for each generation strategy and table extraction
//! - [`refine`]: table-, row- and cell-level self-feedback rounds
//! - [`metrics`]: exact-match F1, RMSE and cell error rate
//!
//! ```
//! use tablegen_core::table::{parse_grid, serialize_grid};
//!
//! let t = parse_grid("Team | Wins\nHawks | 30").unwrap();
//! assert_eq!(serialize_grid(&t), "Team | Wins\nHawks | 30");
//! ```

pub mod backend;
pub mod dataset;
pub mod metrics;
pub mod prompt;
pub mod refine;
pub mod table;

pub use backend::{
    BackendError, CallContext, CallLedger, CallSettings, ChatBackend, ChatRequest, ChatResponse, HttpBackend,
    LedgerEntry, LedgerTotals, Message, ModelClient, ReplayBackend, Role, ScriptedBackend, TranscriptLine,
    TranscriptSink,
};
pub use dataset::{CorpusSchema, CorpusStats, Difficulty, ExperimentExample, Split, TableTarget};
pub use metrics::{Averaging, EvalReport, ExampleScores, MatchScores, NumericScores, TableScore};
pub use prompt::{PromptPlan, PromptTemplates, Strategy, StrategyKind};
pub use refine::{FeedbackGranularity, RefinementConfig, RefinementTrace, TraceEntry, UnitId, Verdict};
pub use table::{CellTuple, Row, Table, TableError};
