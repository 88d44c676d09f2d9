//! Prompt rendering for the generation strategies, table extraction from
//! free-form responses, and the single-call generation step.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CallContext, Message, ModelClient};
use crate::dataset::{ExperimentExample, TableTarget};
use crate::table::{parse_grid, repair_table, serialize_grid, Table, TableError};

/// Bumped whenever a bundled template changes wording.
pub const TEMPLATE_VERSION: &str = "1";

/// Heading that marks the final table in a response.
pub const SENTINEL: &str = "FINAL TABLE:";

/// Sub-task names of the guided strategy, in prompt order.
pub const SUBTASK_NAMES: [&str; 5] = [
    "Header Explanation",
    "Abbreviation Expansion",
    "Data Format Resolution",
    "Entity Extraction and Grouping",
    "Table Generation",
];

pub const STAGE_GENERATE: &str = "generate";
pub const STAGE_SUBTASK: &str = "subtask-chain";
pub const STAGE_REASK: &str = "re-ask";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("a 1-shot strategy needs a shot example with a gold {0:?} table")]
    MissingShotExample(String),
    #[error("target {0:?} has no column headers")]
    EmptySchema(String),
    #[error("no table found in model response")]
    NoTableFound,
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("template {template:?} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("failed to read template: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    OneShot,
    ZeroShotCot,
    OneShotCot,
    SubtaskGuided,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::ZeroShot,
        StrategyKind::OneShot,
        StrategyKind::ZeroShotCot,
        StrategyKind::OneShotCot,
        StrategyKind::SubtaskGuided,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::OneShot => "one_shot",
            StrategyKind::ZeroShotCot => "zero_shot_cot",
            StrategyKind::OneShotCot => "one_shot_cot",
            StrategyKind::SubtaskGuided => "subtask_guided",
        }
    }

    pub fn needs_shot(self) -> bool {
        matches!(self, StrategyKind::OneShot | StrategyKind::OneShotCot)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.replace('-', "_"))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub shot_example: Option<ExperimentExample>,
}

impl Strategy {
    pub fn zero_shot(kind: StrategyKind) -> Self {
        Strategy { kind, shot_example: None }
    }

    pub fn with_shot(kind: StrategyKind, shot: ExperimentExample) -> Self {
        Strategy { kind, shot_example: Some(shot) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub messages: Vec<Message>,
    pub stage_label: String,
    pub example_id: String,
    pub target_name: String,
}

/// Template text keyed by asset name (file stem).
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    texts: HashMap<&'static str, String>,
}

const ASSETS: [(&str, &str); 11] = [
    ("system", include_str!("../templates/system.txt")),
    ("format_spec", include_str!("../templates/format_spec.txt")),
    ("zero_shot", include_str!("../templates/zero_shot.txt")),
    ("zero_shot_cot", include_str!("../templates/zero_shot_cot.txt")),
    ("one_shot", include_str!("../templates/one_shot.txt")),
    ("one_shot_cot", include_str!("../templates/one_shot_cot.txt")),
    ("subtask_guided", include_str!("../templates/subtask_guided.txt")),
    ("feedback_table", include_str!("../templates/feedback_table.txt")),
    ("feedback_row", include_str!("../templates/feedback_row.txt")),
    ("feedback_cell", include_str!("../templates/feedback_cell.txt")),
    ("reask", include_str!("../templates/reask.txt")),
];

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            texts: ASSETS.iter().map(|(k, v)| (*k, v.trim_end().to_string())).collect(),
        }
    }

    /// Builtin templates, overridden by any `<name>.txt` present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::builtin();
        for (name, _) in ASSETS {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                t.texts.insert(name, std::fs::read_to_string(path)?.trim_end().to_string());
            }
        }
        Ok(t)
    }

    pub fn get(&self, name: &str) -> &str {
        self.texts.get(name).map(String::as_str).unwrap_or("")
    }

    /// Substitutes `{name}` placeholders in one pass; substituted text is
    /// never rescanned, so passages containing braces are safe.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        render(name, self.get(name), vars)
    }
}

fn render(template_name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let ident = close.map(|c| &after[..c]).filter(|id| {
            !id.is_empty() && id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
        });
        match ident {
            Some(id) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == id)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| PromptError::UnknownPlaceholder {
                        template: template_name.to_string(),
                        name: id.to_string(),
                    })?;
                out.push_str(value);
                rest = &after[id.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

pub(crate) fn column_list(columns: &[String]) -> String {
    columns.join(" | ")
}

pub(crate) fn row_list(rows: &[String]) -> String {
    rows.join(", ")
}

pub fn build_prompt(
    templates: &PromptTemplates,
    strategy: &Strategy,
    example: &ExperimentExample,
    target: &TableTarget,
) -> Result<PromptPlan, PromptError> {
    if target.column_headers.is_empty() {
        return Err(PromptError::EmptySchema(target.name.clone()));
    }
    let shot_table = if strategy.kind.needs_shot() {
        let shot = strategy
            .shot_example
            .as_ref()
            .ok_or_else(|| PromptError::MissingShotExample(target.name.clone()))?;
        let gold = shot
            .target(&target.name)
            .and_then(|t| t.gold.as_ref())
            .ok_or_else(|| PromptError::MissingShotExample(target.name.clone()))?;
        Some((shot.passage.as_str(), serialize_grid(gold)))
    } else {
        None
    };
    let format_spec = templates.get("format_spec");
    let columns = column_list(&target.column_headers);
    let rows = row_list(&target.row_headers);
    let mut vars = vec![
        ("passage", example.passage.as_str()),
        ("row_headers", rows.as_str()),
        ("column_headers", columns.as_str()),
        ("format_spec", format_spec),
    ];
    if let Some((passage, table)) = &shot_table {
        vars.push(("shot_passage", passage));
        vars.push(("shot_table", table.as_str()));
    }
    let user = templates.render(strategy.kind.as_str(), &vars)?;
    let stage_label = match strategy.kind {
        StrategyKind::SubtaskGuided => STAGE_SUBTASK,
        _ => STAGE_GENERATE,
    };
    Ok(PromptPlan {
        messages: vec![Message::system(templates.get("system")), Message::user(user)],
        stage_label: stage_label.to_string(),
        example_id: example.id.clone(),
        target_name: target.name.clone(),
    })
}

/// One plan per target table.
pub fn build_prompts(
    templates: &PromptTemplates,
    strategy: &Strategy,
    example: &ExperimentExample,
) -> Result<Vec<PromptPlan>, PromptError> {
    example
        .targets
        .iter()
        .map(|t| build_prompt(templates, strategy, example, t))
        .collect()
}

/// Line ranges of maximal runs of pipe-bearing lines, at least two lines long.
fn pipe_blocks(lines: &[&str]) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = None;
    for (i, line) in lines.iter().enumerate() {
        match (line.contains('|'), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s >= 2 {
                    blocks.push((s, i));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if lines.len() - s >= 2 {
            blocks.push((s, lines.len()));
        }
    }
    blocks
}

/// Finds the table region of a free-form response. The first block after
/// the last sentinel wins; otherwise the last block in the text.
pub fn locate_table(response_text: &str) -> Option<String> {
    let lines: Vec<&str> = response_text.lines().collect();
    let blocks = pipe_blocks(&lines);
    let upper = SENTINEL.trim_end_matches(':').to_ascii_uppercase();
    let sentinel_line = lines
        .iter()
        .rposition(|l| l.to_ascii_uppercase().contains(&upper));
    let chosen = sentinel_line
        .and_then(|s| blocks.iter().find(|(start, _)| *start > s || (*start == s && lines[s].contains('|'))))
        .or_else(|| blocks.last())?;
    let mut block: Vec<&str> = lines[chosen.0..chosen.1].to_vec();
    // a sentinel sharing the first line ("FINAL TABLE: A | B") is cut away
    if let Some(first) = block.first_mut() {
        if let Some(pos) = first.to_ascii_uppercase().find(&upper) {
            let cut = pos + upper.len();
            *first = first[cut..].trim_start_matches(':');
        }
    }
    Some(block.join("\n"))
}

pub fn extract_table(response_text: &str, target: &TableTarget) -> Result<Table, PromptError> {
    if response_text.trim().is_empty() {
        return Err(PromptError::NoTableFound);
    }
    let region = locate_table(response_text).ok_or(PromptError::NoTableFound)?;
    let mut parsed = parse_grid(&region).map_err(|e| match e {
        TableError::EmptyInput | TableError::HeaderlessTable(_) => PromptError::NoTableFound,
        other => PromptError::Table(other),
    })?;
    parsed.name = target.name.clone();
    Ok(repair_table(&parsed, &target.column_headers)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub table: Table,
    /// Fingerprints of the calls made, in order.
    pub calls: Vec<String>,
    pub reasked: bool,
}

/// One generation call, plus at most one re-ask when no table is found.
pub fn run_generation(
    templates: &PromptTemplates,
    example: &ExperimentExample,
    target: &TableTarget,
    strategy: &Strategy,
    client: &ModelClient,
) -> Result<Generation, PromptError> {
    let plan = build_prompt(templates, strategy, example, target)?;
    let ctx = CallContext::new(&example.id, &plan.stage_label);
    let request = client.request(plan.messages.clone());
    let first = client.complete(&request, &ctx)?;
    let mut calls = vec![request.fingerprint()];
    match extract_table(&first.text, target) {
        Ok(table) => return Ok(Generation { table, calls, reasked: false }),
        Err(PromptError::NoTableFound) => {}
        Err(e) => return Err(e),
    }
    let mut messages = plan.messages;
    messages.push(Message::assistant(first.text));
    messages.push(Message::user(templates.get("reask")));
    let request = client.request(messages);
    let second = client.complete(&request, &ctx.with_stage(STAGE_REASK))?;
    calls.push(request.fingerprint());
    let table = extract_table(&second.text, target)?;
    Ok(Generation { table, calls, reasked: true })
}
