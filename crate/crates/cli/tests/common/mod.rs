//! Shared helpers for the runner tests: a scripted "model" that answers
//! generation prompts with the gold table and feedback prompts with a
//! configurable verdict.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use tablegen_cli::{ConfigFile, ExperimentConfig};
use tablegen_core::backend::{ChatRequest, Role, ScriptedBackend};
use tablegen_core::dataset::{parse_corpus, CorpusSchema, ExperimentExample};
use tablegen_core::table::serialize_grid;

pub fn core_data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn mini_rotowire() -> Vec<ExperimentExample> {
    parse_corpus(&std::fs::read_to_string(core_data("mini_rotowire.jsonl")).unwrap(), CorpusSchema::Rotowire).unwrap()
}

/// The configuration the committed replay fixture was recorded with.
pub fn fixture_config(out: &Path) -> ExperimentConfig {
    ConfigFile {
        corpus: Some(core_data("mini_rotowire.jsonl")),
        schema: Some(CorpusSchema::Rotowire),
        strategy: Some("subtask_guided".into()),
        feedback_level: Some("cell".into()),
        max_iterations: Some(2),
        backend: Some("replay".into()),
        transcript: Some(fixture("mini_rotowire.transcript.jsonl")),
        out: Some(out.to_path_buf()),
        ..Default::default()
    }
    .resolve()
    .unwrap()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Prompt {
    Generate,
    Reask,
    Table,
    Row,
    Cell,
}

pub fn classify(req: &ChatRequest) -> Prompt {
    let last = req.messages.last().unwrap();
    assert_eq!(last.role, Role::User);
    let u = &last.content;
    if u.starts_with("Your reply did not contain a table") {
        Prompt::Reask
    } else if u.starts_with("Below are a passage and one cell") {
        Prompt::Cell
    } else if u.starts_with("Below are a passage and one row") {
        Prompt::Row
    } else if u.starts_with("Below are a passage and a table") {
        Prompt::Table
    } else {
        Prompt::Generate
    }
}

/// Finds the example and table a generation prompt asks for. The example's
/// passage is the last one quoted (1-shot prompts quote the shot first).
pub fn generation_target<'c>(corpus: &'c [ExperimentExample], req: &ChatRequest) -> (&'c ExperimentExample, String) {
    let first_user = req.messages.iter().find(|m| m.role == Role::User).unwrap();
    let u = &first_user.content;
    let example = corpus
        .iter()
        .filter_map(|e| u.rfind(&e.passage).map(|at| (at, e)))
        .max_by_key(|(at, _)| *at)
        .map(|(_, e)| e)
        .expect("prompt quotes a corpus passage");
    let columns = u.lines().rev().find_map(|l| l.strip_prefix("Column headers: ")).unwrap();
    let target = example
        .targets
        .iter()
        .find(|t| t.column_headers.join(" | ") == columns)
        .expect("prompt names a target's columns");
    (example, target.name.clone())
}

pub fn gold_reply(corpus: &[ExperimentExample], req: &ChatRequest) -> String {
    let (example, table) = generation_target(corpus, req);
    let gold = example.target(&table).unwrap().gold.as_ref().unwrap();
    format!("Working through the steps.\nFINAL TABLE:\n{}", serialize_grid(gold))
}

pub fn cell_value(req: &ChatRequest) -> String {
    let u = &req.messages.last().unwrap().content;
    u.lines().find_map(|l| l.strip_prefix("Generated value: ")).unwrap().to_string()
}

/// Gold tables for generation; every feedback prompt is accepted as is.
pub fn gold_and_keep(corpus: Vec<ExperimentExample>) -> ScriptedBackend {
    ScriptedBackend::new(move |req| {
        Ok(match classify(req) {
            Prompt::Generate | Prompt::Reask => gold_reply(&corpus, req),
            Prompt::Cell => "KEEP".into(),
            Prompt::Row | Prompt::Table => "NO_CHANGE".into(),
        })
    })
}

/// Like [`gold_and_keep`], but the first generation prompt for each example
/// listed in `prose_first` gets a reply with no table, forcing a re-ask, and
/// every cell whose value is not `999` is revised to `999`.
pub fn reask_and_revise(corpus: Vec<ExperimentExample>, prose_first: &[&str]) -> ScriptedBackend {
    let pending: Arc<Mutex<HashMap<String, bool>>> =
        Arc::new(Mutex::new(prose_first.iter().map(|id| (id.to_string(), true)).collect()));
    ScriptedBackend::new(move |req| {
        Ok(match classify(req) {
            Prompt::Generate => {
                let (example, _) = generation_target(&corpus, req);
                let mut pending = pending.lock().unwrap();
                match pending.get_mut(&example.id) {
                    Some(flag) if *flag => {
                        *flag = false;
                        "The home side controlled the game.".into()
                    }
                    _ => gold_reply(&corpus, req),
                }
            }
            Prompt::Reask => gold_reply(&corpus, req),
            Prompt::Cell if cell_value(req) != "999" => "VALUE: 999".into(),
            Prompt::Cell => "KEEP".into(),
            Prompt::Row | Prompt::Table => "NO_CHANGE".into(),
        })
    })
}
