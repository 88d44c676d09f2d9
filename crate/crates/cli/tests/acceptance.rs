//! Acceptance suite. Prints one PASS / FAIL / SKIP line per criterion and
//! exits non-zero if any criterion fails. Criteria that need external data
//! or a live endpoint are skipped unless the corresponding environment
//! variables are set:
//!
//! - `TABLEGEN_ROTOWIRE_CORPUS`, `TABLEGEN_LIVESUM_CORPUS`: full corpora in
//!   the JSONL corpus format (all splits in one file)
//! - `TABLEGEN_LIVE_ENDPOINT`, `TABLEGEN_LIVE_MODEL` (+ `TABLEGEN_API_KEY`)

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tablegen_cli::run::REPORT_FILE;
use tablegen_cli::{cmd_evaluate, cmd_run, cmd_run_with_backend, cmd_stats, ConfigFile, ExperimentConfig};
use tablegen_core::backend::{CallSettings, ChatRequest, ModelClient, ScriptedBackend};
use tablegen_core::dataset::{parse_corpus, CorpusSchema, Difficulty, ExperimentExample, Split, MINI_LIVESUM};
use tablegen_core::metrics::{exact_match_scores, Averaging};
use tablegen_core::prompt::{build_prompt, PromptTemplates, Strategy, StrategyKind, SUBTASK_NAMES};
use tablegen_core::refine::{refine, FeedbackGranularity, RefinementConfig};
use tablegen_core::table::{parse_grid, repair_table, serialize_grid, Row, Table};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- 1

/// Independent canonical form: whitespace collapse, lowercase, one pair of
/// quotes, trailing percent signs, repeated until stable.
fn oracle_normalize(s: &str) -> String {
    let mut cur = s.to_string();
    loop {
        let mut next = cur.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        for q in ['"', '\''] {
            if next.len() >= 2 && next.starts_with(q) && next.ends_with(q) {
                next = next[1..next.len() - 1].to_string();
                break;
            }
        }
        if let Some(stripped) = next.strip_suffix('%') {
            next = stripped.to_string();
        }
        next = next.trim().to_string();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Brute-force pairwise matching over de-duplicated non-empty triples.
fn oracle_scores(pred: &Table, gold: &Table) -> (f64, f64, f64) {
    let triples = |t: &Table| {
        let mut out: Vec<[String; 3]> = Vec::new();
        for r in &t.rows {
            for (c, h) in t.column_headers.iter().enumerate().skip(1) {
                let v = oracle_normalize(r.cells.get(c).map_or("", String::as_str));
                if v.is_empty() {
                    continue;
                }
                let tr = [oracle_normalize(&r.cells[0]), oracle_normalize(h), v];
                if !out.contains(&tr) {
                    out.push(tr);
                }
            }
        }
        out
    };
    let (p, g) = (triples(pred), triples(gold));
    if p.is_empty() && g.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let matched = p.iter().filter(|a| g.iter().any(|b| b == *a)).count() as f64;
    let prec = if p.is_empty() { 0.0 } else { matched / p.len() as f64 };
    let rec = if g.is_empty() { 0.0 } else { matched / g.len() as f64 };
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    (prec, rec, f1)
}

fn random_small_table(rng: &mut ChaCha8Rng, headers: &[String]) -> Table {
    const ROWS: [&str; 5] = ["Hawks", "hawks ", "Celtics", "\"Nets\"", "Bulls"];
    const VALUES: [&str; 9] = ["", "1", "2", "10", "10%", "x", "X ", "'x'", "two words"];
    let n_rows = rng.random_range(0..=5);
    let rows = (0..n_rows)
        .map(|_| {
            let mut cells = vec![ROWS.choose(rng).unwrap().to_string()];
            cells.extend((1..headers.len()).map(|_| VALUES.choose(rng).unwrap().to_string()));
            Row { cells }
        })
        .collect();
    Table::new("t", headers.to_vec(), rows)
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let all_headers = ["Team", "Wins", "Losses", "Points", "Rebounds"];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let width = rng.random_range(2..=5);
        let headers: Vec<String> = all_headers[..width].iter().map(|s| s.to_string()).collect();
        let pred = random_small_table(&mut rng, &headers);
        let gold = random_small_table(&mut rng, &headers);
        let s = exact_match_scores(&pred, &gold);
        if (s.precision, s.recall, s.f1) != oracle_scores(&pred, &gold) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(mismatches == 0, || format!("{mismatches} of 1000 pairs differ from the oracle"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 pairs, 0 mismatches, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let report = cmd_evaluate(
        &fixture("eval/predictions.jsonl"),
        &fixture("eval/corpus.jsonl"),
        CorpusSchema::Livesum,
        Averaging::Macro,
    )
    .map_err(|e| e.to_string())?;
    let a = &report.aggregate;
    let easy = a.numeric.get(&Difficulty::Easy).ok_or("no easy scores")?;
    let hard = a.numeric.get(&Difficulty::Hard).ok_or("no hard scores")?;
    let checks = [
        ("precision", a.exact_match_precision, 0.625),
        ("recall", a.exact_match_recall, 0.75),
        ("f1", a.exact_match_f1, 0.675),
        ("easy rmse", easy.rmse, 0.5f64.sqrt()),
        ("easy er", easy.error_rate, 12.5),
        ("hard rmse", hard.rmse, (105.0f64 / 8.0).sqrt()),
        ("hard er", hard.error_rate, 37.5),
    ];
    for (name, got, want) in checks {
        ensure(close(got, want, 1e-9), || format!("{name}: got {got}, want {want}"))?;
    }
    Ok("P/R/F1 0.625/0.75/0.675, RMSE 0.7071/3.6228, ER 12.5/37.5 within 1e-9".into())
}

// ---------------------------------------------------------------- 3

/// Feedback that rewrites every value to 999 until the unit already holds
/// only 999s, then accepts. Round 1 always revises; round 2 never does.
fn revise_to_999(corpus: Vec<ExperimentExample>) -> ScriptedBackend {
    ScriptedBackend::new(move |req: &ChatRequest| {
        let u = &req.messages.last().unwrap().content;
        Ok(match classify(req) {
            Prompt::Generate | Prompt::Reask => gold_reply(&corpus, req),
            Prompt::Cell if cell_value(req) == "999" => "KEEP".into(),
            Prompt::Cell => "VALUE: 999".into(),
            Prompt::Row => {
                let row = u.lines().find_map(|l| l.strip_prefix("Generated row: ")).unwrap();
                let cells: Vec<&str> = row.split(" | ").collect();
                if cells[1..].iter().all(|c| *c == "999") {
                    "NO_CHANGE".into()
                } else {
                    let mut out = vec![cells[0].to_string()];
                    out.extend(cells[1..].iter().map(|_| "999".to_string()));
                    out.join(" | ")
                }
            }
            Prompt::Table => {
                let grid: String = u
                    .split("Generated table:\n")
                    .nth(1)
                    .unwrap()
                    .split("\n\n")
                    .next()
                    .unwrap()
                    .to_string();
                let mut t = parse_grid(&grid).unwrap();
                if t.rows.iter().all(|r| r.cells[1..].iter().all(|c| c == "999")) {
                    "NO_CHANGE".into()
                } else {
                    for r in &mut t.rows {
                        for c in &mut r.cells[1..] {
                            *c = "999".into();
                        }
                    }
                    format!("Every value needs rechecking.\nFINAL TABLE:\n{}", serialize_grid(&t))
                }
            }
        })
    })
}

fn mini_config(corpus: PathBuf, schema: CorpusSchema, out: &Path, level: FeedbackGranularity, k: u32) -> ExperimentConfig {
    ConfigFile {
        corpus: Some(corpus),
        schema: Some(schema),
        strategy: Some("subtask_guided".into()),
        feedback_level: Some(level.to_string()),
        max_iterations: Some(k),
        backend: Some("replay".into()),
        transcript: Some(PathBuf::from("unused")),
        workers: Some(2),
        out: Some(out.to_path_buf()),
        ..Default::default()
    }
    .resolve()
    .unwrap()
}

fn criterion_3() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpora = [
        (core_data("mini_rotowire.jsonl"), CorpusSchema::Rotowire),
        (core_data("mini_livesum.jsonl"), CorpusSchema::Livesum),
    ];
    let mut runs = 0;
    let mut total_calls = 0;
    for (path, schema) in &corpora {
        let corpus = parse_corpus(&std::fs::read_to_string(path).unwrap(), *schema).unwrap();
        for level in [FeedbackGranularity::Table, FeedbackGranularity::Row, FeedbackGranularity::Cell] {
            for k in [1u32, 2, 3] {
                let config = mini_config(path.clone(), *schema, dir.path(), level, k);
                let outcome = cmd_run_with_backend(&config, Arc::new(revise_to_999(corpus.clone())))
                    .map_err(|e| e.to_string())?;
                // k = 1: one round. k >= 2: round 1 revises, round 2 revises
                // nothing and stops the loop.
                let rounds = k.min(2) as u64;
                for ex in &corpus {
                    let per_round: u64 = ex
                        .targets
                        .iter()
                        .map(|t| {
                            let gold = t.gold.as_ref().unwrap();
                            match level {
                                FeedbackGranularity::Table => 1,
                                FeedbackGranularity::Row => gold.n_rows() as u64,
                                FeedbackGranularity::Cell => gold.n_data_cells() as u64,
                            }
                        })
                        .sum();
                    let expected = ex.targets.len() as u64 + rounds * per_round;
                    let got = outcome.manifest.examples.iter().find(|r| r.id == ex.id).map(|r| r.calls);
                    ensure(got == Some(expected), || {
                        format!("{:?} {level} k={k} {}: expected {expected} calls, ledger has {got:?}", schema, ex.id)
                    })?;
                    total_calls += expected;
                }
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs (2 corpora x 3 levels x k=1..3), {total_calls} calls, 0 discrepancies"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = fixture_config(dir.path());
    let a = cmd_run(&config).map_err(|e| e.to_string())?;
    let b = cmd_run(&config).map_err(|e| e.to_string())?;
    let ra = std::fs::read(a.run_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    let rb = std::fs::read(b.run_dir.join(REPORT_FILE)).map_err(|e| e.to_string())?;
    ensure(a.manifest.n_ok == 5, || format!("{} of 5 examples ok", a.manifest.n_ok))?;
    ensure(ra == rb, || "reports differ".into())?;
    Ok(format!("5/5 ok, report.json byte-identical ({} bytes)", ra.len()))
}

// ---------------------------------------------------------------- 5

fn word(rng: &mut ChaCha8Rng, first_alpha: bool) -> String {
    const ALPHA: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
    const ANY: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.%-'";
    let len = rng.random_range(1..=6);
    (0..len)
        .map(|i| {
            let set = if i == 0 && first_alpha { ALPHA } else { ANY };
            *set.choose(rng).unwrap() as char
        })
        .collect()
}

fn phrase(rng: &mut ChaCha8Rng, min_words: usize, first_alpha: bool) -> String {
    let n = rng.random_range(min_words..=2);
    (0..n).map(|_| word(rng, first_alpha)).collect::<Vec<_>>().join(" ")
}

fn random_valid_table(rng: &mut ChaCha8Rng) -> Table {
    let width = rng.random_range(2..=6);
    let mut headers: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    while headers.len() < width {
        let h = phrase(rng, 1, true);
        if seen.insert(oracle_normalize(&h)) {
            headers.push(h);
        }
    }
    let n_rows = rng.random_range(0..=6);
    let rows = (0..n_rows)
        .map(|_| {
            let mut cells = vec![phrase(rng, 1, true)];
            cells.extend((1..width).map(|_| phrase(rng, 0, false)));
            Row { cells }
        })
        .collect();
    Table::new("", headers, rows)
}

/// Grid text for `t` with its columns shuffled, some columns dropped, junk
/// columns added, ragged rows, header spelling variants and markdown borders.
/// At least one schema column survives.
fn corrupt(rng: &mut ChaCha8Rng, t: &Table) -> String {
    let width = t.n_columns();
    let mut cols: Vec<Option<usize>> = (0..width).map(Some).collect();
    cols.shuffle(rng);
    let n_drop = rng.random_range(0..width);
    cols.truncate(width - n_drop);
    for _ in 0..rng.random_range(0..=2) {
        let at = rng.random_range(0..=cols.len());
        cols.insert(at, None);
    }
    if cols.len() < 2 {
        cols.push(None);
    }
    let mut junk = 0;
    let header: Vec<String> = cols
        .iter()
        .map(|c| match c {
            Some(i) => {
                let h = &t.column_headers[*i];
                match rng.random_range(0..4) {
                    0 => h.to_uppercase(),
                    1 => format!("\"{h}\""),
                    2 => format!("  {h} "),
                    _ => h.clone(),
                }
            }
            None => {
                junk += 1;
                format!("zz_extra_{junk}")
            }
        })
        .collect();
    let bordered = rng.random_bool(0.3);
    let line = |cells: &[String]| {
        if bordered {
            format!("| {} |", cells.join(" | "))
        } else {
            cells.join(" | ")
        }
    };
    let mut lines = vec![line(&header)];
    if bordered {
        lines.push(format!("|{}|", vec!["---"; header.len()].join("|")));
    }
    for r in &t.rows {
        let mut cells: Vec<String> = cols
            .iter()
            .map(|c| match c {
                Some(i) => r.cells[*i].clone(),
                None => "junk".into(),
            })
            .collect();
        match rng.random_range(0..4) {
            0 => {
                let keep = rng.random_range(1..=cells.len());
                cells.truncate(keep);
            }
            1 => cells.extend((0..rng.random_range(1..=2)).map(|_| "spill".to_string())),
            _ => {}
        }
        // Truncation must not erase the row entirely: a blank or dash-only
        // line is not a row in any reading of the grid.
        if cells.iter().all(|c| c.chars().all(|ch| matches!(ch, '-' | ':' | ' '))) {
            cells.push("spill".into());
        }
        lines.push(line(&cells));
    }
    lines.join("\n")
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut round_trip_failures = 0;
    for _ in 0..10_000 {
        let t = random_valid_table(&mut rng);
        if t.validate().is_err() || parse_grid(&serialize_grid(&t)).ok().as_ref() != Some(&t) {
            round_trip_failures += 1;
        }
    }
    let mut repair_failures = 0;
    let mut first_failure = None;
    for _ in 0..10_000 {
        let t = random_valid_table(&mut rng);
        let grid = corrupt(&mut rng, &t);
        let conforms = parse_grid(&grid)
            .map_err(|e| e.to_string())
            .and_then(|p| repair_table(&p, &t.column_headers).map_err(|e| e.to_string()))
            .and_then(|f| {
                let ok = f.column_headers == t.column_headers
                    && f.rows.iter().all(|r| r.len() == t.n_columns())
                    && f.n_rows() == t.n_rows()
                    && f.validate().is_ok();
                if ok {
                    Ok(())
                } else {
                    Err("non-conformant output".into())
                }
            });
        if let Err(e) = conforms {
            repair_failures += 1;
            first_failure.get_or_insert_with(|| format!("{e} on:\n{grid}"));
        }
    }
    ensure(round_trip_failures == 0, || format!("{round_trip_failures} round-trip failures"))?;
    ensure(repair_failures == 0, || {
        format!("{repair_failures} repair failures; first: {}", first_failure.unwrap_or_default())
    })?;
    Ok("10000 round trips, 10000 corrupted grids repaired, 0 failures".into())
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    let templates = PromptTemplates::builtin();
    let corpora = [mini_rotowire(), parse_corpus(MINI_LIVESUM, CorpusSchema::Livesum).unwrap()];
    let mut tables = 0;
    for ex in corpora.iter().flatten() {
        for target in &ex.targets {
            let initial = target.gold.clone().unwrap();
            for level in [FeedbackGranularity::Table, FeedbackGranularity::Row, FeedbackGranularity::Cell] {
                let keep = ScriptedBackend::new(|req| {
                    Ok(if classify(req) == Prompt::Cell { "KEEP".into() } else { "NO_CHANGE".into() })
                });
                let client = ModelClient::new(Arc::new(keep), CallSettings::default());
                let config = RefinementConfig::new(level, 2);
                let r = refine(&templates, &client, &ex.id, &ex.passage, &initial, target, &config)
                    .map_err(|e| e.to_string())?;
                ensure(r.final_table == initial, || format!("{} {} {level}: all-keep changed the table", ex.id, target.name))?;
            }

            // One scripted revision of the last data cell of the first row.
            let row_header = initial.rows[0].header().to_string();
            let col = initial.n_columns() - 1;
            let column = initial.column_headers[col].clone();
            let (rh, ch) = (row_header.clone(), column.clone());
            let single = ScriptedBackend::new(move |req| {
                let u = &req.messages.last().unwrap().content;
                let here = u.contains(&format!("Row header: {rh}\n")) && u.contains(&format!("Column header: {ch}\n"));
                Ok(if here && cell_value(req) != "777" { "VALUE: 777".into() } else { "KEEP".into() })
            });
            let client = ModelClient::new(Arc::new(single), CallSettings::default());
            let config = RefinementConfig::new(FeedbackGranularity::Cell, 2);
            let r = refine(&templates, &client, &ex.id, &ex.passage, &initial, target, &config)
                .map_err(|e| e.to_string())?;
            let diffs: Vec<(usize, usize)> = (0..initial.n_rows())
                .flat_map(|i| (0..initial.n_columns()).map(move |j| (i, j)))
                .filter(|&(i, j)| initial.rows[i].cells[j] != r.final_table.rows[i].cells[j])
                .collect();
            ensure(diffs == [(0, col)] && r.final_table.rows[0].cells[col] == "777", || {
                format!("{} {}: single revision changed {diffs:?}", ex.id, target.name)
            })?;
            ensure(r.final_table.column_headers == initial.column_headers, || "headers changed".into())?;
            tables += 1;
        }
    }
    Ok(format!("{tables} tables x 3 levels unchanged under all-keep; single VALUE changed exactly 1 cell each"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let corpus = mini_rotowire();
    let example = corpus.iter().find(|e| e.id == "rw-001").unwrap();
    let shot = corpus.iter().find(|e| e.id == "rw-005").unwrap().clone();
    let golden_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    for kind in StrategyKind::ALL {
        let strategy = if kind.needs_shot() { Strategy::with_shot(kind, shot.clone()) } else { Strategy::zero_shot(kind) };
        let plan = build_prompt(&PromptTemplates::builtin(), &strategy, example, example.target("Player").unwrap())
            .map_err(|e| e.to_string())?;
        let mut rendered = String::new();
        for m in &plan.messages {
            let role = serde_json::to_value(m.role).unwrap();
            rendered.push_str(&format!("### {}\n{}\n", role.as_str().unwrap(), m.content));
        }
        let path = golden_dir.join(format!("{}.txt", kind.as_str()));
        let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(rendered == expected, || format!("{kind} differs from {}", path.display()))?;
        if kind == StrategyKind::SubtaskGuided {
            let mut last = 0;
            for (i, name) in SUBTASK_NAMES.iter().enumerate() {
                let at = rendered.find(&format!("{}. {name}", i + 1)).ok_or_else(|| format!("missing step {name}"))?;
                ensure(at > last, || format!("step {name} out of order"))?;
                last = at;
            }
        }
    }
    Ok("5 strategies byte-identical to golden files; 5 sub-task steps in order".into())
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    // The LiveSum table shape is checked on the bundled sample regardless.
    let mini = match cmd_stats(&core_data("mini_livesum.jsonl"), CorpusSchema::Livesum) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let t = &mini.tables["Team"];
    if (t.avg_rows, t.avg_cols, t.avg_nonempty_cells) != (2.0, 8.0, 16.0) {
        return Outcome::Fail(format!("mini LiveSum shape {t:?}"));
    }
    let rotowire = std::env::var_os("TABLEGEN_ROTOWIRE_CORPUS");
    let livesum = std::env::var_os("TABLEGEN_LIVESUM_CORPUS");
    if rotowire.is_none() && livesum.is_none() {
        return Outcome::Skip(
            "full corpora not available (set TABLEGEN_ROTOWIRE_CORPUS / TABLEGEN_LIVESUM_CORPUS); \
             bundled LiveSum sample has 2 rows / 8 data columns / 16 cells"
                .into(),
        );
    }
    let mut notes = Vec::new();
    if let Some(path) = rotowire {
        let s = match cmd_stats(Path::new(&path), CorpusSchema::Rotowire) {
            Ok(s) => s,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let split = |k| s.n_by_split.get(&k).copied().unwrap_or(0);
        let player = &s.tables["Player"];
        // Split sizes are given to the nearest hundred for train.
        let checks = [
            ("train split", (split(Split::Train) as f64 / 100.0).round() == 34.0),
            ("validation split", split(Split::Validation) == 727),
            ("test split", split(Split::Test) == 728),
            ("avg tokens", close(s.avg_tokens, 351.05, 0.5)),
            ("player rows", close(player.avg_rows, 7.26, 0.01)),
            ("player non-empty %", close(player.nonempty_pct, 43.93, 0.1)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Outcome::Fail(format!("RotoWire {name} out of tolerance: {s:?}"));
            }
        }
        notes.push(format!("RotoWire avg tokens {:.2}, Player rows {:.2}", s.avg_tokens, player.avg_rows));
    }
    if let Some(path) = livesum {
        let s = match cmd_stats(Path::new(&path), CorpusSchema::Livesum) {
            Ok(s) => s,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let t = &s.tables["Team"];
        if (t.avg_rows, t.avg_cols, t.avg_nonempty_cells) != (2.0, 8.0, 16.0) {
            return Outcome::Fail(format!("LiveSum shape {t:?}"));
        }
        notes.push("LiveSum 2 x 8, 16 cells".into());
    }
    Outcome::Pass(notes.join("; "))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let (Some(endpoint), Some(model)) = (std::env::var("TABLEGEN_LIVE_ENDPOINT").ok(), std::env::var("TABLEGEN_LIVE_MODEL").ok())
    else {
        return Outcome::Skip("optional live smoke test (set TABLEGEN_LIVE_ENDPOINT and TABLEGEN_LIVE_MODEL)".into());
    };
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let config = ConfigFile {
        corpus: Some(core_data("mini_rotowire.jsonl")),
        schema: Some(CorpusSchema::Rotowire),
        strategy: Some("subtask_guided".into()),
        backend: Some("http".into()),
        endpoint: Some(endpoint),
        model: Some(model),
        workers: Some(2),
        out: Some(dir.path().to_path_buf()),
        ..Default::default()
    }
    .resolve();
    let outcome = match config.map_err(|e| e.to_string()).and_then(|c| cmd_run(&c).map_err(|e| e.to_string())) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(e),
    };
    let m = &outcome.manifest;
    if m.n_ok < 4 {
        return Outcome::Fail(format!("only {} of {} examples ok", m.n_ok, m.examples.len()));
    }
    let Some(report) = &outcome.report else { return Outcome::Fail("no report".into()) };
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    let scores_ok = report
        .examples
        .iter()
        .flat_map(|e| &e.tables)
        .all(|t| in_unit(t.exact.precision) && in_unit(t.exact.recall) && in_unit(t.exact.f1));
    if !scores_ok {
        return Outcome::Fail("score outside [0, 1]".into());
    }
    Outcome::Pass(format!("{}/{} ok, {} calls, exact match {:.4}", m.n_ok, m.examples.len(), m.ledger.calls, report.aggregate.exact_match_f1))
}

fn main() {
    let wrap = |c: Check| match c {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 metric oracle equivalence", Box::new(move || wrap(criterion_1()))),
        ("2 hand-fixture metrics", Box::new(move || wrap(criterion_2()))),
        ("3 call-count law", Box::new(move || wrap(criterion_3()))),
        ("4 replay determinism", Box::new(move || wrap(criterion_4()))),
        ("5 parser round-trip and repair", Box::new(move || wrap(criterion_5()))),
        ("6 refinement safety", Box::new(move || wrap(criterion_6()))),
        ("7 prompt golden files", Box::new(move || wrap(criterion_7()))),
        ("8 corpus statistics", Box::new(criterion_8)),
        ("9 live smoke", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    println!();
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Outcome::Fail("panicked".into()));
        match outcome {
            Outcome::Pass(d) => println!("PASS  criterion {name}: {d}"),
            Outcome::Skip(d) => println!("SKIP  criterion {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  criterion {name}: {d}");
            }
        }
    }
    println!();
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all required criteria passed");
}
