//! Determinism check: run twice on one transcript and compare reports.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::run::{cmd_run, RunError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCheck {
    pub runs: Vec<PathBuf>,
    /// Both replay runs wrote byte-identical reports.
    pub identical: bool,
    /// Comparison with a previously written report, when one was given.
    pub matches_expected: Option<bool>,
    /// First differing line (1-based) of the first mismatch found.
    pub first_difference: Option<usize>,
}

impl ReplayCheck {
    pub fn passed(&self) -> bool {
        self.identical && self.matches_expected != Some(false)
    }
}

fn first_difference(a: &str, b: &str) -> Option<usize> {
    if a == b {
        return None;
    }
    let mut la = a.lines();
    let mut lb = b.lines();
    (1..).find(|_| la.next() != lb.next())
}

/// Replays `transcript` twice through the configured pipeline. Each run
/// gets its own run directory.
pub fn cmd_replay_check(
    config: &ExperimentConfig,
    transcript: &Path,
    expected_report: Option<&Path>,
) -> Result<ReplayCheck, RunError> {
    let config = config.replaying(transcript.to_path_buf());
    let read_report = |outcome: &crate::run::RunOutcome| -> Result<String, RunError> {
        match &outcome.manifest.artifacts.report {
            Some(p) => Ok(std::fs::read_to_string(p)?),
            None => Err(RunError::ConfigInvalid("replay produced no report: every example failed".into())),
        }
    };
    let first = cmd_run(&config)?;
    let second = cmd_run(&config)?;
    let (a, b) = (read_report(&first)?, read_report(&second)?);
    let mut diff = first_difference(&a, &b);
    let matches_expected = match expected_report {
        Some(p) => {
            let expected = std::fs::read_to_string(p)?;
            let d = first_difference(&expected, &a);
            diff = diff.or(d);
            Some(d.is_none())
        }
        None => None,
    };
    Ok(ReplayCheck {
        runs: vec![first.run_dir, second.run_dir],
        identical: a == b,
        matches_expected,
        first_difference: diff,
    })
}
