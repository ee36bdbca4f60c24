//! Synthetic topic annotations for downstream fine-tuning.
//!
//! Sessions are split 40/40/20. A transformer trained on the first part labels
//! every turn-pair of the second; gold records come from the topic model. A
//! record's label is the topic recommended after its turn-pair, matching the
//! action convention of the trajectories.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alliance::RewardScale;
use crate::corpus::SessionPairs;
use crate::dtmodel::{DTParams, Real};
use crate::error::{Error, Result};
use crate::train::predict_steps;
use crate::trajectory::SessionTrajectory;

pub const LABELGEN_SPLIT: [f64; 3] = [0.4, 0.4, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    DtSynthetic,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub text: String,
    pub label: usize,
    pub source: LabelSource,
    pub session_id: String,
    pub step_index: usize,
}

struct TextIndex<'a>(HashMap<&'a str, &'a SessionPairs>);

impl<'a> TextIndex<'a> {
    fn new(pairs: &'a [SessionPairs]) -> Self {
        TextIndex(pairs.iter().map(|s| (s.session_id.as_str(), s)).collect())
    }

    fn text(&self, session_id: &str, step: usize) -> Result<String> {
        self.0
            .get(session_id)
            .and_then(|s| s.pairs.get(step))
            .map(|p| p.combined_text())
            .ok_or_else(|| Error::NotFound(format!("turn-pair {step} of session {session_id:?}")))
    }
}

/// One record per turn-pair of `middle`: the teacher-forced argmax at that
/// step.
pub fn generate_labels<F: Real>(
    p: &DTParams<F>,
    middle: &[SessionTrajectory],
    pairs: &[SessionPairs],
    scale: RewardScale,
) -> Result<Vec<FinetuneRecord>> {
    let texts = TextIndex::new(pairs);
    predict_steps(p, middle, scale, true)?
        .into_iter()
        .map(|pr| {
            Ok(FinetuneRecord {
                text: texts.text(&pr.session_id, pr.step)?,
                label: pr.predicted,
                source: LabelSource::DtSynthetic,
                session_id: pr.session_id,
                step_index: pr.step,
            })
        })
        .collect()
}

/// Gold records for every step with a recorded action.
pub fn export_gold_labels(partition: &[SessionTrajectory], pairs: &[SessionPairs]) -> Result<Vec<FinetuneRecord>> {
    let texts = TextIndex::new(pairs);
    let mut out = Vec::new();
    for traj in partition {
        for (t, step) in traj.steps.iter().enumerate() {
            if let Some(label) = step.action {
                out.push(FinetuneRecord {
                    text: texts.text(&traj.session_id, t)?,
                    label,
                    source: LabelSource::Gold,
                    session_id: traj.session_id.clone(),
                    step_index: t,
                });
            }
        }
    }
    Ok(out)
}

/// Fails if a session id occurs in more than one partition.
pub fn check_disjoint(parts: &[&[SessionTrajectory]]) -> Result<()> {
    let mut seen = HashSet::new();
    for part in parts {
        for t in *part {
            if !seen.insert(t.session_id.as_str()) {
                return Err(Error::Validation(format!("session {:?} appears in two partitions", t.session_id)));
            }
        }
    }
    Ok(())
}

/// Line-delimited JSON sorted by (session_id, step_index).
pub fn finetune_jsonl(records: &[FinetuneRecord]) -> Result<String> {
    let mut sorted: Vec<&FinetuneRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.session_id, a.step_index).cmp(&(&b.session_id, b.step_index)));
    let mut s = String::new();
    for r in sorted {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn export_finetune_file(records: &[FinetuneRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, finetune_jsonl(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_finetune_file(path: impl AsRef<Path>) -> Result<Vec<FinetuneRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}
