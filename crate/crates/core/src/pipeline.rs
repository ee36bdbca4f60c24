//! Glue between the stages: transcripts to trajectories in one call.

use serde::{Deserialize, Serialize};

use crate::alliance::{parse_inventory_items, Inventory, BUNDLED_INVENTORY};
use crate::corpus::{segment_sessions, tokenize, ConditionFilter, SessionPairs, Transcript};
use crate::embed::{embed_turn_pair, train_sgns, SgnsConfig, StateVector, VocabEmbedding};
use crate::error::{Error, Result};
use crate::topics::{fit_topics, TopicModel};
use crate::trajectory::{build_trajectories, SessionTrajectory};

/// One sentence per turn, tokenized.
pub fn corpus_sentences(transcripts: &[Transcript]) -> Vec<Vec<String>> {
    transcripts
        .iter()
        .flat_map(|t| t.turns.iter())
        .map(|turn| tokenize(&turn.text))
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn pair_states(sessions: &[SessionPairs], v: &VocabEmbedding) -> Vec<StateVector> {
    sessions.iter().flat_map(|s| s.pairs.iter()).map(|p| embed_turn_pair(p, v)).collect()
}

/// Inventory from `text`, or the bundled paraphrased items when `None`.
pub fn inventory_from(text: Option<&str>, v: &VocabEmbedding) -> Result<Inventory> {
    Inventory::new(parse_inventory_items(text.unwrap_or(BUNDLED_INVENTORY))?, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub sgns: SgnsConfig,
    pub n_topics: usize,
    pub topic_seed: u64,
    pub condition: ConditionFilter,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { sgns: SgnsConfig::default(), n_topics: 8, topic_seed: 1, condition: ConditionFilter::All }
    }
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub sessions: Vec<SessionPairs>,
    pub vectors: VocabEmbedding,
    pub topics: TopicModel,
    pub inventory: Inventory,
    pub trajectories: Vec<SessionTrajectory>,
}

/// Trains vectors and topics on every session, then keeps the sessions
/// admitted by the condition filter as trajectories.
pub fn build_artifacts(transcripts: &[Transcript], cfg: &StageConfig, inventory_text: Option<&str>) -> Result<Artifacts> {
    let (vectors, _) = train_sgns(&corpus_sentences(transcripts), &cfg.sgns)?;
    let all = segment_sessions(transcripts);
    let states = pair_states(&all, &vectors);
    let (topics, _) = fit_topics(&states, cfg.n_topics, cfg.topic_seed)?;
    let inventory = inventory_from(inventory_text, &vectors)?;
    let sessions: Vec<SessionPairs> = all.into_iter().filter(|s| cfg.condition.admits(s.condition)).collect();
    if sessions.is_empty() {
        return Err(Error::InsufficientData(format!("no sessions match condition {}", cfg.condition)));
    }
    let trajectories = build_trajectories(&sessions, &vectors, &topics, &inventory);
    Ok(Artifacts { sessions, vectors, topics, inventory, trajectories })
}
