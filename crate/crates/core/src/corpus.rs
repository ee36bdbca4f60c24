//! Transcript loading and turn-pair segmentation.
//!
//! Transcripts are stored one session per line:
//!
//! ```text
//! {"session_id": "s01", "condition": "anxiety", "turns": [{"speaker": "patient", "text": "..."}, ...]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Depression,
    Anxiety,
    Schizophrenia,
    Suicidal,
    Other,
}

impl Condition {
    pub const CLINICAL: [Condition; 4] = [
        Condition::Depression,
        Condition::Anxiety,
        Condition::Schizophrenia,
        Condition::Suicidal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Depression => "depression",
            Condition::Anxiety => "anxiety",
            Condition::Schizophrenia => "schizophrenia",
            Condition::Suicidal => "suicidal",
            Condition::Other => "other",
        }
    }

    /// Lenient parse: anything unrecognised is `Other`.
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "depression" => Condition::Depression,
            "anxiety" => Condition::Anxiety,
            "schizophrenia" => Condition::Schizophrenia,
            "suicidal" => Condition::Suicidal,
            _ => Condition::Other,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Condition::parse_lenient(&s))
    }
}

/// Session filter used by condition-stratified runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionFilter {
    All,
    Only(Condition),
}

impl ConditionFilter {
    pub fn admits(self, c: Condition) -> bool {
        match self {
            ConditionFilter::All => true,
            ConditionFilter::Only(want) => want == c,
        }
    }
}

impl FromStr for ConditionFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "all" {
            return Ok(ConditionFilter::All);
        }
        match Condition::parse_lenient(&t) {
            Condition::Other if t != "other" => {
                Err(Error::Validation(format!("unknown condition filter {s:?}")))
            }
            c => Ok(ConditionFilter::Only(c)),
        }
    }
}

impl Serialize for ConditionFilter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConditionFilter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ConditionFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConditionFilter::All => f.write_str("all"),
            ConditionFilter::Only(c) => c.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Therapist,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub condition: Condition,
    pub turns: Vec<Turn>,
}

/// One patient utterance followed by the therapist's response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPair {
    pub session_id: String,
    pub index: usize,
    pub patient_text: String,
    pub therapist_text: String,
}

impl TurnPair {
    /// Patient text, a single space, then therapist text.
    pub fn combined_text(&self) -> String {
        format!("{} {}", self.patient_text, self.therapist_text)
    }
}

/// All turn-pairs of one session, with its condition label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPairs {
    pub session_id: String,
    pub condition: Condition,
    pub pairs: Vec<TurnPair>,
}

pub fn parse_transcripts<R: BufRead>(reader: R) -> Result<Vec<Transcript>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transcript = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if t.session_id.is_empty() {
            return Err(Error::Parse { line: lineno, msg: "empty session_id".into() });
        }
        if !seen.insert(t.session_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate session_id {:?} at line {lineno}",
                t.session_id
            )));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(BufReader::new(f))
}

/// Writes one JSON record per line, in order.
pub fn write_transcripts(ts: &[Transcript], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in ts {
        out.push_str(&serde_json::to_string(t).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Merge same-speaker runs, then pair each patient run with the therapist
/// run that follows it.
pub fn segment_turn_pairs(t: &Transcript) -> Vec<TurnPair> {
    let mut merged: Vec<(Speaker, String)> = Vec::new();
    for turn in &t.turns {
        match merged.last_mut() {
            Some((sp, text)) if *sp == turn.speaker => {
                text.push(' ');
                text.push_str(&turn.text);
            }
            _ => merged.push((turn.speaker, turn.text.clone())),
        }
    }

    let mut pairs = Vec::new();
    let mut i = 0;
    while i < merged.len() {
        if merged[i].0 == Speaker::Patient && i + 1 < merged.len() {
            // after merging, the next run is necessarily the therapist
            pairs.push(TurnPair {
                session_id: t.session_id.clone(),
                index: pairs.len(),
                patient_text: merged[i].1.clone(),
                therapist_text: merged[i + 1].1.clone(),
            });
            i += 2;
        } else {
            i += 1;
        }
    }
    pairs
}

pub fn segment_sessions(transcripts: &[Transcript]) -> Vec<SessionPairs> {
    transcripts
        .iter()
        .map(|t| SessionPairs {
            session_id: t.session_id.clone(),
            condition: t.condition,
            pairs: segment_turn_pairs(t),
        })
        .collect()
}

/// Lowercase, split on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn turn(speaker: Speaker, text: &str) -> Turn {
        Turn { speaker, text: text.to_string() }
    }

    fn transcript(turns: Vec<Turn>) -> Transcript {
        Transcript { session_id: "s".into(), condition: Condition::Other, turns }
    }

    use Speaker::{Patient as P, Therapist as T};

    #[test]
    fn parses_lines_in_order() {
        let data = concat!(
            r#"{"session_id":"a","condition":"anxiety","turns":[{"speaker":"patient","text":"hi"}]}"#,
            "\n",
            r#"{"session_id":"b","condition":"grief","turns":[]}"#,
            "\n"
        );
        let ts = parse_transcripts(data.as_bytes()).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts[0].session_id, "a");
        assert_eq!(ts[0].condition, Condition::Anxiety);
        assert_eq!(ts[1].condition, Condition::Other);
    }

    #[test]
    fn empty_input_is_empty_list() {
        assert!(parse_transcripts("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn missing_turns_reports_line() {
        let data = concat!(
            r#"{"session_id":"a","condition":"anxiety","turns":[]}"#,
            "\n",
            r#"{"session_id":"b","condition":"anxiety"}"#,
            "\n"
        );
        match parse_transcripts(data.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_session_rejected() {
        let line = r#"{"session_id":"a","condition":"anxiety","turns":[]}"#;
        let data = format!("{line}\n{line}\n");
        assert!(matches!(parse_transcripts(data.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn pairs_alternating_turns() {
        let t = transcript(vec![turn(P, "a"), turn(T, "b"), turn(P, "c"), turn(T, "d")]);
        let pairs = segment_turn_pairs(&t);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].index, 1);
        assert_eq!(pairs[1].patient_text, "c");
        assert_eq!(pairs[1].therapist_text, "d");
    }

    #[test]
    fn merges_runs_before_pairing() {
        let t = transcript(vec![
            turn(P, "a"),
            turn(P, "b"),
            turn(T, "c"),
            turn(T, "d"),
            turn(P, "e"),
            turn(T, "f"),
        ]);
        let pairs = segment_turn_pairs(&t);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].patient_text, "a b");
        assert_eq!(pairs[0].therapist_text, "c d");
    }

    #[test]
    fn leading_therapist_and_trailing_patient_dropped() {
        let t = transcript(vec![turn(T, "x"), turn(P, "y")]);
        assert!(segment_turn_pairs(&t).is_empty());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, world!"), vec!["hello", "world"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("don't stop"), vec!["don", "t", "stop"]);
    }

    #[test]
    fn condition_filter_parse() {
        assert_eq!("all".parse::<ConditionFilter>().unwrap(), ConditionFilter::All);
        assert_eq!(
            "Anxiety".parse::<ConditionFilter>().unwrap(),
            ConditionFilter::Only(Condition::Anxiety)
        );
        assert!("nonsense".parse::<ConditionFilter>().is_err());
    }

    fn arb_turns() -> impl Strategy<Value = Vec<Turn>> {
        prop::collection::vec(
            (any::<bool>(), "[a-z]{1,4}( [a-z]{1,4}){0,2}").prop_map(|(p, text)| Turn {
                speaker: if p { P } else { T },
                text,
            }),
            0..12,
        )
    }

    fn merged_count(turns: &[Turn]) -> usize {
        turns.windows(2).filter(|w| w[0].speaker != w[1].speaker).count()
            + usize::from(!turns.is_empty())
    }

    proptest! {
        #[test]
        fn pair_count_bounded_by_merged_runs(turns in arb_turns()) {
            let n = merged_count(&turns);
            let pairs = segment_turn_pairs(&transcript(turns));
            prop_assert!(pairs.len() <= n / 2);
            for (i, p) in pairs.iter().enumerate() {
                prop_assert_eq!(p.index, i);
            }
        }

        #[test]
        fn matched_tokens_preserved(turns in arb_turns()) {
            let pairs = segment_turn_pairs(&transcript(turns.clone()));
            let paired: Vec<String> = pairs
                .iter()
                .flat_map(|p| tokenize(&p.combined_text()))
                .collect();
            let all: Vec<String> = turns.iter().flat_map(|t| tokenize(&t.text)).collect();
            // every paired token appears, in order, as a subsequence of the input
            let mut it = all.iter();
            for tok in &paired {
                prop_assert!(it.any(|t| t == tok));
            }
        }

        #[test]
        fn tokenize_idempotent(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }
    }
}
