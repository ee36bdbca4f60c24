//! Synthetic counseling corpus with planted topics and planted rewards.
//!
//! Each topic owns a disjoint word cluster. Both turns of a turn-pair draw
//! from the pair's topic. Topic sequences follow one of two seeded Markov
//! rules per session:
//!
//! * engaged sessions mostly step to the topic's designated successor
//!   (`next = cur + 1`);
//! * drifting sessions mostly follow a second-order rule that depends on
//!   the previous topic as well (`next = cur + prev + 3`).
//!
//! Whenever a pair's topic was reached through the designated successor
//! transition, the therapist's reply carries alliance language, so the
//! alliance reward favors that transition. Predicting the next topic well
//! needs the recent history or the return-to-go, not just the current pair.

use std::fmt::Write as _;
use std::path::Path;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Condition, Speaker, Transcript, Turn};
use crate::error::{Error, Result};

const TOPIC_WORDS: [[&str; 12]; 8] = [
    ["sleep", "insomnia", "nightmares", "bedtime", "tired", "exhausted", "napping", "awake", "dreams", "rest", "pillow", "midnight"],
    ["mother", "father", "sister", "brother", "parents", "siblings", "cousin", "grandmother", "household", "childhood", "uncle", "aunt"],
    ["job", "boss", "coworkers", "office", "deadline", "salary", "promotion", "career", "meeting", "manager", "shift", "overtime"],
    ["doctor", "medication", "pills", "prescription", "dosage", "clinic", "symptoms", "headache", "appetite", "pharmacy", "nurse", "diagnosis"],
    ["partner", "girlfriend", "boyfriend", "marriage", "divorce", "dating", "breakup", "husband", "wife", "romance", "jealousy", "wedding"],
    ["rent", "bills", "debt", "loan", "budget", "savings", "paycheck", "mortgage", "expenses", "credit", "bank", "landlord"],
    ["exams", "homework", "teacher", "classes", "grades", "college", "semester", "lecture", "studying", "campus", "assignment", "tuition"],
    ["hobbies", "music", "painting", "hiking", "gym", "football", "movies", "gardening", "cooking", "travel", "reading", "guitar"],
];

const FILLER: [&str; 16] = [
    "um", "well", "yeah", "just", "like", "maybe", "honestly", "guess", "lately", "kind", "sort", "things", "stuff",
    "really", "been", "week",
];

const ALLIANCE: [&str; 6] = [
    "i appreciate and understand you",
    "we trust one another",
    "we agree on what is important to work on",
    "what we are doing makes sense to me",
    "we share an understanding of the changes",
    "we are working toward goals we agreed on",
];

const NEUTRAL: [&str; 4] = ["okay let us move along", "anyway next question", "hmm right", "noted moving on"];

/// Probability that a session follows its rule at a given step rather than
/// jumping to a uniformly random topic.
const RULE_PROB: f64 = 0.85;

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "su", "do", "ga"];

fn topic_word(topic: usize, j: usize) -> String {
    if topic < TOPIC_WORDS.len() {
        return TOPIC_WORDS[topic][j].to_string();
    }
    // three syllables from the topic id, one from the word index: disjoint
    // across topics and from every fixed list above
    let n = SYLLABLES.len();
    format!(
        "{}{}{}{}x",
        SYLLABLES[topic % n],
        SYLLABLES[(topic / n) % n],
        SYLLABLES[(topic / (n * n)) % n],
        SYLLABLES[j % n]
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub n_sessions: usize,
    pub turns_per_session: usize,
    pub n_topics: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n_sessions: 200, turns_per_session: 40, n_topics: 8, seed: 1 }
    }
}

/// Ground truth for one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedSession {
    pub session_id: String,
    pub engaged: bool,
    /// Planted topic of each turn-pair.
    pub topics: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub transcripts: Vec<Transcript>,
    pub planted: Vec<PlantedSession>,
}

/// The designated successor whose transition earns alliance language.
pub fn favored_successor(topic: usize, n_topics: usize) -> usize {
    (topic + 1) % n_topics
}

fn drift_successor(cur: usize, prev: usize, n_topics: usize) -> usize {
    (cur + prev + 3) % n_topics
}

fn utterance(rng: &mut ChaCha8Rng, topic: usize, n_words: usize) -> Vec<String> {
    let mut words = Vec::new();
    for _ in 0..n_words {
        words.push(topic_word(topic, rng.random_range(0..12)));
    }
    for _ in 0..rng.random_range(1..=3) {
        let at = rng.random_range(0..=words.len());
        words.insert(at, FILLER[rng.random_range(0..FILLER.len())].to_string());
    }
    words
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_sessions < 2 {
        return Err(Error::Validation("need at least 2 sessions".into()));
    }
    if cfg.n_topics < 2 {
        return Err(Error::Validation("need at least 2 topics".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.n_topics;
    let n_pairs = cfg.turns_per_session / 2;
    let width = (cfg.n_sessions - 1).to_string().len().max(3);
    let mut transcripts = Vec::with_capacity(cfg.n_sessions);
    let mut planted = Vec::with_capacity(cfg.n_sessions);

    for s in 0..cfg.n_sessions {
        let session_id = format!("syn{s:0width$}");
        let condition = [Condition::Depression, Condition::Anxiety, Condition::Schizophrenia, Condition::Suicidal, Condition::Other]
            [rng.random_range(0..5)];
        let engaged = rng.random_bool(0.5);
        let mut topics: Vec<usize> = Vec::with_capacity(n_pairs);
        for t in 0..n_pairs {
            let follow = rng.random_bool(RULE_PROB);
            let next = match (t, follow) {
                (0, _) | (_, false) => rng.random_range(0..k),
                (1, true) if !engaged => rng.random_range(0..k),
                (_, true) if engaged => favored_successor(topics[t - 1], k),
                (_, true) => drift_successor(topics[t - 1], topics[t - 2], k),
            };
            topics.push(next);
        }

        let mut turns = Vec::with_capacity(cfg.turns_per_session);
        for (t, &topic) in topics.iter().enumerate() {
            let n = rng.random_range(4..=7);
            let patient = utterance(&mut rng, topic, n).join(" ");
            let n = rng.random_range(4..=7);
            let mut therapist = utterance(&mut rng, topic, n);
            let favored = t > 0 && topic == favored_successor(topics[t - 1], k);
            let phrase = if favored {
                ALLIANCE[rng.random_range(0..ALLIANCE.len())]
            } else {
                NEUTRAL[rng.random_range(0..NEUTRAL.len())]
            };
            therapist.push(phrase.to_string());
            turns.push(Turn { speaker: Speaker::Patient, text: patient });
            turns.push(Turn { speaker: Speaker::Therapist, text: therapist.join(" ") });
        }
        if cfg.turns_per_session % 2 == 1 {
            let topic = topics.last().copied().unwrap_or(0);
            turns.push(Turn { speaker: Speaker::Patient, text: utterance(&mut rng, topic, 5).join(" ") });
        }
        transcripts.push(Transcript { session_id: session_id.clone(), condition, turns });
        planted.push(PlantedSession { session_id, engaged, topics });
    }
    Ok(SyntheticCorpus { transcripts, planted })
}

/// Sidecar format: `session_id<TAB>pair_index<TAB>topic` per turn-pair.
pub fn planted_to_tsv(planted: &[PlantedSession]) -> String {
    let mut s = String::new();
    for p in planted {
        for (i, t) in p.topics.iter().enumerate() {
            let _ = writeln!(s, "{}\t{i}\t{t}", p.session_id);
        }
    }
    s
}

/// Parses the sidecar into `(session_id, pair_index, topic)` rows.
pub fn parse_planted_tsv(text: &str) -> Result<Vec<(String, usize, usize)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = || Error::Parse { line: i + 1, msg: format!("expected session<TAB>index<TAB>topic, got {l:?}") };
            let mut f = l.split('\t');
            let (a, b, c) = (f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?, f.next().ok_or_else(bad)?);
            Ok((a.to_string(), b.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Writes the transcript file and its `.topics.tsv` sidecar.
pub fn write_synthetic(c: &SyntheticCorpus, transcripts: &Path, sidecar: &Path) -> Result<()> {
    crate::corpus::write_transcripts(&c.transcripts, transcripts)?;
    std::fs::write(sidecar, planted_to_tsv(&c.planted)).map_err(|e| Error::io(sidecar, e))
}

/// Largest label agreement over all relabelings of `found` onto `planted`,
/// by exhaustive search over permutations of the `k` ids.
pub fn relabel_agreement(found: &[usize], planted: &[usize], k: usize) -> Result<f64> {
    if found.len() != planted.len() || found.is_empty() {
        return Err(Error::Validation("label sequences must be non-empty and equally long".into()));
    }
    if k > 10 {
        return Err(Error::Validation(format!("exhaustive relabeling is limited to 10 labels, got {k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&f, &p) in found.iter().zip(planted) {
        if f >= k || p >= k {
            return Err(Error::Validation(format!("label out of range 0..{k}")));
        }
        confusion[f][p] += 1;
    }
    let best = (0..k)
        .permutations(k)
        .map(|perm| (0..k).map(|f| confusion[f][perm[f]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(best as f64 / found.len() as f64)
}
