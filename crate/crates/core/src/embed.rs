//! Word vectors (skip-gram with negative sampling, or loaded from text) and
//! mean-pooled turn-pair state vectors.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, TurnPair};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const MIN_COUNT: usize = 2;

/// Turn-pair embedding; the model's state input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(dim: usize) -> Self {
        StateVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

#[derive(Debug)]
pub struct VocabEmbedding {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    all_oov: AtomicUsize,
}

impl Clone for VocabEmbedding {
    fn clone(&self) -> Self {
        VocabEmbedding {
            dim: self.dim,
            words: self.words.clone(),
            index: self.index.clone(),
            vectors: self.vectors.clone(),
            all_oov: AtomicUsize::new(self.all_oov.load(Ordering::Relaxed)),
        }
    }
}

impl VocabEmbedding {
    /// Builds a table from `(word, vector)` entries; later duplicates replace
    /// earlier ones.
    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        let mut emb = VocabEmbedding {
            dim,
            words: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            all_oov: AtomicUsize::new(0),
        };
        for (word, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for {word:?} has length {}, expected {dim}",
                    v.len()
                )));
            }
            emb.insert(word, &v);
        }
        Ok(emb)
    }

    fn insert(&mut self, word: String, v: &[f64]) -> bool {
        if let Some(&i) = self.index.get(&word) {
            self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(v);
            false
        } else {
            self.index.insert(word.clone(), self.words.len());
            self.words.push(word);
            self.vectors.extend_from_slice(v);
            true
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.words
            .iter()
            .zip(self.vectors.chunks_exact(self.dim))
            .map(|(w, v)| (w.as_str(), v))
    }

    /// Number of pooling calls that found no in-vocabulary token.
    pub fn all_oov_count(&self) -> usize {
        self.all_oov.load(Ordering::Relaxed)
    }

    /// Mean of the known word vectors in `text`; zero vector if none are known.
    pub fn mean_pool(&self, text: &str) -> StateVector {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in tokenize(text) {
            if let Some(v) = self.get(&tok) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                n += 1;
            }
        }
        if n == 0 {
            self.all_oov.fetch_add(1, Ordering::Relaxed);
            return StateVector(acc);
        }
        let inv = 1.0 / n as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        StateVector(acc)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, v) in self.iter() {
            out.push_str(w);
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn embed_turn_pair(tp: &TurnPair, v: &VocabEmbedding) -> StateVector {
    v.mean_pool(&tp.combined_text())
}

pub fn parse_vectors<R: BufRead>(reader: R) -> Result<VocabEmbedding> {
    let mut dim = None;
    let mut emb: Option<VocabEmbedding> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let d = *dim.get_or_insert(values.len());
        if d == 0 || values.len() != d {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {d} components, found {}", values.len()),
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse { line: lineno, msg: "non-finite component".into() });
        }
        let e = emb.get_or_insert_with(|| VocabEmbedding::from_entries(d, []).expect("d > 0"));
        if !e.insert(word.to_string(), &values) {
            log::warn!("duplicate word {word:?} at line {lineno}; keeping the later vector");
        }
    }
    emb.ok_or_else(|| Error::InsufficientData("vector file has no entries".into()))
}

pub fn load_vectors(path: impl AsRef<Path>) -> Result<VocabEmbedding> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(BufReader::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: DEFAULT_DIM,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgnsReport {
    /// Mean negative-sampling loss per (center, context) pair, one per epoch.
    pub epoch_loss: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling. Single-threaded and deterministic per
/// seed.
pub fn train_sgns(sentences: &[Vec<String>], cfg: &SgnsConfig) -> Result<(VocabEmbedding, SgnsReport)> {
    if cfg.dim < 2 {
        return Err(Error::Validation("embedding dimension must be at least 2".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for w in s {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= MIN_COUNT).collect();
    if vocab.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "vocabulary has {} word(s) with count >= {MIN_COUNT}; need at least 2",
            vocab.len()
        )));
    }
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, &(w, _))| (w, i)).collect();
    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| s.iter().filter_map(|w| index.get(w.as_str()).copied()).collect())
        .collect();

    let noise = WeightedIndex::new(vocab.iter().map(|&(_, c)| (c as f64).powf(0.75)))
        .map_err(|e| Error::Validation(e.to_string()))?;

    let (n, d) = (vocab.len(), cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..n * d).map(|_| (rng.random::<f64>() - 0.5) / d as f64).collect();
    let mut output = vec![0.0; n * d];
    let mut grad = vec![0.0; d];

    let total_words: usize = encoded.iter().map(Vec::len).sum::<usize>() * cfg.epochs;
    let mut processed = 0usize;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for sent in &encoded {
            for (pos, &center) in sent.iter().enumerate() {
                let progress = processed as f64 / total_words.max(1) as f64;
                let lr = cfg.learning_rate * (1.0 - progress).max(1e-4);
                processed += 1;
                let reach = rng.random_range(1..=cfg.window.max(1));
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sent.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let ctx = sent[ctx_pos];
                    let v = &mut input[center * d..(center + 1) * d];
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == ctx {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let u = &mut output[target * d..(target + 1) * d];
                        let score: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                        let p = sigmoid(score);
                        loss_sum -= if label > 0.0 { p.max(1e-12).ln() } else { (1.0 - p).max(1e-12).ln() };
                        let g = lr * (label - p);
                        for j in 0..d {
                            grad[j] += g * u[j];
                            u[j] += g * v[j];
                        }
                    }
                    for (x, g) in v.iter_mut().zip(&grad) {
                        *x += g;
                    }
                    loss_n += 1;
                }
            }
        }
        epoch_loss.push(if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 });
    }

    let emb = VocabEmbedding::from_entries(
        d,
        vocab
            .iter()
            .enumerate()
            .map(|(i, &(w, _))| (w.to_string(), input[i * d..(i + 1) * d].to_vec())),
    )?;
    Ok((emb, SgnsReport { epoch_loss }))
}
