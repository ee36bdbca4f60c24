//! Topic model over turn-pair embeddings: spherical k-means with k-means++
//! seeding. Topic ids are the action vocabulary of the recommender.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{StateVector, VocabEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, normalized};

pub const DEFAULT_TOPICS: usize = 8;
pub const MAX_ITERS: usize = 100;
const FORMAT_TAG: &str = "# topic-model v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    /// Unit-norm centroid per topic.
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub iterations: usize,
    /// Sum over points of the cosine to their assigned centroid, per iteration.
    pub objective: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn best_centroid(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut chosen = vec![false; points.len()];
    while centroids.len() < k {
        let dists: Vec<f64> = points
            .iter()
            .map(|p| {
                let (_, s) = best_centroid(p, &centroids);
                let d = (1.0 - s).max(0.0);
                d * d
            })
            .collect();
        let idx = match WeightedIndex::new(&dists) {
            Ok(w) => w.sample(rng),
            // every point coincides with a centroid; fall back to the first unused one
            Err(_) => chosen.iter().position(|c| !c).unwrap_or(0),
        };
        chosen[idx] = true;
        centroids.push(points[idx].clone());
    }
    centroids
}

/// Spherical k-means over the nonzero states.
pub fn fit_topics(states: &[StateVector], k: usize, seed: u64) -> Result<(TopicModel, FitReport)> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let points: Vec<Vec<f64>> = states.iter().filter_map(|s| normalized(&s.0)).collect();
    if points.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} nonzero state vectors for {k} topics",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("state vectors have differing dimensions".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;

    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut best_sims = Vec::with_capacity(points.len());
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (i, s) = best_centroid(p, &centroids);
            if *a != i {
                *a = i;
                changed = true;
            }
            best_sims.push(s);
        }
        objective.push(best_sims.iter().sum());
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(&points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            let reseed = counts[c] == 0 || normalized(&sums[c]).is_none();
            if reseed {
                let (worst, _) = best_sims
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal))
                    .expect("non-empty");
                centroids[c] = points[worst].clone();
                best_sims[worst] = 1.0;
            } else {
                centroids[c] = normalized(&sums[c]).expect("checked above");
            }
        }
    }

    let model = TopicModel { k, dim, seed, centroids };
    Ok((model, FitReport { iterations, objective, assignments }))
}

/// Highest-cosine topic; ties go to the lowest id, the zero vector to 0.
pub fn assign_topic(s: &StateVector, m: &TopicModel) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in m.centroids.iter().enumerate() {
        let sim = cosine(&s.0, c);
        if sim > best.1 {
            best = (i, sim);
        }
    }
    best.0
}

pub fn topic_top_words(m: &TopicModel, v: &VocabEmbedding, n: usize) -> Vec<Vec<String>> {
    m.centroids
        .iter()
        .map(|c| {
            let mut scored: Vec<(&str, f64)> = v.iter().map(|(w, x)| (w, cosine(x, c))).collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(b.0)));
            scored.into_iter().take(n).map(|(w, _)| w.to_string()).collect()
        })
        .collect()
}

impl TopicModel {
    pub fn to_text(&self) -> String {
        let mut out = format!("{FORMAT_TAG}\n{} {} {}\n", self.k, self.dim, self.seed);
        for c in &self.centroids {
            let line: Vec<String> = c.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, msg: &str| Error::Parse { line: line + 1, msg: msg.to_string() };
        let (i, tag) = lines.next().ok_or_else(|| perr(0, "empty topic model file"))?;
        if tag.trim() != FORMAT_TAG {
            return Err(perr(i, "missing or unsupported topic-model version tag"));
        }
        let (i, header) = lines.next().ok_or_else(|| perr(i + 1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(perr(i, "header must be `k dim seed`"));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| perr(i, &e.to_string()));
        let k = parse_usize(h[0])?;
        let dim = parse_usize(h[1])?;
        let seed = h[2].parse::<u64>().map_err(|e| perr(i, &e.to_string()))?;
        let mut centroids = Vec::with_capacity(k);
        for (i, line) in lines {
            let c = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(i, &e.to_string()))?;
            if c.len() != dim {
                return Err(perr(i, &format!("expected {dim} components, found {}", c.len())));
            }
            centroids.push(c);
        }
        if centroids.len() != k || k == 0 {
            return Err(Error::Validation(format!("expected {k} centroids, found {}", centroids.len())));
        }
        Ok(TopicModel { k, dim, seed, centroids })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> StateVector {
        StateVector(v.to_vec())
    }

    fn two_clusters() -> Vec<StateVector> {
        let mut out = Vec::new();
        for i in 0..5 {
            let a = 0.05 * i as f64;
            out.push(sv(&[a.cos(), a.sin()]));
        }
        for i in 0..5 {
            let a = 1.5 + 0.05 * i as f64;
            out.push(sv(&[a.cos(), a.sin()]));
        }
        out
    }

    /// Spherical objective of a labelled partition: for each cluster, the
    /// norm of the sum of its unit vectors.
    fn objective(points: &[StateVector], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let mut s = [0.0, 0.0];
                for (p, &l) in points.iter().zip(labels) {
                    if l == c {
                        let n = norm(&p.0);
                        s[0] += p.0[0] / n;
                        s[1] += p.0[1] / n;
                    }
                }
                norm(&s)
            })
            .sum()
    }

    #[test]
    fn recovers_planted_two_clusters() {
        let pts = two_clusters();
        // brute force all 2-partitions
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for mask in 0u32..(1 << pts.len()) {
            let labels: Vec<usize> = (0..pts.len()).map(|i| ((mask >> i) & 1) as usize).collect();
            let o = objective(&pts, &labels, 2);
            if o > best.0 + 1e-12 {
                best = (o, labels);
            }
        }
        let (_, report) = fit_topics(&pts, 2, 3).unwrap();
        let same = report.assignments == best.1;
        let flipped = report.assignments.iter().zip(&best.1).all(|(a, b)| a != b);
        assert!(same || flipped, "{:?} vs {:?}", report.assignments, best.1);
        // and the optimum is the planted split
        assert!(best.1[..5].iter().all(|&l| l == best.1[0]));
        assert!(best.1[5..].iter().all(|&l| l != best.1[0]));
    }

    #[test]
    fn k1_is_mean_direction() {
        let pts = vec![sv(&[1.0, 0.0]), sv(&[0.0, 2.0]), sv(&[0.0, 0.0])];
        let (m, report) = fit_topics(&pts, 1, 0).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.centroids[0][0] - r).abs() < 1e-12);
        assert!((m.centroids[0][1] - r).abs() < 1e-12);
        assert!(report.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn too_few_points() {
        let pts = vec![sv(&[1.0, 0.0]), sv(&[0.0, 0.0])];
        assert!(fit_topics(&pts, 2, 0).is_err());
    }

    fn fixed_model() -> TopicModel {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        TopicModel {
            k: 5,
            dim: 2,
            seed: 0,
            centroids: vec![
                vec![-1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, -1.0],
                vec![r, -r],
                vec![0.0, 1.0],
            ],
        }
    }

    #[test]
    fn assignment_rules() {
        let m = fixed_model();
        assert_eq!(assign_topic(&sv(&[r2(), -r2()]), &m), 3);
        // equal cosine to centroids 1 and 4
        assert_eq!(assign_topic(&sv(&[1.0, 1.0]), &m), 1);
        assert_eq!(assign_topic(&sv(&[0.0, 0.0]), &m), 0);
    }

    fn r2() -> f64 {
        std::f64::consts::FRAC_1_SQRT_2
    }

    #[test]
    fn top_words_order_and_ties() {
        let v = VocabEmbedding::from_entries(
            2,
            [
                ("zeta".to_string(), vec![1.0, 0.0]),
                ("alpha".to_string(), vec![0.0, 1.0]),
                ("beta".to_string(), vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let m = TopicModel { k: 1, dim: 2, seed: 0, centroids: vec![vec![1.0, 0.0]] };
        assert_eq!(topic_top_words(&m, &v, 3)[0], vec!["zeta", "alpha", "beta"]);
        assert_eq!(topic_top_words(&m, &v, 1)[0], vec!["zeta"]);
    }

    #[test]
    fn text_round_trip() {
        let m = fixed_model();
        assert_eq!(TopicModel::from_text(&m.to_text()).unwrap(), m);
        assert!(TopicModel::from_text("2 2 0\n1 0\n0 1\n").is_err());
    }

    fn arb_points() -> impl Strategy<Value = Vec<StateVector>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 8..30)
            .prop_map(|v| v.into_iter().map(StateVector).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fit_invariants(pts in arb_points(), k in 1usize..4, seed in 0u64..100) {
            prop_assume!(pts.iter().filter(|p| norm(&p.0) > 1e-9).count() >= k);
            let (m, report) = fit_topics(&pts, k, seed).unwrap();
            for c in &m.centroids {
                prop_assert!((norm(c) - 1.0).abs() < 1e-9);
            }
            for (i, c) in m.centroids.iter().enumerate() {
                // duplicate centroids can legitimately tie toward a lower id
                let got = assign_topic(&StateVector(c.clone()), &m);
                prop_assert!(got == i || m.centroids[got] == *c);
            }
            for w in report.objective.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9);
            }
            let (m2, _) = fit_topics(&pts, k, seed).unwrap();
            prop_assert_eq!(m, m2);
        }

        #[test]
        fn assignment_scale_invariant(p in prop::collection::vec(-1.0f64..1.0, 2), scale in 0.01f64..100.0) {
            let m = fixed_model();
            let scaled: Vec<f64> = p.iter().map(|x| x * scale).collect();
            prop_assert_eq!(assign_topic(&StateVector(p), &m), assign_topic(&StateVector(scaled), &m));
        }
    }
}
