//! Per-session (reward, state, action) trajectories, returns-to-go,
//! session-granular splits and left-padded training windows.
//!
//! Step `t` of a session carries the embedding of turn-pair `t` as its state,
//! that pair's alliance scores as its reward, and the topic of turn-pair
//! `t + 1` as its action: the topic the counselor moved on to. The final
//! step of a session has no action and is never a prediction target.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alliance::{score_turn_pair, Inventory, RewardScale, RewardVector};
use crate::corpus::{Condition, SessionPairs};
use crate::embed::{embed_turn_pair, StateVector, VocabEmbedding};
use crate::error::{Error, Result};
use crate::topics::{assign_topic, TopicModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateVector,
    /// Topic assigned to this step's own turn-pair.
    pub topic: usize,
    /// Topic of the next turn-pair; `None` on the last step of a session.
    pub action: Option<usize>,
    pub rewards: RewardVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrajectory {
    pub session_id: String,
    pub condition: Condition,
    pub steps: Vec<Step>,
}

impl SessionTrajectory {
    pub fn rewards(&self, scale: RewardScale) -> Vec<f64> {
        self.steps.iter().map(|s| s.rewards.get(scale)).collect()
    }

    pub fn episode_return(&self, scale: RewardScale) -> f64 {
        self.rewards(scale).iter().sum()
    }

    /// Number of steps that carry an action.
    pub fn target_count(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Returns-to-go divided by the return scale; 0 on padding.
    pub returns_to_go: Vec<f64>,
    pub states: Vec<StateVector>,
    /// Action ids; the reserved id `n_actions` marks padding and missing actions.
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    /// `true` for real steps.
    pub pad_mask: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn real_steps(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    pub fn is_target(&self, i: usize, n_actions: usize) -> bool {
        self.pad_mask[i] && self.actions[i] < n_actions
    }
}

/// One step per turn-pair, in session order. Sessions without turn-pairs are
/// dropped.
pub fn build_trajectories(
    sessions: &[SessionPairs],
    v: &VocabEmbedding,
    m: &TopicModel,
    inv: &Inventory,
) -> Vec<SessionTrajectory> {
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        if s.pairs.is_empty() {
            log::warn!("session {:?} has no turn-pairs; dropped", s.session_id);
            continue;
        }
        let states: Vec<StateVector> = s.pairs.iter().map(|p| embed_turn_pair(p, v)).collect();
        let topics: Vec<usize> = states.iter().map(|st| assign_topic(st, m)).collect();
        let steps = states
            .into_iter()
            .enumerate()
            .map(|(i, state)| {
                let rewards = score_turn_pair(&state, inv);
                Step { topic: topics[i], action: topics.get(i + 1).copied(), rewards, state }
            })
            .collect();
        out.push(SessionTrajectory {
            session_id: s.session_id.clone(),
            condition: s.condition,
            steps,
        });
    }
    out
}

/// Suffix sums: `out[t] = rewards[t] + ... + rewards[end]`.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// Seeded shuffle of `0..n`, cut into contiguous partitions at the rounded
/// cumulative fractions. Indices within a partition are sorted.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Validation("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split fractions sum to {total}, not 1")));
    }
    if fractions.len() > n {
        return Err(Error::InsufficientData(format!(
            "{} partitions requested from {n} sessions",
            fractions.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut parts = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        parts.push(part);
        start = end;
    }
    Ok(parts)
}

pub fn split_sessions<T: Clone>(items: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    Ok(split_indices(items.len(), fractions, seed)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| items[i].clone()).collect())
        .collect())
}

/// Left-pads the given real steps (at most `k` of them, oldest first) into a
/// window of length `k`.
pub fn assemble_window(
    states: &[&StateVector],
    actions: &[usize],
    rtg: &[f64],
    timesteps: &[usize],
    k: usize,
    d_state: usize,
    pad_action: usize,
) -> TrainingWindow {
    let real = states.len();
    debug_assert!(real <= k && actions.len() == real && rtg.len() == real && timesteps.len() == real);
    let pad = k - real;
    let mut w = TrainingWindow {
        returns_to_go: vec![0.0; pad],
        states: vec![StateVector::zeros(d_state); pad],
        actions: vec![pad_action; pad],
        timesteps: vec![0; pad],
        pad_mask: vec![false; pad],
    };
    w.returns_to_go.extend_from_slice(rtg);
    w.states.extend(states.iter().map(|s| (*s).clone()));
    w.actions.extend_from_slice(actions);
    w.timesteps.extend_from_slice(timesteps);
    w.pad_mask.extend(std::iter::repeat_n(true, real));
    w
}

/// Window whose last real slot is step `t`.
pub fn window_at(
    traj: &SessionTrajectory,
    t: usize,
    k: usize,
    scale: RewardScale,
    return_scale: f64,
    n_actions: usize,
) -> TrainingWindow {
    let rtg = returns_to_go(&traj.rewards(scale));
    window_from_rtg(traj, &rtg, t, k, return_scale, n_actions)
}

fn window_from_rtg(
    traj: &SessionTrajectory,
    rtg: &[f64],
    t: usize,
    k: usize,
    return_scale: f64,
    n_actions: usize,
) -> TrainingWindow {
    let start = (t + 1).saturating_sub(k);
    let steps = &traj.steps[start..=t];
    let d_state = steps[0].state.dim();
    let states: Vec<&StateVector> = steps.iter().map(|s| &s.state).collect();
    let actions: Vec<usize> = steps.iter().map(|s| s.action.unwrap_or(n_actions)).collect();
    let rtg: Vec<f64> = rtg[start..=t].iter().map(|r| r / return_scale).collect();
    let timesteps: Vec<usize> = (start..=t).collect();
    assemble_window(&states, &actions, &rtg, &timesteps, k, d_state, n_actions)
}

/// Windows ending at steps `0, stride, 2*stride, ...`.
pub fn make_windows(
    traj: &SessionTrajectory,
    k: usize,
    scale: RewardScale,
    return_scale: f64,
    stride: usize,
    n_actions: usize,
) -> Vec<TrainingWindow> {
    assert!(k >= 1, "context length must be at least 1");
    assert!(return_scale > 0.0, "return scale must be positive");
    let rtg = returns_to_go(&traj.rewards(scale));
    (0..traj.steps.len())
        .step_by(stride.max(1))
        .map(|t| window_from_rtg(traj, &rtg, t, k, return_scale, n_actions))
        .collect()
}

/// Largest absolute episode return; 1.0 when every return is zero.
pub fn max_abs_return(trajs: &[SessionTrajectory], scale: RewardScale) -> f64 {
    let m = trajs.iter().map(|t| t.episode_return(scale).abs()).fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Linear-interpolated percentile (`q` in [0, 1]) of episode returns.
pub fn return_percentile(trajs: &[SessionTrajectory], scale: RewardScale, q: f64) -> f64 {
    let mut r: Vec<f64> = trajs.iter().map(|t| t.episode_return(scale)).collect();
    if r.is_empty() {
        return 0.0;
    }
    r.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (r.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    r[lo] + (r[hi] - r[lo]) * (pos - lo as f64)
}

pub fn write_trajectories(trajs: &[SessionTrajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for t in trajs {
        let line = serde_json::to_string(t).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<SessionTrajectory>> {
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(rewards: &[f64], actions: &[usize]) -> SessionTrajectory {
        let n = rewards.len();
        SessionTrajectory {
            session_id: "s".into(),
            condition: Condition::Other,
            steps: (0..n)
                .map(|i| Step {
                    state: StateVector(vec![i as f64 + 1.0, 0.5]),
                    topic: actions.get(i.wrapping_sub(1)).copied().unwrap_or(0),
                    action: actions.get(i).copied(),
                    rewards: RewardVector { full: rewards[i], task: 0.0, bond: 0.0, goal: rewards[i] * 2.0 },
                })
                .collect(),
        }
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(returns_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert!(returns_to_go(&[]).is_empty());
        assert_eq!(returns_to_go(&[-1.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn split_sizes() {
        let p = split_indices(20, &[0.95, 0.05], 1).unwrap();
        assert_eq!((p[0].len(), p[1].len()), (19, 1));
        let p = split_indices(10, &[0.4, 0.4, 0.2], 1).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(split_indices(2, &[0.4, 0.4, 0.2], 1).is_err());
        assert!(split_indices(10, &[0.5, 0.4], 1).is_err());
    }

    #[test]
    fn left_padding_counts() {
        let t = traj(&[1.0, 1.0, 1.0], &[1, 2]);
        let ws = make_windows(&t, 5, RewardScale::Full, 1.0, 1, 8);
        let pads: Vec<usize> = ws.iter().map(|w| 5 - w.real_steps()).collect();
        assert_eq!(pads, vec![4, 3, 2]);
        let w = &ws[2];
        assert_eq!(w.actions, vec![8, 8, 1, 2, 8]);
        assert_eq!(w.timesteps, vec![0, 0, 0, 1, 2]);
        assert_eq!(w.returns_to_go, vec![0.0, 0.0, 3.0, 2.0, 1.0]);
        assert!(w.states[0].is_zero());

        let ws = make_windows(&t, 2, RewardScale::Full, 1.0, 1, 8);
        assert_eq!(ws.iter().map(TrainingWindow::real_steps).collect::<Vec<_>>(), vec![1, 2, 2]);
        assert_eq!(ws[2].timesteps, vec![1, 2]);
    }

    #[test]
    fn zero_rewards_give_zero_rtg() {
        let t = traj(&[0.0, 0.0, 0.0, 0.0], &[1, 2, 3]);
        for scale in [0.5, 3.0] {
            for w in make_windows(&t, 3, RewardScale::Full, scale, 1, 8) {
                assert!(w.returns_to_go.iter().all(|&r| r == 0.0));
            }
        }
    }

    #[test]
    fn scale_selection_and_division() {
        let t = traj(&[1.0, 2.0], &[3]);
        let w = window_at(&t, 1, 2, RewardScale::Goal, 2.0, 8);
        assert_eq!(w.returns_to_go, vec![3.0, 2.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let ts: Vec<_> = (0..11).map(|i| traj(&[i as f64], &[])).collect();
        assert_eq!(return_percentile(&ts, RewardScale::Full, 0.9), 9.0);
        assert_eq!(max_abs_return(&ts, RewardScale::Full), 10.0);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let ts = vec![traj(&[0.25, -0.5, 1.0], &[1, 2])];
        write_trajectories(&ts, &p).unwrap();
        assert_eq!(read_trajectories(&p).unwrap(), ts);
    }

    proptest! {
        #[test]
        fn rtg_matches_double_loop(r in prop::collection::vec(-1.0f64..1.0, 0..60)) {
            let fast = returns_to_go(&r);
            for t in 0..r.len() {
                let mut s = 0.0;
                for x in &r[t..] {
                    s += x;
                }
                prop_assert!((fast[t] - s).abs() <= 1e-12);
            }
        }

        #[test]
        fn rtg_monotone_iff_nonnegative(r in prop::collection::vec(-1.0f64..1.0, 1..20)) {
            let nonneg: Vec<f64> = r.iter().map(|x| x.abs()).collect();
            let g = returns_to_go(&nonneg);
            prop_assert!(g.windows(2).all(|w| w[0] >= w[1]));
            if r.iter().any(|&x| x < 0.0) {
                let g = returns_to_go(&r);
                // a negative reward at t < end raises the suffix sum at t+1 above t
                let neg = r.iter().position(|&x| x < 0.0).unwrap();
                if neg + 1 < r.len() {
                    prop_assert!(g[neg] < g[neg + 1]);
                } else {
                    prop_assert!(g[neg] < 0.0);
                }
            }
        }

        #[test]
        fn split_partition_property(n in 3usize..200, seed in any::<u64>(), three in any::<bool>()) {
            let fr: &[f64] = if three { &[0.4, 0.4, 0.2] } else { &[0.95, 0.05] };
            let parts = split_indices(n, fr, seed).unwrap();
            let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (p, f) in parts.iter().zip(fr) {
                prop_assert!((p.len() as f64 - f * n as f64).abs() <= 1.0);
            }
            prop_assert_eq!(parts, split_indices(n, fr, seed).unwrap());
        }

        #[test]
        fn each_step_ends_one_window(len in 1usize..30, k in 1usize..8) {
            let rewards = vec![0.1; len];
            let actions: Vec<usize> = (0..len - 1).map(|i| i % 8).collect();
            let t = traj(&rewards, &actions);
            let ws = make_windows(&t, k, RewardScale::Full, 1.0, 1, 8);
            prop_assert_eq!(ws.len(), len);
            for (i, w) in ws.iter().enumerate() {
                prop_assert_eq!(*w.timesteps.last().unwrap(), i);
                let real = w.real_steps();
                prop_assert!(w.pad_mask[..k - real].iter().all(|&m| !m));
                for j in k - real + 1..k {
                    prop_assert_eq!(w.timesteps[j], w.timesteps[j - 1] + 1);
                }
            }
        }
    }
}
