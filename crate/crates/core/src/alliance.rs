//! Working-alliance rewards: signed mean cosine between a turn-pair state and
//! the inventory items of each subscale.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{StateVector, VocabEmbedding};
use crate::error::{Error, Result};
use crate::linalg::cosine;

/// Paraphrased six-item example inventory (two items per subscale).
pub const BUNDLED_INVENTORY: &str = include_str!("../assets/inventory.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subscale {
    Task,
    Bond,
    Goal,
}

impl FromStr for Subscale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "task" => Ok(Subscale::Task),
            "bond" => Ok(Subscale::Bond),
            "goal" => Ok(Subscale::Goal),
            _ => Err(Error::Validation(format!("unknown subscale {s:?}"))),
        }
    }
}

/// Which reward stream conditions the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScale {
    Full,
    Task,
    Bond,
    Goal,
}

impl RewardScale {
    pub const ALL: [RewardScale; 4] = [RewardScale::Full, RewardScale::Task, RewardScale::Bond, RewardScale::Goal];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardScale::Full => "full",
            RewardScale::Task => "task",
            RewardScale::Bond => "bond",
            RewardScale::Goal => "goal",
        }
    }
}

impl fmt::Display for RewardScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(RewardScale::Full),
            "task" => Ok(RewardScale::Task),
            "bond" => Ok(RewardScale::Bond),
            "goal" => Ok(RewardScale::Goal),
            _ => Err(Error::Validation(format!("unknown reward scale {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector {
    pub full: f64,
    pub task: f64,
    pub bond: f64,
    pub goal: f64,
}

impl RewardVector {
    pub fn get(&self, scale: RewardScale) -> f64 {
        match scale {
            RewardScale::Full => self.full,
            RewardScale::Task => self.task,
            RewardScale::Bond => self.bond,
            RewardScale::Goal => self.goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InventoryItem {
    pub text: String,
    pub subscale: Subscale,
    /// +1, or -1 for reverse-scored items.
    pub sign: f64,
}

#[derive(Debug, Clone)]
pub struct Inventory {
    items: Vec<InventoryItem>,
    item_vectors: Vec<StateVector>,
}

impl Inventory {
    pub fn new(items: Vec<InventoryItem>, v: &VocabEmbedding) -> Result<Self> {
        let vectors = items.iter().map(|it| v.mean_pool(&it.text)).collect();
        Self::with_vectors(items, vectors)
    }

    /// Builds an inventory from precomputed item vectors.
    pub fn with_vectors(items: Vec<InventoryItem>, item_vectors: Vec<StateVector>) -> Result<Self> {
        if items.len() != item_vectors.len() {
            return Err(Error::Shape("one vector per inventory item required".into()));
        }
        for sub in [Subscale::Task, Subscale::Bond, Subscale::Goal] {
            if !items.iter().any(|it| it.subscale == sub) {
                return Err(Error::Validation(format!("inventory has no {sub:?} item")));
            }
        }
        for (it, vec) in items.iter().zip(&item_vectors) {
            if it.text.trim().is_empty() {
                return Err(Error::Validation("inventory item text is empty".into()));
            }
            if vec.is_zero() {
                return Err(Error::Validation(format!(
                    "inventory item {:?} has no in-vocabulary words",
                    it.text
                )));
            }
        }
        Ok(Inventory { items, item_vectors })
    }

    pub fn items(&self) -> &[InventoryItem] {
        &self.items
    }

    pub fn item_vectors(&self) -> &[StateVector] {
        &self.item_vectors
    }
}

pub fn parse_inventory_items(text: &str) -> Result<Vec<InventoryItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line: lineno, msg: "expected `subscale<TAB>sign<TAB>text`".into() });
        }
        let subscale = fields[0]
            .parse::<Subscale>()
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        let sign = match fields[1].trim() {
            "1" | "+1" => 1.0,
            "-1" => -1.0,
            other => return Err(Error::Parse { line: lineno, msg: format!("bad sign {other:?}") }),
        };
        items.push(InventoryItem { text: fields[2].trim().to_string(), subscale, sign });
    }
    Ok(items)
}

pub fn load_inventory(path: impl AsRef<Path>, v: &VocabEmbedding) -> Result<Inventory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Inventory::new(parse_inventory_items(&text)?, v)
}

pub fn score_turn_pair(s: &StateVector, inv: &Inventory) -> RewardVector {
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (it, v) in inv.items.iter().zip(&inv.item_vectors) {
        let idx = it.subscale as usize;
        sums[idx] += it.sign * cosine(&s.0, &v.0);
        counts[idx] += 1;
    }
    let n: usize = counts.iter().sum();
    let mean = |i: usize| sums[i] / counts[i] as f64;
    RewardVector {
        full: sums.iter().sum::<f64>() / n as f64,
        task: mean(Subscale::Task as usize),
        bond: mean(Subscale::Bond as usize),
        goal: mean(Subscale::Goal as usize),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(sub: Subscale, sign: f64) -> InventoryItem {
        InventoryItem { text: "x".into(), subscale: sub, sign }
    }

    fn uniform_inventory(task_sign: f64) -> Inventory {
        let u = StateVector(vec![0.6, 0.8]);
        Inventory::with_vectors(
            vec![item(Subscale::Task, task_sign), item(Subscale::Bond, 1.0), item(Subscale::Goal, 1.0)],
            vec![u.clone(), u.clone(), u],
        )
        .unwrap()
    }

    #[test]
    fn aligned_state_scores_one() {
        let r = score_turn_pair(&StateVector(vec![0.6, 0.8]), &uniform_inventory(1.0));
        assert_eq!((r.task, r.bond, r.goal), (1.0, 1.0, 1.0));
        assert!((r.full - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_scored_item() {
        let r = score_turn_pair(&StateVector(vec![0.6, 0.8]), &uniform_inventory(-1.0));
        assert!((r.task + 1.0).abs() < 1e-12);
        assert!((r.full - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_task_items() {
        let items = vec![
            item(Subscale::Task, 1.0),
            item(Subscale::Task, 1.0),
            item(Subscale::Bond, 1.0),
            item(Subscale::Goal, 1.0),
        ];
        let vecs = vec![
            StateVector(vec![1.0, 0.0, 0.0]),
            StateVector(vec![0.0, 1.0, 0.0]),
            StateVector(vec![0.0, 0.0, 1.0]),
            StateVector(vec![0.0, 0.0, 1.0]),
        ];
        let inv = Inventory::with_vectors(items, vecs.clone()).unwrap();
        let s = StateVector(vec![2.0, 0.0, 0.0]);
        // oracle: cosine per item by hand
        let oracle: Vec<f64> = vecs
            .iter()
            .map(|v| {
                let d: f64 = s.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
                d / (2.0 * 1.0)
            })
            .collect();
        let r = score_turn_pair(&s, &inv);
        assert_eq!(r.task, (oracle[0] + oracle[1]) / 2.0);
        assert_eq!(r.task, 0.5);
    }

    #[test]
    fn zero_state_scores_zero() {
        let r = score_turn_pair(&StateVector(vec![0.0, 0.0]), &uniform_inventory(1.0));
        assert_eq!(r, RewardVector::default());
    }

    #[test]
    fn inventory_file_parsing() {
        let v = VocabEmbedding::from_entries(
            2,
            ["goals", "trust", "work"].map(|w| (w.to_string(), vec![1.0, 0.5])),
        )
        .unwrap();
        let ok = "task\t+1\twork\nbond\t1\ttrust\ngoal\t-1\tgoals\n";
        let inv = Inventory::new(parse_inventory_items(ok).unwrap(), &v).unwrap();
        assert_eq!(inv.items()[2].sign, -1.0);

        let no_goal = "task\t+1\twork\nbond\t1\ttrust\n";
        assert!(Inventory::new(parse_inventory_items(no_goal).unwrap(), &v).is_err());
        assert!(parse_inventory_items("mood\t1\twork\n").is_err());
        let oov = "task\t+1\twork\nbond\t1\ttrust\ngoal\t1\tzzz\n";
        assert!(Inventory::new(parse_inventory_items(oov).unwrap(), &v).is_err());
    }

    #[test]
    fn bundled_inventory_parses() {
        let items = parse_inventory_items(BUNDLED_INVENTORY).unwrap();
        assert_eq!(items.len(), 6);
    }

    fn arb_inventory() -> impl Strategy<Value = Inventory> {
        let sub = prop_oneof![Just(Subscale::Task), Just(Subscale::Bond), Just(Subscale::Goal)];
        prop::collection::vec((sub, any::<bool>(), prop::collection::vec(-1.0f64..1.0, 4)), 0..6).prop_map(
            |extra| {
                let mut items = vec![item(Subscale::Task, 1.0), item(Subscale::Bond, -1.0), item(Subscale::Goal, 1.0)];
                let mut vecs = vec![
                    StateVector(vec![1.0, 0.0, 0.0, 0.0]),
                    StateVector(vec![0.0, 1.0, 0.0, 0.5]),
                    StateVector(vec![0.3, 0.0, 1.0, 0.0]),
                ];
                for (s, neg, mut v) in extra {
                    v[0] += 2.0; // keep nonzero
                    items.push(item(s, if neg { -1.0 } else { 1.0 }));
                    vecs.push(StateVector(v));
                }
                Inventory::with_vectors(items, vecs).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn score_invariants(inv in arb_inventory(), s in prop::collection::vec(-1.0f64..1.0, 4), scale in 0.1f64..10.0) {
            let state = StateVector(s.clone());
            let r = score_turn_pair(&state, &inv);
            for x in [r.full, r.task, r.bond, r.goal] {
                prop_assert!((-1.0..=1.0).contains(&x));
            }
            let count = |sub| inv.items().iter().filter(|i| i.subscale == sub).count() as f64;
            let (nt, nb, ng) = (count(Subscale::Task), count(Subscale::Bond), count(Subscale::Goal));
            let weighted = (nt * r.task + nb * r.bond + ng * r.goal) / (nt + nb + ng);
            prop_assert!((weighted - r.full).abs() <= 1e-12);

            let scaled = score_turn_pair(&StateVector(s.iter().map(|x| x * scale).collect()), &inv);
            for (a, b) in [(r.full, scaled.full), (r.task, scaled.task), (r.bond, scaled.bond), (r.goal, scaled.goal)] {
                prop_assert!((a - b).abs() <= 1e-12);
            }

            let flipped_items: Vec<InventoryItem> = inv
                .items()
                .iter()
                .map(|i| InventoryItem { sign: -i.sign, ..i.clone() })
                .collect();
            let flipped = Inventory::with_vectors(flipped_items, inv.item_vectors().to_vec()).unwrap();
            let n = score_turn_pair(&state, &flipped);
            prop_assert_eq!(n.full, -r.full);
            prop_assert_eq!(n.task, -r.task);
        }
    }
}
