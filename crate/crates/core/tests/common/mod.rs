#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topicdt::alliance::RewardScale;
use topicdt::dtmodel::{init_params, write_checkpoint, read_checkpoint, DTConfig};
use topicdt::embed::VocabEmbedding;
use topicdt::pipeline::inventory_from;
use topicdt::service::{meta, Embedder, Registry, ServedModel, SessionStore};
use topicdt::topics::TopicModel;

pub const WORDS: [&str; 16] = [
    "we", "trust", "agree", "goals", "appreciate", "understand", "sleep", "tired", "job", "boss", "rent", "bills", "mother",
    "sister", "music", "gym",
];

pub const DIM: usize = 6;

pub fn vectors(seed: u64) -> VocabEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VocabEmbedding::from_entries(
        DIM,
        WORDS.iter().map(|w| (w.to_string(), (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect())),
    )
    .unwrap()
}

pub fn topic_model() -> TopicModel {
    let centroids = (0..4)
        .map(|i| {
            let mut c = vec![0.0; DIM];
            c[i] = 1.0;
            c
        })
        .collect();
    TopicModel { k: 4, dim: DIM, seed: 0, centroids }
}

pub fn model_cfg() -> DTConfig {
    DTConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        context_k: 3,
        n_actions: 4,
        d_state: DIM,
        max_timestep: 64,
        dropout: 0.1,
        return_scale: 2.5,
    }
}

/// Goes through the checkpoint byte format so served parameters are exactly
/// what a file would hold.
pub fn served(id: &str, scale: RewardScale, target: f64, seed: u64) -> ServedModel {
    let p = init_params::<f32>(&model_cfg(), seed);
    let extra = BTreeMap::from([
        (meta::SCALE.to_string(), scale.as_str().to_string()),
        (meta::TARGET_P90.to_string(), target.to_string()),
    ]);
    let (p, m) = read_checkpoint(&write_checkpoint(&p, &extra)).unwrap();
    ServedModel::new(id, p, m).unwrap()
}

pub fn store() -> Arc<SessionStore> {
    let v = vectors(5);
    let inv = inventory_from(None, &v).unwrap();
    let emb = Embedder::new(v, topic_model(), inv).unwrap();
    let reg = Registry::new(
        emb,
        vec![served("full-k3", RewardScale::Full, 1.75, 1), served("goal-k3", RewardScale::Goal, -0.5, 2)],
    )
    .unwrap();
    Arc::new(SessionStore::new(Arc::new(reg)))
}

pub fn turns() -> Vec<(&'static str, &'static str)> {
    vec![
        ("i am so tired and cannot sleep", "we agree sleep matters"),
        ("my boss and the job", "we trust each other on goals"),
        ("rent and bills again", "i appreciate that"),
        ("my mother and sister", "we understand"),
        ("unknown words only", "zzz qqq"),
        ("music at the gym", "goals we agree on"),
    ]
}
