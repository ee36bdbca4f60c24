//! Live next-topic recommendation over HTTP.
//!
//! Sessions live in memory. Each session sits behind its own async mutex, so
//! ingests into one session are serialized while different sessions proceed
//! independently. Checkpoints and the embedding stack are shared read-only.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use crate::alliance::{score_turn_pair, Inventory, RewardScale, RewardVector};
use crate::corpus::TurnPair;
use crate::dtmodel::{forward, load_checkpoint, DTConfig, DTParams, Mode};
use crate::embed::{embed_turn_pair, StateVector, VocabEmbedding};
use crate::error::{Error, Result};
use crate::topics::{assign_topic, topic_top_words, TopicModel};
use crate::trajectory::{assemble_window, return_percentile, SessionTrajectory, TrainingWindow};

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "adt";
const TOP_WORDS: usize = 5;

/// Metadata keys written next to trained parameters.
pub mod meta {
    pub const SCALE: &str = "scale";
    pub const TARGET_P90: &str = "target_p90";
}

/// Metadata that makes a checkpoint trained on `train` servable: its reward
/// scale and the 90th percentile of training episode returns.
pub fn serving_metadata(train: &[SessionTrajectory], scale: RewardScale) -> BTreeMap<String, String> {
    BTreeMap::from([
        (meta::SCALE.to_string(), scale.as_str().to_string()),
        (meta::TARGET_P90.to_string(), return_percentile(train, scale, 0.9).to_string()),
    ])
}

/// A loaded checkpoint and the serving metadata it carries.
#[derive(Debug)]
pub struct ServedModel {
    pub id: String,
    pub params: DTParams<f32>,
    pub scale: RewardScale,
    /// Default target return, in unscaled units of `scale`.
    pub default_target: f64,
    pub metadata: BTreeMap<String, String>,
}

impl ServedModel {
    pub fn new(id: impl Into<String>, params: DTParams<f32>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let id = id.into();
        let field = |k: &str| {
            metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint {id:?} lacks metadata {k:?}")))
        };
        let scale: RewardScale = field(meta::SCALE)?.parse()?;
        let default_target: f64 = field(meta::TARGET_P90)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("checkpoint {id:?} has a malformed {}", meta::TARGET_P90)))?;
        Ok(ServedModel { id, params, scale, default_target, metadata })
    }

    pub fn cfg(&self) -> &DTConfig {
        &self.params.cfg
    }
}

/// Everything needed to turn raw text into model inputs.
#[derive(Debug)]
pub struct Embedder {
    pub vectors: VocabEmbedding,
    pub topics: TopicModel,
    pub inventory: Inventory,
    top_words: Vec<Vec<String>>,
}

impl Embedder {
    pub fn new(vectors: VocabEmbedding, topics: TopicModel, inventory: Inventory) -> Result<Self> {
        if vectors.dim() != topics.dim {
            return Err(Error::Shape(format!(
                "vectors have dimension {} but the topic model expects {}",
                vectors.dim(),
                topics.dim
            )));
        }
        let top_words = topic_top_words(&topics, &vectors, TOP_WORDS);
        Ok(Embedder { vectors, topics, inventory, top_words })
    }

    pub fn top_words(&self) -> &[Vec<String>] {
        &self.top_words
    }
}

/// Immutable model registry shared by all sessions.
#[derive(Debug)]
pub struct Registry {
    pub embedder: Embedder,
    models: BTreeMap<String, Arc<ServedModel>>,
}

impl Registry {
    pub fn new(embedder: Embedder, models: Vec<ServedModel>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for m in models {
            if m.cfg().n_actions != embedder.topics.k || m.cfg().d_state != embedder.vectors.dim() {
                return Err(Error::Shape(format!(
                    "checkpoint {:?} expects {} actions over {}-d states; topic model has {} topics over {}-d vectors",
                    m.id,
                    m.cfg().n_actions,
                    m.cfg().d_state,
                    embedder.topics.k,
                    embedder.vectors.dim()
                )));
            }
            map.insert(m.id.clone(), Arc::new(m));
        }
        Ok(Registry { embedder, models: map })
    }

    /// Loads every `*.adt` file in `dir`; the id is the file stem.
    pub fn load_dir(embedder: Embedder, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXTENSION))
            .collect();
        paths.sort();
        let mut models = Vec::new();
        for p in paths {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let (params, metadata) = load_checkpoint(&p)?;
            models.push(ServedModel::new(id, params, metadata)?);
        }
        Self::new(embedder, models)
    }

    pub fn model(&self, id: &str) -> Option<&Arc<ServedModel>> {
        self.models.get(id)
    }

    pub fn models(&self) -> impl Iterator<Item = &Arc<ServedModel>> {
        self.models.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveStep {
    pub index: usize,
    pub state: StateVector,
    pub topic: usize,
    pub rewards: RewardVector,
    /// Distribution returned when this step was ingested.
    pub recommendation: Vec<f64>,
}

#[derive(Debug)]
pub struct LiveSession {
    pub id: String,
    pub scale: RewardScale,
    pub target_return: f64,
    pub model: Arc<ServedModel>,
    pub steps: Vec<LiveStep>,
}

impl LiveSession {
    /// Target minus every reward received so far.
    pub fn remaining_target(&self) -> f64 {
        self.steps.iter().fold(self.target_return, |acc, s| acc - s.rewards.get(self.scale))
    }
}

/// Window over the last `K` steps. Past actions are the topics that followed;
/// the newest step's action is unknown and uses the reserved id.
/// Returns-to-go are `target - rewards before t`, scaled.
pub fn live_window(steps: &[LiveStep], target_return: f64, scale: RewardScale, cfg: &DTConfig) -> TrainingWindow {
    let n = steps.len();
    let start = n.saturating_sub(cfg.context_k);
    let mut before = 0.0;
    let mut rtg_all = Vec::with_capacity(n);
    for s in steps {
        rtg_all.push((target_return - before) / cfg.return_scale);
        before += s.rewards.get(scale);
    }
    let states: Vec<&StateVector> = steps[start..].iter().map(|s| &s.state).collect();
    let actions: Vec<usize> = (start..n).map(|t| steps.get(t + 1).map_or(cfg.pad_action(), |s| s.topic)).collect();
    let timesteps: Vec<usize> = (start..n).map(|t| t.min(cfg.max_timestep - 1)).collect();
    assemble_window(&states, &actions, &rtg_all[start..], &timesteps, cfg.context_k, cfg.d_state, cfg.pad_action())
}

/// Softmax over the logits at the newest state token.
pub fn recommend(model: &ServedModel, window: &TrainingWindow) -> Result<Vec<f64>> {
    let trace = forward(&model.params, std::slice::from_ref(window), Mode::Eval)?;
    let logits = trace.logits_at(0, model.cfg().context_k - 1);
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub scale: RewardScale,
    pub target_return: Option<f64>,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRequest {
    pub patient: String,
    pub therapist: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRequest {
    pub target_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub schema_version: u32,
    pub id: String,
    pub target_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub step_index: usize,
    pub rewards: RewardVector,
    pub assigned_topic: usize,
    pub remaining_target: f64,
    pub recommendation: Vec<f64>,
    pub recommended_topic: usize,
    pub top_words: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub id: String,
    pub scale: RewardScale,
    pub checkpoint_id: String,
    pub target_return: f64,
    pub remaining_target: f64,
    pub steps: Vec<StepView>,
    /// Recommendation for the newest step under the current target; absent
    /// before the first turn.
    pub current_recommendation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    pub rewards: RewardVector,
    pub topic: usize,
    pub recommendation: Vec<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |b, (i, x)| if *x > xs[b] { i } else { b })
}

/// Transport-independent session operations.
pub struct SessionStore {
    registry: Arc<Registry>,
    sessions: RwLock<HashMap<String, Arc<Mutex<LiveSession>>>>,
    next_id: AtomicU64,
}

impl SessionStore {
    pub fn new(registry: Arc<Registry>) -> Self {
        SessionStore { registry, sessions: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>> {
        self.sessions
            .read()
            .expect("session map lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }

    pub fn create(&self, req: CreateRequest) -> Result<CreateResponse> {
        let model = self
            .registry
            .model(&req.checkpoint_id)
            .ok_or_else(|| Error::NotFound(format!("checkpoint {:?}", req.checkpoint_id)))?
            .clone();
        if req.scale != model.scale {
            return Err(Error::Validation(format!(
                "checkpoint {:?} was trained on the {} scale, not {}",
                model.id, model.scale, req.scale
            )));
        }
        let target_return = req.target_return.unwrap_or(model.default_target);
        if !target_return.is_finite() {
            return Err(Error::Validation("target_return must be finite".into()));
        }
        let id = format!("sess-{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let s = LiveSession { id: id.clone(), scale: req.scale, target_return, model, steps: Vec::new() };
        self.sessions.write().expect("session map lock poisoned").insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(CreateResponse { schema_version: SCHEMA_VERSION, id, target_return })
    }

    pub async fn ingest(&self, id: &str, req: TurnRequest) -> Result<IngestResponse> {
        let handle = self.session(id)?;
        let mut s = handle.lock().await;
        let emb = &self.registry.embedder;
        let index = s.steps.len();
        let pair = TurnPair { session_id: id.to_string(), index, patient_text: req.patient, therapist_text: req.therapist };
        let state = embed_turn_pair(&pair, &emb.vectors);
        let rewards = score_turn_pair(&state, &emb.inventory);
        let topic = assign_topic(&state, &emb.topics);
        let mut steps = s.steps.clone();
        steps.push(LiveStep { index, state, topic, rewards, recommendation: Vec::new() });
        let window = live_window(&steps, s.target_return, s.scale, s.model.cfg());
        let recommendation = recommend(&s.model, &window)?;
        steps[index].recommendation = recommendation.clone();
        s.steps = steps;
        Ok(IngestResponse {
            schema_version: SCHEMA_VERSION,
            session_id: id.to_string(),
            step_index: index,
            rewards,
            assigned_topic: topic,
            remaining_target: s.remaining_target(),
            recommended_topic: argmax(&recommendation),
            recommendation,
            top_words: emb.top_words().to_vec(),
        })
    }

    fn view(s: &LiveSession) -> Result<SessionView> {
        let current_recommendation = if s.steps.is_empty() {
            None
        } else {
            Some(recommend(&s.model, &live_window(&s.steps, s.target_return, s.scale, s.model.cfg()))?)
        };
        Ok(SessionView {
            schema_version: SCHEMA_VERSION,
            id: s.id.clone(),
            scale: s.scale,
            checkpoint_id: s.model.id.clone(),
            target_return: s.target_return,
            remaining_target: s.remaining_target(),
            steps: s
                .steps
                .iter()
                .map(|st| StepView {
                    index: st.index,
                    rewards: st.rewards,
                    topic: st.topic,
                    recommendation: st.recommendation.clone(),
                })
                .collect(),
            current_recommendation,
        })
    }

    pub async fn get(&self, id: &str) -> Result<SessionView> {
        let handle = self.session(id)?;
        let s = handle.lock().await;
        Self::view(&s)
    }

    pub async fn set_target(&self, id: &str, req: PatchRequest) -> Result<SessionView> {
        if !req.target_return.is_finite() {
            return Err(Error::Validation("target_return must be finite".into()));
        }
        let handle = self.session(id)?;
        let mut s = handle.lock().await;
        s.target_return = req.target_return;
        Self::view(&s)
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        self.sessions
            .write()
            .expect("session map lock poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(format!("session {id:?}")))
    }

    pub fn checkpoints(&self) -> serde_json::Value {
        let list: Vec<_> = self
            .registry
            .models()
            .map(|m| {
                json!({
                    "id": m.id,
                    "scale": m.scale,
                    "context_k": m.cfg().context_k,
                    "n_actions": m.cfg().n_actions,
                    "default_target": m.default_target,
                    "return_scale": m.cfg().return_scale,
                })
            })
            .collect();
        json!({ "schema_version": SCHEMA_VERSION, "checkpoints": list })
    }
}

/// Error body: `{"schema_version", "error": {"kind", "message"}}`.
pub struct ApiError(pub Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Validation(_) | Error::Parse { .. } | Error::Shape(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "kind": self.0.kind(), "message": self.0.to_string() },
        });
        (status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn create_h(State(st): State<Arc<SessionStore>>, Json(req): Json<CreateRequest>) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    Ok((StatusCode::CREATED, Json(st.create(req)?)))
}

async fn ingest_h(
    State(st): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<TurnRequest>,
) -> ApiResult<Json<IngestResponse>> {
    Ok(Json(st.ingest(&id, req).await?))
}

async fn get_h(State(st): State<Arc<SessionStore>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(st.get(&id).await?))
}

async fn patch_h(
    State(st): State<Arc<SessionStore>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PatchRequest>,
) -> ApiResult<Json<SessionView>> {
    Ok(Json(st.set_target(&id, req).await?))
}

async fn delete_h(State(st): State<Arc<SessionStore>>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    st.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn checkpoints_h(State(st): State<Arc<SessionStore>>) -> Json<serde_json::Value> {
    Json(st.checkpoints())
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_h))
        .route("/sessions/{id}", get(get_h).patch(patch_h).delete(delete_h))
        .route("/sessions/{id}/turns", post(ingest_h))
        .route("/checkpoints", get(checkpoints_h))
        .with_state(store)
}
