//! One function per subcommand. Each prints a one-line JSON summary on
//! stdout; outputs carry no timestamps, so reruns are byte-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use topicdt::alliance::score_turn_pair;
use topicdt::analysis::{aggregate_absolute, aggregate_relative, collect_attention, export_report, report_svg};
use topicdt::corpus::{load_transcripts, segment_sessions, SessionPairs};
use topicdt::dtmodel::{load_checkpoint, save_checkpoint, DTParams};
use topicdt::embed::{embed_turn_pair, load_vectors, train_sgns, VocabEmbedding};
use topicdt::labelgen::{check_disjoint, export_finetune_file, export_gold_labels, generate_labels, LABELGEN_SPLIT};
use topicdt::pipeline::{corpus_sentences, inventory_from, pair_states};
use topicdt::service::{router, serving_metadata, Embedder, Registry, SessionStore, CHECKPOINT_EXTENSION};
use topicdt::synth::{gen_synthetic as generate, parse_planted_tsv, relabel_agreement, write_synthetic, SyntheticConfig};
use topicdt::topics::{fit_topics, TopicModel};
use topicdt::trajectory::{
    build_trajectories, make_windows, read_trajectories, split_sessions, write_trajectories, SessionTrajectory,
};
use topicdt::train::{
    ablate_context, evaluate_pearson, model_seed, run_seeds, run_single, train_bc_on, train_model, EvalResult,
    ABLATION_LENGTHS,
};
use topicdt::{Error, Result};

use crate::config::PipelineConfig;

const META_SPLIT_SEED: &str = "split_seed";
const META_SPLIT: &str = "split";
const META_STEPS: &str = "steps";

fn emit(v: Value) {
    println!("{v}");
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(format!("missing input {}", path.display())))
    }
}

fn outputs(cfg: &PipelineConfig) -> Result<PathBuf> {
    let d = cfg.resolve(&cfg.paths.outputs);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

/// `transcripts.jsonl` -> `transcripts.topics.tsv`.
pub fn sidecar_path(corpus: &Path) -> PathBuf {
    corpus.with_extension("topics.tsv")
}

fn load_corpus_pairs(cfg: &PipelineConfig) -> Result<Vec<SessionPairs>> {
    let p = cfg.resolve(&cfg.paths.corpus);
    require(&p)?;
    Ok(segment_sessions(&load_transcripts(&p)?))
}

fn load_vecs(cfg: &PipelineConfig) -> Result<VocabEmbedding> {
    let p = cfg.resolve(&cfg.paths.vectors);
    require(&p)?;
    load_vectors(&p)
}

fn load_topics(cfg: &PipelineConfig) -> Result<TopicModel> {
    let p = cfg.resolve(&cfg.paths.topic_model);
    require(&p)?;
    TopicModel::load(&p)
}

fn inventory_text(cfg: &PipelineConfig) -> Result<Option<String>> {
    match &cfg.paths.inventory {
        None => Ok(None),
        Some(p) => {
            let p = cfg.resolve(p);
            require(&p)?;
            std::fs::read_to_string(&p).map(Some).map_err(|e| Error::io(&p, e))
        }
    }
}

fn load_trajs(cfg: &PipelineConfig) -> Result<Vec<SessionTrajectory>> {
    let p = cfg.resolve(&cfg.paths.trajectories);
    require(&p)?;
    let trajs = read_trajectories(&p)?;
    if trajs.is_empty() {
        return Err(Error::InsufficientData(format!("{} holds no trajectories", p.display())));
    }
    Ok(trajs)
}

fn checkpoint_path(cfg: &PipelineConfig) -> PathBuf {
    let e = &cfg.experiment;
    cfg.resolve(&cfg.paths.checkpoints)
        .join(format!("{}-k{}.{CHECKPOINT_EXTENSION}", e.scale, e.model.context_k))
}

fn eval_json(r: &std::result::Result<EvalResult, String>) -> Value {
    match r {
        Ok(e) => json!({"r": e.pearson_r, "accuracy": e.accuracy, "n_positions": e.n_positions}),
        Err(msg) => json!({"error": msg}),
    }
}

pub fn gen_synthetic(
    cfg: &PipelineConfig,
    sessions: Option<usize>,
    turns: Option<usize>,
    topics: Option<usize>,
) -> Result<()> {
    let s = &cfg.synthetic;
    let sc = SyntheticConfig {
        n_sessions: sessions.unwrap_or(s.sessions),
        turns_per_session: turns.unwrap_or(s.turns),
        n_topics: topics.unwrap_or(s.topics),
        seed: s.seed,
    };
    let corpus = generate(&sc)?;
    let path = cfg.resolve(&cfg.paths.corpus);
    ensure_parent(&path)?;
    let sidecar = sidecar_path(&path);
    write_synthetic(&corpus, &path, &sidecar)?;
    let pairs: usize = corpus.planted.iter().map(|p| p.topics.len()).sum();
    emit(json!({
        "corpus": path, "sidecar": sidecar, "sessions": sc.n_sessions, "turn_pairs": pairs, "seed": sc.seed,
    }));
    Ok(())
}

pub fn ingest(cfg: &PipelineConfig) -> Result<()> {
    let sessions = load_corpus_pairs(cfg)?;
    let out = cfg.resolve(&cfg.paths.pairs);
    ensure_parent(&out)?;
    let mut text = String::new();
    for s in &sessions {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::Validation(e.to_string()))?);
        text.push('\n');
    }
    write(&out, text)?;
    let pairs: usize = sessions.iter().map(|s| s.pairs.len()).sum();
    emit(json!({"pairs_file": out, "sessions": sessions.len(), "turn_pairs": pairs}));
    Ok(())
}

pub fn embed(cfg: &PipelineConfig) -> Result<()> {
    let p = cfg.resolve(&cfg.paths.corpus);
    require(&p)?;
    let (v, report) = train_sgns(&corpus_sentences(&load_transcripts(&p)?), &cfg.stages.sgns)?;
    let out = cfg.resolve(&cfg.paths.vectors);
    ensure_parent(&out)?;
    v.save(&out)?;
    emit(json!({
        "vectors": out, "vocabulary": v.len(), "dim": v.dim(), "epoch_loss": report.epoch_loss,
    }));
    Ok(())
}

pub fn topics(cfg: &PipelineConfig) -> Result<()> {
    let sessions = load_corpus_pairs(cfg)?;
    let v = load_vecs(cfg)?;
    let (m, report) = fit_topics(&pair_states(&sessions, &v), cfg.stages.n_topics, cfg.stages.topic_seed)?;
    let out = cfg.resolve(&cfg.paths.topic_model);
    ensure_parent(&out)?;
    m.save(&out)?;

    let sidecar = sidecar_path(&cfg.resolve(&cfg.paths.corpus));
    let agreement = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let planted: HashMap<(String, usize), usize> =
            parse_planted_tsv(&text)?.into_iter().map(|(s, i, t)| ((s, i), t)).collect();
        let (mut found, mut truth) = (Vec::new(), Vec::new());
        let mut it = report.assignments.iter();
        for s in &sessions {
            for p in &s.pairs {
                let a = *it.next().expect("one assignment per turn-pair");
                if let Some(&t) = planted.get(&(s.session_id.clone(), p.index)) {
                    found.push(a);
                    truth.push(t);
                }
            }
        }
        let k = truth.iter().chain(&found).max().map_or(m.k, |&x| (x + 1).max(m.k));
        Some(relabel_agreement(&found, &truth, k)?)
    } else {
        None
    };
    emit(json!({"topic_model": out, "k": m.k, "iterations": report.iterations, "planted_agreement": agreement}));
    Ok(())
}

pub fn rewards(cfg: &PipelineConfig) -> Result<()> {
    let sessions = load_corpus_pairs(cfg)?;
    let v = load_vecs(cfg)?;
    let inv = inventory_from(inventory_text(cfg)?.as_deref(), &v)?;
    let mut text = String::from("session_id\tindex\tfull\ttask\tbond\tgoal\n");
    let mut n = 0;
    for s in &sessions {
        for p in &s.pairs {
            let r = score_turn_pair(&embed_turn_pair(p, &v), &inv);
            text.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", s.session_id, p.index, r.full, r.task, r.bond, r.goal));
            n += 1;
        }
    }
    let out = cfg.resolve(&cfg.paths.rewards);
    ensure_parent(&out)?;
    write(&out, text)?;
    emit(json!({"rewards": out, "turn_pairs": n}));
    Ok(())
}

pub fn trajectories(cfg: &PipelineConfig) -> Result<()> {
    let sessions: Vec<SessionPairs> =
        load_corpus_pairs(cfg)?.into_iter().filter(|s| cfg.stages.condition.admits(s.condition)).collect();
    if sessions.is_empty() {
        return Err(Error::InsufficientData(format!("no sessions match condition {}", cfg.stages.condition)));
    }
    let v = load_vecs(cfg)?;
    let m = load_topics(cfg)?;
    let inv = inventory_from(inventory_text(cfg)?.as_deref(), &v)?;
    let trajs = build_trajectories(&sessions, &v, &m, &inv);
    let out = cfg.resolve(&cfg.paths.trajectories);
    ensure_parent(&out)?;
    write_trajectories(&trajs, &out)?;
    let steps: usize = trajs.iter().map(|t| t.steps.len()).sum();
    emit(json!({
        "trajectories": out, "sessions": trajs.len(), "steps": steps, "condition": cfg.stages.condition.to_string(),
    }));
    Ok(())
}

pub fn train(cfg: &PipelineConfig) -> Result<()> {
    let trajs = load_trajs(cfg)?;
    let k = load_topics(cfg)?.k;
    let mut exp = cfg.experiment.clone();
    exp.run_baseline = false;
    let seed = cfg.seeds.base;
    let o = run_single(&trajs, k, &exp, seed)?;

    let mut metadata = serving_metadata(&o.train, exp.scale);
    metadata.insert(META_SPLIT_SEED.into(), seed.to_string());
    metadata.insert(META_SPLIT.into(), exp.split.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    metadata.insert(META_STEPS.into(), exp.opt.steps.to_string());
    let path = checkpoint_path(cfg);
    ensure_parent(&path)?;
    save_checkpoint(&o.params, &metadata, &path)?;
    emit(json!({
        "checkpoint": path, "seed": seed, "train_sessions": o.train.len(), "test_sessions": o.test.len(),
        "final_loss": o.log.losses.last(), "dt": eval_json(&o.dt),
    }));
    Ok(())
}

struct Loaded {
    params: DTParams<f32>,
    train: Vec<SessionTrajectory>,
    test: Vec<SessionTrajectory>,
    split_seed: u64,
}

/// Loads the checkpoint for the configured scale and context length and
/// rebuilds the split it was trained on.
fn load_trained(cfg: &PipelineConfig, trajs: &[SessionTrajectory]) -> Result<Loaded> {
    let path = checkpoint_path(cfg);
    require(&path)?;
    let (params, meta) = load_checkpoint(&path)?;
    let field = |k: &str| {
        meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{} lacks metadata {k:?}", path.display())))
    };
    let split_seed: u64 =
        field(META_SPLIT_SEED)?.parse().map_err(|_| Error::Checkpoint(format!("bad {META_SPLIT_SEED}")))?;
    let split: Vec<f64> = field(META_SPLIT)?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad {META_SPLIT}"))))
        .collect::<Result<_>>()?;
    let mut parts = split_sessions(trajs, &split, split_seed)?;
    let test = parts.pop().unwrap_or_default();
    let train = parts.swap_remove(0);
    Ok(Loaded { params, train, test, split_seed })
}

pub fn eval(cfg: &PipelineConfig, all_seeds: bool) -> Result<()> {
    let trajs = load_trajs(cfg)?;
    let k = load_topics(cfg)?.k;
    let e = &cfg.experiment;
    let out = outputs(cfg)?;
    let v = if all_seeds {
        let summary = run_seeds(&trajs, k, e, &cfg.seed_list())?;
        let v = serde_json::to_value(&summary).map_err(|e| Error::Validation(e.to_string()))?;
        let margin = summary.bc.map(|bc| summary.dt.mean_r - bc.mean_r);
        json!({"scale": e.scale, "k": e.model.context_k, "summary": v, "dt_minus_bc": margin})
    } else {
        let l = load_trained(cfg, &trajs)?;
        let dt = evaluate_pearson(&l.params, &l.test, e.scale).map_err(|e| e.to_string());
        let bc = if e.run_baseline {
            let m = train_bc_on(&l.train, k, &e.bc_opt, model_seed(l.split_seed))?;
            Some(EvalResult::from_predictions(&m.predictions(&l.test)).map_err(|e| e.to_string()))
        } else {
            None
        };
        json!({
            "scale": e.scale, "k": e.model.context_k, "split_seed": l.split_seed,
            "test_sessions": l.test.len(), "dt": eval_json(&dt), "bc": bc.as_ref().map(eval_json),
        })
    };
    let name = if all_seeds { "eval-seeds" } else { "eval" };
    let path = out.join(format!("{name}-{}-k{}.json", e.scale, e.model.context_k));
    write(&path, format!("{v}\n"))?;
    emit(v);
    Ok(())
}

pub fn ablate(cfg: &PipelineConfig) -> Result<()> {
    let trajs = load_trajs(cfg)?;
    let k = load_topics(cfg)?.k;
    let table = ablate_context(
        &trajs,
        k,
        &cfg.experiment,
        &ABLATION_LENGTHS,
        &topicdt::alliance::RewardScale::ALL,
        &cfg.seed_list(),
        cfg.jobs.max(1),
    )?;
    let out = outputs(cfg)?;
    let (txt, jsonl) = (out.join("ablation.txt"), out.join("ablation.jsonl"));
    write(&txt, table.to_text())?;
    write(&jsonl, table.to_jsonl())?;
    print!("{}", table.to_text());
    emit(json!({"table": txt, "records": jsonl, "cells": table.cells.len()}));
    Ok(())
}

pub fn attn(cfg: &PipelineConfig) -> Result<()> {
    let trajs = load_trajs(cfg)?;
    let l = load_trained(cfg, &trajs)?;
    let m = &l.params.cfg;
    let windows: Vec<_> = l
        .test
        .iter()
        .flat_map(|t| make_windows(t, m.context_k, cfg.experiment.scale, m.return_scale, 1, m.n_actions))
        .collect();
    let rows = collect_attention(&l.params, &windows)?;
    let mut reports = aggregate_absolute(&rows, true)?;
    reports.extend(aggregate_relative(&rows)?);

    let out = outputs(cfg)?;
    let stem = format!("attention-{}-k{}", cfg.experiment.scale, m.context_k);
    let csv = out.join(format!("{stem}.csv"));
    export_report(&reports, &csv)?;
    let mut svgs = Vec::new();
    for r in &reports {
        let p = out.join(format!("{stem}-{}-{}.svg", r.mode.as_str(), r.modality.as_str()));
        write(&p, report_svg(r))?;
        svgs.push(p);
    }
    emit(json!({"report": csv, "charts": svgs, "queries": rows.len()}));
    Ok(())
}

pub fn labelgen(cfg: &PipelineConfig) -> Result<()> {
    let trajs = load_trajs(cfg)?;
    let k = load_topics(cfg)?.k;
    let pairs = load_corpus_pairs(cfg)?;
    let seed = cfg.seeds.base;
    let parts = split_sessions(&trajs, &LABELGEN_SPLIT, seed)?;
    let (first, middle, last) = (&parts[0], &parts[1], &parts[2]);
    check_disjoint(&[first, middle, last])?;
    let (params, _) = train_model(first, k, &cfg.experiment, model_seed(seed))?;

    let synthetic = generate_labels(&params, middle, &pairs, cfg.experiment.scale)?;
    let gold_train = export_gold_labels(first, &pairs)?;
    let gold_test = export_gold_labels(last, &pairs)?;
    let out = outputs(cfg)?;
    let files: BTreeMap<&str, PathBuf> = [
        ("synthetic", out.join("finetune-synthetic.jsonl")),
        ("gold_train", out.join("finetune-gold-train.jsonl")),
        ("gold_test", out.join("finetune-gold-test.jsonl")),
    ]
    .into();
    export_finetune_file(&synthetic, &files["synthetic"])?;
    export_finetune_file(&gold_train, &files["gold_train"])?;
    export_finetune_file(&gold_test, &files["gold_test"])?;
    emit(json!({
        "files": files, "sessions": [first.len(), middle.len(), last.len()],
        "records": {"synthetic": synthetic.len(), "gold_train": gold_train.len(), "gold_test": gold_test.len()},
    }));
    Ok(())
}

pub fn serve(cfg: &PipelineConfig, addr: &str) -> Result<()> {
    let v = load_vecs(cfg)?;
    let m = load_topics(cfg)?;
    let inv = inventory_from(inventory_text(cfg)?.as_deref(), &v)?;
    let dir = cfg.resolve(&cfg.paths.checkpoints);
    require(&dir)?;
    let registry = Registry::load_dir(Embedder::new(v, m, inv)?, &dir)?;
    let n = registry.models().count();
    let app = router(Arc::new(SessionStore::new(Arc::new(registry))));
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Validation(format!("runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr, e))?;
        let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
        emit(json!({"listening": local.to_string(), "checkpoints": n}));
        axum::serve(listener, app).await.map_err(|e| Error::io(addr, e))
    })
}
