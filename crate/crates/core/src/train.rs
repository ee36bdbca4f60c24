//! Training loop, teacher-forced Pearson evaluation, the multi-seed harness,
//! the context-length ablation, and a behavior-cloning baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alliance::RewardScale;
use crate::dtmodel::{forward, init_params, loss_and_grad, DTConfig, DTParams, Mode, Real, Tensor};
use crate::embed::StateVector;
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamW, OptConfig};
use crate::trajectory::{make_windows, max_abs_return, split_sessions, window_at, SessionTrajectory, TrainingWindow};

/// Forward passes during evaluation are batched this many windows at a time.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of each step's batch.
    pub losses: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norms: Vec<f64>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains `p` in place on `windows`. Windows without a prediction target are
/// ignored. Each epoch visits the windows in a fresh seeded order.
pub fn train_dt<F: Real>(p: &mut DTParams<F>, windows: &[TrainingWindow], opt: &OptConfig, seed: u64) -> Result<TrainLog> {
    let n_a = p.cfg.n_actions;
    let usable: Vec<&TrainingWindow> =
        windows.iter().filter(|w| (0..w.len()).any(|i| w.is_target(i, n_a))).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData("no training window has an action target".into()));
    }
    if opt.batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let decay = p.decay_mask();
    let mut adam = AdamW::<F>::new(opt.clone(), p.tensors().iter().map(|(_, t)| t.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch_size = opt.batch_size.min(usable.len());
    let mut log = TrainLog::default();

    for step in 0..opt.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(usable[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grad) = loss_and_grad(p, &batch, Mode::Train { seed: step_seed(seed, step) })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let norm = {
            let mut g: Vec<&mut Tensor<F>> = grad.tensors_mut().into_iter().map(|(_, t)| t).collect();
            clip_global_norm(&mut g, opt.clip_norm)
        };
        {
            let g: Vec<&Tensor<F>> = grad.tensors().into_iter().map(|(_, t)| t).collect();
            let mut params: Vec<&mut Tensor<F>> = p.tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, &g, &decay);
        }
        log::debug!("step {step} loss {loss:.5} grad_norm {norm:.4}");
        log.losses.push(loss);
        log.grad_norms.push(norm);
    }
    Ok(log)
}

fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax<F: Real>(xs: &[F]) -> Vec<f64> {
    let max = xs.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Fraction of target positions in `windows` where the argmax logit equals
/// the recorded action.
pub fn window_accuracy<F: Real>(p: &DTParams<F>, windows: &[TrainingWindow]) -> Result<f64> {
    let n_a = p.cfg.n_actions;
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in windows.chunks(EVAL_BATCH) {
        let trace = forward(p, chunk, Mode::Eval)?;
        for (b, w) in chunk.iter().enumerate() {
            for i in (0..w.len()).filter(|&i| w.is_target(i, n_a)) {
                total += 1;
                hit += (argmax(trace.logits_at(b, i)) == w.actions[i]) as usize;
            }
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("no action targets".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Population Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            if sxx == 0.0 { "first series is constant" } else { "second series is constant" }.into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One teacher-forced prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub session_id: String,
    pub step: usize,
    pub predicted: usize,
    /// Recorded action; `None` on a session's final step.
    pub truth: Option<usize>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub pearson_r: f64,
    pub n_positions: usize,
    pub accuracy: f64,
}

impl EvalResult {
    /// Scores predictions that have a recorded action.
    pub fn from_predictions(preds: &[Prediction]) -> Result<Self> {
        let scored: Vec<(f64, f64)> =
            preds.iter().filter_map(|p| p.truth.map(|t| (p.predicted as f64, t as f64))).collect();
        if scored.is_empty() {
            return Err(Error::InsufficientData("no evaluation positions".into()));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = scored.iter().copied().unzip();
        let hits = scored.iter().filter(|(a, b)| a == b).count();
        Ok(EvalResult {
            pearson_r: pearson(&x, &y)?,
            n_positions: scored.len(),
            accuracy: hits as f64 / scored.len() as f64,
        })
    }
}

/// Teacher-forced predictions: each step's window holds the recorded history
/// and returns-to-go, and the prediction is the argmax at its state token.
/// With `all_steps` false, final steps (no recorded action) are skipped.
pub fn predict_steps<F: Real>(
    p: &DTParams<F>,
    trajs: &[SessionTrajectory],
    scale: RewardScale,
    all_steps: bool,
) -> Result<Vec<Prediction>> {
    let cfg = &p.cfg;
    let mut keys = Vec::new();
    let mut windows = Vec::new();
    for traj in trajs {
        for (t, step) in traj.steps.iter().enumerate() {
            if all_steps || step.action.is_some() {
                keys.push((traj.session_id.clone(), t, step.action));
                windows.push(window_at(traj, t, cfg.context_k, scale, cfg.return_scale, cfg.n_actions));
            }
        }
    }
    let mut out = Vec::with_capacity(keys.len());
    let last = cfg.context_k - 1;
    for (wchunk, kchunk) in windows.chunks(EVAL_BATCH).zip(keys.chunks(EVAL_BATCH)) {
        let trace = forward(p, wchunk, Mode::Eval)?;
        for (b, (sid, t, truth)) in kchunk.iter().enumerate() {
            let logits = trace.logits_at(b, last);
            out.push(Prediction {
                session_id: sid.clone(),
                step: *t,
                predicted: argmax(logits),
                truth: *truth,
                probs: softmax(logits),
            });
        }
    }
    Ok(out)
}

/// Pearson between predicted and recorded action ids over every step of
/// `test` that has a recorded action.
pub fn evaluate_pearson<F: Real>(p: &DTParams<F>, test: &[SessionTrajectory], scale: RewardScale) -> Result<EvalResult> {
    EvalResult::from_predictions(&predict_steps(p, test, scale, false)?)
}

/// Context-free multinomial logistic regression from state to action.
#[derive(Debug, Clone, PartialEq)]
pub struct BcModel {
    /// `[d_state, n_actions]`
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl BcModel {
    pub fn logits(&self, s: &StateVector) -> Vec<f64> {
        let n_a = self.b.len();
        let mut out = self.b.data.clone();
        for (i, x) in s.0.iter().enumerate() {
            let row = &self.w.data[i * n_a..(i + 1) * n_a];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }

    pub fn predict(&self, s: &StateVector) -> usize {
        argmax(&self.logits(s))
    }

    pub fn predictions(&self, trajs: &[SessionTrajectory]) -> Vec<Prediction> {
        let mut out = Vec::new();
        for traj in trajs {
            for (t, step) in traj.steps.iter().enumerate().filter(|(_, s)| s.action.is_some()) {
                let logits = self.logits(&step.state);
                out.push(Prediction {
                    session_id: traj.session_id.clone(),
                    step: t,
                    predicted: argmax(&logits),
                    truth: step.action,
                    probs: softmax(&logits),
                });
            }
        }
        out
    }
}

/// Default optimizer settings for the baseline; it is a convex problem and
/// tolerates a far larger step than the transformer.
pub fn bc_opt_defaults() -> OptConfig {
    OptConfig { learning_rate: 1e-2, weight_decay: 0.0, batch_size: 256, steps: 1500, warmup_steps: 0, ..Default::default() }
}

/// Fits the baseline with minibatch AdamW on softmax cross-entropy.
pub fn train_bc_baseline(
    states: &[&StateVector],
    actions: &[usize],
    n_actions: usize,
    opt: &OptConfig,
    seed: u64,
) -> Result<BcModel> {
    if states.is_empty() || states.len() != actions.len() {
        return Err(Error::InsufficientData("baseline needs equally many states and actions".into()));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Validation(format!("action {a} out of range for {n_actions} actions")));
    }
    let d = states[0].dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let mut m = BcModel {
        w: Tensor { shape: vec![d, n_actions], data: (0..d * n_actions).map(|_| normal.sample(&mut rng)).collect() },
        b: Tensor::zeros(&[n_actions]),
    };
    let mut adam = AdamW::<f64>::new(opt.clone(), [d * n_actions, n_actions]);
    let mut order: Vec<usize> = (0..states.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let bs = opt.batch_size.clamp(1, states.len());
    for _ in 0..opt.steps {
        let mut gw = Tensor::zeros(&[d, n_actions]);
        let mut gb = Tensor::zeros(&[n_actions]);
        for _ in 0..bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let mut p = softmax(&m.logits(states[i]));
            p[actions[i]] -= 1.0;
            for (k, x) in states[i].0.iter().enumerate() {
                for (g, pj) in gw.data[k * n_actions..(k + 1) * n_actions].iter_mut().zip(&p) {
                    *g += x * pj / bs as f64;
                }
            }
            for (g, pj) in gb.data.iter_mut().zip(&p) {
                *g += pj / bs as f64;
            }
        }
        clip_global_norm(&mut [&mut gw, &mut gb], opt.clip_norm);
        adam.step(&mut [&mut m.w, &mut m.b], &[&gw, &gb], &[true, false]);
    }
    Ok(m)
}

/// Settings for one train/evaluate run over a trajectory collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Model shape; `n_actions`, `d_state` and `return_scale` are taken from
    /// the data at run time.
    pub model: DTConfig,
    pub opt: OptConfig,
    pub bc_opt: OptConfig,
    /// Train/test session fractions.
    pub split: Vec<f64>,
    pub scale: RewardScale,
    pub window_stride: usize,
    pub run_baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: DTConfig::default(),
            opt: OptConfig::default(),
            bc_opt: bc_opt_defaults(),
            split: vec![0.95, 0.05],
            scale: RewardScale::Full,
            window_stride: 1,
            run_baseline: true,
        }
    }
}

/// Model seed paired with a split seed; both vary across seeds.
pub fn model_seed(split_seed: u64) -> u64 {
    split_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x5EED)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub split_seed: u64,
    pub model_seed: u64,
    pub params: DTParams<f32>,
    pub log: TrainLog,
    pub train: Vec<SessionTrajectory>,
    pub test: Vec<SessionTrajectory>,
    pub dt: std::result::Result<EvalResult, String>,
    pub bc: Option<std::result::Result<EvalResult, String>>,
}

fn data_dims(trajs: &[SessionTrajectory]) -> Result<usize> {
    let d = trajs
        .iter()
        .flat_map(|t| t.steps.first())
        .map(|s| s.state.dim())
        .next()
        .ok_or_else(|| Error::InsufficientData("no trajectory has any steps".into()))?;
    Ok(d)
}

/// Trains a transformer on `train` alone. `n_actions`, `d_state` and
/// `return_scale` come from the data; the rest of the shape from `cfg.model`.
pub fn train_model(
    train: &[SessionTrajectory],
    n_actions: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(DTParams<f32>, TrainLog)> {
    let mut model = cfg.model.clone();
    model.n_actions = n_actions;
    model.d_state = data_dims(train)?;
    model.return_scale = max_abs_return(train, cfg.scale);
    model.validate()?;
    let windows: Vec<TrainingWindow> = train
        .iter()
        .flat_map(|t| make_windows(t, model.context_k, cfg.scale, model.return_scale, cfg.window_stride, n_actions))
        .collect();
    let mut params: DTParams<f32> = init_params(&model, seed);
    let log = train_dt(&mut params, &windows, &cfg.opt, seed)?;
    Ok((params, log))
}

/// Trains the behavior-cloning baseline on every (state, action) step of
/// `train`.
pub fn train_bc_on(train: &[SessionTrajectory], n_actions: usize, opt: &OptConfig, seed: u64) -> Result<BcModel> {
    let (states, actions): (Vec<&StateVector>, Vec<usize>) = train
        .iter()
        .flat_map(|t| t.steps.iter())
        .filter_map(|s| s.action.map(|a| (&s.state, a)))
        .unzip();
    train_bc_baseline(&states, &actions, n_actions, opt, seed)
}

/// Split, train the transformer (and optionally the baseline), evaluate on
/// the held-out sessions. Evaluation failures are recorded, not raised.
pub fn run_single(
    trajs: &[SessionTrajectory],
    n_actions: usize,
    cfg: &ExperimentConfig,
    split_seed: u64,
) -> Result<RunOutcome> {
    if cfg.split.len() < 2 {
        return Err(Error::Validation("split needs a train and a test fraction".into()));
    }
    let parts = split_sessions(trajs, &cfg.split, split_seed)?;
    let train = parts[0].clone();
    let test = parts[parts.len() - 1].clone();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "split of {} sessions leaves an empty partition",
            trajs.len()
        )));
    }
    let mseed = model_seed(split_seed);
    let (params, log) = train_model(&train, n_actions, cfg, mseed)?;
    let dt = evaluate_pearson(&params, &test, cfg.scale).map_err(|e| e.to_string());

    let bc = if cfg.run_baseline {
        let m = train_bc_on(&train, n_actions, &cfg.bc_opt, mseed)?;
        Some(EvalResult::from_predictions(&m.predictions(&test)).map_err(|e| e.to_string()))
    } else {
        None
    };
    Ok(RunOutcome { split_seed, model_seed: mseed, params, log, train, test, dt, bc })
}

/// Mean and population standard deviation over the seeds that evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_r: f64,
    pub std_r: f64,
    pub mean_accuracy: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl Aggregate {
    pub fn of(results: &[&std::result::Result<EvalResult, String>]) -> Aggregate {
        let ok: Vec<&EvalResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let n = ok.len() as f64;
        let (mean_r, std_r, mean_accuracy) = if ok.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let m = ok.iter().map(|e| e.pearson_r).sum::<f64>() / n;
            let v = ok.iter().map(|e| (e.pearson_r - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt(), ok.iter().map(|e| e.accuracy).sum::<f64>() / n)
        };
        Aggregate { mean_r, std_r, mean_accuracy, n_ok: ok.len(), n_failed: results.len() - ok.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub dt: std::result::Result<EvalResult, String>,
    pub bc: Option<std::result::Result<EvalResult, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedRun>,
    pub dt: Aggregate,
    pub bc: Option<Aggregate>,
}

impl SeedSummary {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let dt = Aggregate::of(&runs.iter().map(|r| &r.dt).collect::<Vec<_>>());
        let bc_results: Vec<_> = runs.iter().filter_map(|r| r.bc.as_ref()).collect();
        let bc = (!bc_results.is_empty()).then(|| Aggregate::of(&bc_results));
        SeedSummary { runs, dt, bc }
    }
}

/// Seeds `base, base + 1, ...`.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

/// One `run_single` per seed; each seed sets both the split and the model.
pub fn run_seeds(
    trajs: &[SessionTrajectory],
    n_actions: usize,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<SeedSummary> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let o = run_single(trajs, n_actions, cfg, seed)?;
        log::info!("seed {seed}: dt {:?} bc {:?}", o.dt, o.bc);
        runs.push(SeedRun { seed, dt: o.dt, bc: o.bc });
    }
    Ok(SeedSummary::from_runs(runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub scale: RewardScale,
    pub k: usize,
    pub summary: SeedSummary,
    /// Highest mean r among this scale's context lengths.
    pub best_for_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub lengths: Vec<usize>,
    pub scales: Vec<RewardScale>,
    /// Row-major by scale, then context length.
    pub cells: Vec<AblationCell>,
}

pub const ABLATION_LENGTHS: [usize; 4] = [5, 10, 15, 20];

/// Trains one model per (scale, context length, seed). Cells run on up to
/// `jobs` threads; results do not depend on `jobs`.
pub fn ablate_context(
    trajs: &[SessionTrajectory],
    n_actions: usize,
    cfg: &ExperimentConfig,
    lengths: &[usize],
    scales: &[RewardScale],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationTable> {
    let grid: Vec<(RewardScale, usize)> =
        scales.iter().flat_map(|&s| lengths.iter().map(move |&k| (s, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    let summaries: Vec<Result<SeedSummary>> = pool.install(|| {
        grid.par_iter()
            .map(|&(scale, k)| {
                let mut c = cfg.clone();
                c.scale = scale;
                c.model.context_k = k;
                run_seeds(trajs, n_actions, &c, seeds)
            })
            .collect()
    });
    let mut cells = Vec::with_capacity(grid.len());
    for ((scale, k), s) in grid.into_iter().zip(summaries) {
        cells.push(AblationCell { scale, k, summary: s?, best_for_scale: false });
    }
    for &scale in scales {
        let best = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.scale == scale && c.summary.dt.mean_r.is_finite())
            .max_by(|a, b| a.1.summary.dt.mean_r.total_cmp(&b.1.summary.dt.mean_r).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        if let Some(i) = best {
            cells[i].best_for_scale = true;
        }
    }
    Ok(AblationTable { lengths: lengths.to_vec(), scales: scales.to_vec(), cells })
}

impl AblationTable {
    pub fn cell(&self, scale: RewardScale, k: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.scale == scale && c.k == k)
    }

    /// Plain-text table, one row per scale; the best context length per row
    /// is wrapped in `**`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("scale");
        for k in &self.lengths {
            let _ = write!(s, "\tK={k}");
        }
        s.push('\n');
        for &scale in &self.scales {
            s.push_str(scale.as_str());
            for &k in &self.lengths {
                let cell = match self.cell(scale, k) {
                    Some(c) if c.summary.dt.n_ok > 0 => {
                        let v = format!("{:.3} ± {:.3}", c.summary.dt.mean_r, c.summary.dt.std_r);
                        if c.best_for_scale {
                            format!("**{v}**")
                        } else {
                            v
                        }
                    }
                    _ => "n/a".to_string(),
                };
                let _ = write!(s, "\t{cell}");
            }
            s.push('\n');
        }
        s
    }

    /// One JSON object per (cell, seed).
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            for run in &c.summary.runs {
                let v = match &run.dt {
                    Ok(e) => serde_json::json!({
                        "scale": c.scale, "k": c.k, "seed": run.seed,
                        "r": e.pearson_r, "accuracy": e.accuracy, "n_positions": e.n_positions,
                    }),
                    Err(msg) => serde_json::json!({
                        "scale": c.scale, "k": c.k, "seed": run.seed,
                        "r": null, "accuracy": null, "error": msg,
                    }),
                };
                s.push_str(&v.to_string());
                s.push('\n');
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alliance::RewardVector;
    use crate::corpus::Condition;
    use crate::trajectory::Step;
    use proptest::prelude::*;

    /// Textbook formula with sums of products, no centering pass.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[0.0, 1.0, 2.0], &[2.0, 1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn pearson_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|a| 0.3 * a + normal.sample(&mut rng)).collect();
        let r = pearson(&x, &y).unwrap();
        assert!((r - pearson_oracle(&x, &y)).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn affine_maps_give_unit_correlation(
            x in prop::collection::vec(-100.0f64..100.0, 3..40),
            a in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
            b in -50.0f64..50.0,
        ) {
            let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - x.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((r - a.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_predictions_have_small_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let preds: Vec<Prediction> = (0..600)
            .map(|i| Prediction {
                session_id: format!("s{}", i / 20),
                step: i % 20,
                predicted: rand::Rng::random_range(&mut rng, 0..8),
                truth: Some(rand::Rng::random_range(&mut rng, 0..8)),
                probs: vec![],
            })
            .collect();
        let e = EvalResult::from_predictions(&preds).unwrap();
        assert!(e.pearson_r.abs() < 0.15, "{}", e.pearson_r);
        assert_eq!(e.n_positions, 600);
    }

    #[test]
    fn perfect_predictions_give_one() {
        let preds: Vec<Prediction> = (0..16)
            .map(|i| Prediction { session_id: "s".into(), step: i, predicted: i % 4, truth: Some(i % 4), probs: vec![] })
            .collect();
        let e = EvalResult::from_predictions(&preds).unwrap();
        assert_eq!((e.pearson_r, e.accuracy), (1.0, 1.0));
    }

    pub(crate) fn planted_trajs(n: usize, len: usize, d: usize, n_a: usize, seed: u64) -> Vec<SessionTrajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.05).unwrap();
        (0..n)
            .map(|s| {
                let topics: Vec<usize> = (0..len).map(|_| rand::Rng::random_range(&mut rng, 0..n_a)).collect();
                let steps = (0..len)
                    .map(|t| {
                        let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
                        v[topics[t] % d] += 1.0;
                        let r = rand::Rng::random_range(&mut rng, -0.2..0.8);
                        Step {
                            state: StateVector(v),
                            topic: topics[t],
                            action: topics.get(t + 1).copied(),
                            rewards: RewardVector { full: r, task: r, bond: r, goal: r },
                        }
                    })
                    .collect();
                SessionTrajectory { session_id: format!("s{s:03}"), condition: Condition::Other, steps }
            })
            .collect()
    }

    fn small_model() -> DTConfig {
        DTConfig { d_model: 16, n_layers: 1, context_k: 4, n_actions: 4, d_state: 6, dropout: 0.0, ..Default::default() }
    }

    #[test]
    fn evaluation_covers_every_action_step_once() {
        let trajs = planted_trajs(5, 7, 6, 4, 1);
        let p: DTParams<f64> = init_params(&small_model(), 2);
        let preds = predict_steps(&p, &trajs, RewardScale::Full, false).unwrap();
        let expected: usize = trajs.iter().map(|t| t.target_count()).sum();
        assert_eq!(preds.len(), expected);
        let all = predict_steps(&p, &trajs, RewardScale::Full, true).unwrap();
        assert_eq!(all.len(), 35);
    }

    #[test]
    fn prediction_stream_is_order_invariant() {
        let trajs = planted_trajs(6, 5, 6, 4, 4);
        let p: DTParams<f64> = init_params(&small_model(), 5);
        let mut a = predict_steps(&p, &trajs, RewardScale::Goal, false).unwrap();
        let mut rev = trajs.clone();
        rev.reverse();
        let mut b = predict_steps(&p, &rev, RewardScale::Goal, false).unwrap();
        let key = |p: &Prediction| (p.session_id.clone(), p.step);
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let trajs = planted_trajs(8, 6, 6, 4, 7);
        let cfg = DTConfig { dropout: 0.1, ..small_model() };
        let windows: Vec<TrainingWindow> =
            trajs.iter().flat_map(|t| make_windows(t, 4, RewardScale::Full, 2.0, 1, 4)).collect();
        let opt = OptConfig { learning_rate: 3e-3, steps: 60, batch_size: 8, warmup_steps: 5, ..Default::default() };
        let mut a: DTParams<f64> = init_params(&cfg, 1);
        let mut b = a.clone();
        let la = train_dt(&mut a, &windows, &opt, 11).unwrap();
        let lb = train_dt(&mut b, &windows, &opt, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(la.losses[59] < la.losses[0]);
        assert!(la.grad_norms.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn nonfinite_loss_aborts_with_step() {
        let trajs = planted_trajs(2, 4, 6, 4, 7);
        let windows: Vec<TrainingWindow> =
            trajs.iter().flat_map(|t| make_windows(t, 4, RewardScale::Full, 1.0, 1, 4)).collect();
        let mut p: DTParams<f64> = init_params(&small_model(), 1);
        p.w_head.data[0] = f64::NAN;
        let err = train_dt(&mut p, &windows, &OptConfig { steps: 3, ..Default::default() }, 1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
    }

    #[test]
    fn baseline_separates_planted_states() {
        let trajs = planted_trajs(30, 10, 6, 4, 8);
        // action = own topic, which the state encodes linearly
        let (states, actions): (Vec<&StateVector>, Vec<usize>) =
            trajs.iter().flat_map(|t| t.steps.iter()).map(|s| (&s.state, s.topic)).unzip();
        let m = train_bc_baseline(&states, &actions, 4, &bc_opt_defaults(), 3).unwrap();
        let acc = states.iter().zip(&actions).filter(|(s, a)| m.predict(s) == **a).count() as f64 / 300.0;
        assert!(acc >= 0.9, "{acc}");
        let m2 = train_bc_baseline(&states, &actions, 4, &bc_opt_defaults(), 3).unwrap();
        assert_eq!(m, m2);
    }

    fn tiny_experiment() -> ExperimentConfig {
        ExperimentConfig {
            model: DTConfig { d_model: 16, n_layers: 1, context_k: 4, dropout: 0.0, ..Default::default() },
            opt: OptConfig { learning_rate: 3e-3, steps: 20, batch_size: 16, warmup_steps: 2, ..Default::default() },
            bc_opt: OptConfig { steps: 50, ..bc_opt_defaults() },
            split: vec![0.75, 0.25],
            ..Default::default()
        }
    }

    #[test]
    fn baseline_and_transformer_score_same_positions() {
        let trajs = planted_trajs(12, 6, 6, 4, 2);
        let o = run_single(&trajs, 4, &tiny_experiment(), 5).unwrap();
        let n_test: usize = o.test.iter().map(|t| t.target_count()).sum();
        let dt = o.dt.unwrap();
        let bc = o.bc.unwrap().unwrap();
        assert_eq!(dt.n_positions, n_test);
        assert_eq!(bc.n_positions, n_test);
    }

    #[test]
    fn one_seed_matches_single_run() {
        let trajs = planted_trajs(12, 6, 6, 4, 2);
        let cfg = tiny_experiment();
        let s = run_seeds(&trajs, 4, &cfg, &[9]).unwrap();
        let o = run_single(&trajs, 4, &cfg, 9).unwrap();
        assert_eq!(s.runs[0].dt, o.dt);
        assert_eq!(s.dt.mean_r, o.dt.unwrap().pearson_r);
        assert_eq!(s.dt.std_r, 0.0);
    }

    #[test]
    fn aggregate_of_identical_values() {
        let e: std::result::Result<EvalResult, String> = Ok(EvalResult { pearson_r: 0.25, n_positions: 10, accuracy: 0.5 });
        let err: std::result::Result<EvalResult, String> = Err("constant".into());
        let a = Aggregate::of(&[&e, &e, &err, &e]);
        assert_eq!((a.mean_r, a.std_r, a.n_ok, a.n_failed), (0.25, 0.0, 3, 1));
    }

    #[test]
    fn ablation_shape_and_marking() {
        let trajs = planted_trajs(12, 6, 6, 4, 2);
        let mut cfg = tiny_experiment();
        cfg.run_baseline = false;
        cfg.opt.steps = 4;
        let t = ablate_context(&trajs, 4, &cfg, &[2, 4], &[RewardScale::Full, RewardScale::Bond], &[1, 2], 2).unwrap();
        assert_eq!(t.cells.len(), 4);
        for scale in [RewardScale::Full, RewardScale::Bond] {
            assert!(t.cells.iter().filter(|c| c.scale == scale && c.best_for_scale).count() <= 1);
        }
        assert_eq!(t.to_jsonl().lines().count(), 8);
        assert_eq!(t.to_text().lines().count(), 3);
        let again = ablate_context(&trajs, 4, &cfg, &[2, 4], &[RewardScale::Full, RewardScale::Bond], &[1, 2], 1).unwrap();
        assert_eq!(t, again);
    }
}
