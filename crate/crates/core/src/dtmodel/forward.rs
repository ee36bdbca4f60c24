use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::DTParams;
use super::tensor::{add_bias, gemm, matmul};
use super::{DTConfig, Real};
use crate::error::{Error, Result};
use crate::trajectory::TrainingWindow;

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic; dropout disabled.
    Eval,
    /// Dropout enabled, masks drawn from `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub ln1_xhat: Vec<F>,
    pub ln1_rstd: Vec<F>,
    pub h1: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `n_heads x T x T`, zero on masked entries.
    pub probs: Vec<F>,
    pub ctx: Vec<F>,
    pub attn_drop: Option<Vec<F>>,
    pub ln2_xhat: Vec<F>,
    pub ln2_rstd: Vec<F>,
    pub h2: Vec<F>,
    pub pre_act: Vec<F>,
    pub act: Vec<F>,
    pub ffn_drop: Option<Vec<F>>,
}

#[derive(Debug, Clone)]
pub(crate) struct WindowCache<F> {
    pub emb_drop: Option<Vec<F>>,
    pub layers: Vec<LayerCache<F>>,
    pub lnf_xhat: Vec<F>,
    pub lnf_rstd: Vec<F>,
    pub hf: Vec<F>,
    /// `K x n_actions`, read at the state tokens.
    pub logits: Vec<F>,
}

/// Output of a batched forward pass plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub(crate) cfg: DTConfig,
    pub(crate) windows: Vec<WindowCache<F>>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn batch_size(&self) -> usize {
        self.windows.len()
    }

    /// `K x n_actions` logits of window `b`.
    pub fn logits(&self, b: usize) -> &[F] {
        &self.windows[b].logits
    }

    pub fn logits_at(&self, b: usize, step: usize) -> &[F] {
        let n = self.cfg.n_actions;
        &self.windows[b].logits[step * n..(step + 1) * n]
    }

    /// Final-layer attention of window `b`, `n_heads x 3K x 3K`.
    pub fn final_attention(&self, b: usize) -> &[F] {
        &self.windows[b].layers.last().expect("at least one layer").probs
    }
}

/// Token `i` may attend to key `j` when `j <= i` and `j` is not padding.
pub(crate) fn key_visible(i: usize, j: usize, window: &TrainingWindow) -> bool {
    j <= i && window.pad_mask[j / 3]
}

pub(crate) fn layer_norm<F: Real>(x: &[F], g: &[F], b: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = g.len();
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (xr[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = xh * g[c] + b[c];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

fn dropout_mask<F: Real>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect()
}

pub(crate) fn check_window(cfg: &DTConfig, w: &TrainingWindow) -> Result<()> {
    let k = cfg.context_k;
    if w.returns_to_go.len() != k
        || w.states.len() != k
        || w.actions.len() != k
        || w.timesteps.len() != k
        || w.pad_mask.len() != k
    {
        return Err(Error::Shape(format!("window length must be {k}")));
    }
    if let Some(s) = w.states.iter().find(|s| s.dim() != cfg.d_state) {
        return Err(Error::Shape(format!("state dimension {} != {}", s.dim(), cfg.d_state)));
    }
    if let Some(&a) = w.actions.iter().find(|&&a| a > cfg.n_actions) {
        return Err(Error::Shape(format!("action id {a} exceeds {}", cfg.n_actions)));
    }
    Ok(())
}

fn window_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Token embeddings `(R_1, s_1, a_1, ..., R_K, s_K, a_K)`, each plus the
/// embedding of its timestep.
fn embed_tokens<F: Real>(p: &DTParams<F>, w: &TrainingWindow) -> Vec<F> {
    let cfg = &p.cfg;
    let d = cfg.d_model;
    let k = cfg.context_k;
    let mut x = vec![F::zero(); 3 * k * d];

    let states: Vec<F> = w.states.iter().flat_map(|s| s.0.iter().map(|&v| F::of(v))).collect();
    let state_emb = matmul(&states, &p.w_state.data, k, cfg.d_state, d);

    for t in 0..k {
        let time = p.time_table.row(w.timesteps[t].min(cfg.max_timestep - 1));
        let rtg = F::of(w.returns_to_go[t]);
        let act = p.action_table.row(w.actions[t]);
        for c in 0..d {
            x[(3 * t) * d + c] = rtg * p.w_return.data[c] + p.b_return.data[c] + time[c];
            x[(3 * t + 1) * d + c] = state_emb[t * d + c] + p.b_state.data[c] + time[c];
            x[(3 * t + 2) * d + c] = act[c] + time[c];
        }
    }
    x
}

fn attention<F: Real>(
    q: &[F],
    kx: &[F],
    v: &[F],
    cfg: &DTConfig,
    w: &TrainingWindow,
) -> (Vec<F>, Vec<F>) {
    let t_len = cfg.seq_len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = F::one() / F::of(hd as f64).sqrt();
    let mut probs = vec![F::zero(); cfg.n_heads * t_len * t_len];
    let mut ctx = vec![F::zero(); t_len * d];

    let mut qh = vec![F::zero(); t_len * hd];
    let mut kh = vec![F::zero(); t_len * hd];
    let mut vh = vec![F::zero(); t_len * hd];
    let mut scores = vec![F::zero(); t_len * t_len];
    let mut out = vec![F::zero(); t_len * hd];
    for h in 0..cfg.n_heads {
        for r in 0..t_len {
            let src = r * d + h * hd;
            qh[r * hd..(r + 1) * hd].copy_from_slice(&q[src..src + hd]);
            kh[r * hd..(r + 1) * hd].copy_from_slice(&kx[src..src + hd]);
            vh[r * hd..(r + 1) * hd].copy_from_slice(&v[src..src + hd]);
        }
        gemm(&mut scores, &qh, &kh, t_len, hd, t_len, false, true, F::zero());

        let ph = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
        for i in 0..t_len {
            let row = &scores[i * t_len..(i + 1) * t_len];
            let prow = &mut ph[i * t_len..(i + 1) * t_len];
            let mut max = F::neg_infinity();
            for j in 0..=i {
                if key_visible(i, j, w) && row[j] * scale > max {
                    max = row[j] * scale;
                }
            }
            if max == F::neg_infinity() {
                continue; // padded query: nothing visible
            }
            let mut sum = F::zero();
            for j in 0..=i {
                if key_visible(i, j, w) {
                    let e = (row[j] * scale - max).exp();
                    prow[j] = e;
                    sum += e;
                }
            }
            let inv = F::one() / sum;
            for pj in prow[..=i].iter_mut() {
                *pj *= inv;
            }
        }

        gemm(&mut out, ph, &vh, t_len, t_len, hd, false, false, F::zero());
        for r in 0..t_len {
            ctx[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&out[r * hd..(r + 1) * hd]);
        }
    }
    (probs, ctx)
}

pub(crate) fn forward_window<F: Real>(
    p: &DTParams<F>,
    w: &TrainingWindow,
    mut rng: Option<ChaCha8Rng>,
) -> WindowCache<F> {
    let cfg = &p.cfg;
    let d = cfg.d_model;
    let t_len = cfg.seq_len();
    let drop = cfg.dropout;
    let mut mask = |len: usize| -> Option<Vec<F>> {
        match rng.as_mut() {
            Some(r) if drop > 0.0 => Some(dropout_mask(len, drop, r)),
            _ => None,
        }
    };

    let mut x = embed_tokens(p, w);
    let emb_drop = mask(x.len());
    if let Some(m) = &emb_drop {
        x.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }

    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (h1, ln1_xhat, ln1_rstd) = layer_norm(&x, &lp.ln1_g.data, &lp.ln1_b.data);
        let mut q = matmul(&h1, &lp.w_q.data, t_len, d, d);
        add_bias(&mut q, &lp.b_q.data);
        let mut k = matmul(&h1, &lp.w_k.data, t_len, d, d);
        add_bias(&mut k, &lp.b_k.data);
        let mut v = matmul(&h1, &lp.w_v.data, t_len, d, d);
        add_bias(&mut v, &lp.b_v.data);
        let (probs, ctx) = attention(&q, &k, &v, cfg, w);
        let mut a = matmul(&ctx, &lp.w_o.data, t_len, d, d);
        add_bias(&mut a, &lp.b_o.data);
        let attn_drop = mask(a.len());
        if let Some(m) = &attn_drop {
            a.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
        }
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += *a);

        let (h2, ln2_xhat, ln2_rstd) = layer_norm(&x, &lp.ln2_g.data, &lp.ln2_b.data);
        let mut pre_act = matmul(&h2, &lp.w_fc.data, t_len, d, 4 * d);
        add_bias(&mut pre_act, &lp.b_fc.data);
        let act: Vec<F> = pre_act.iter().map(|&z| gelu(z)).collect();
        let mut m = matmul(&act, &lp.w_proj.data, t_len, 4 * d, d);
        add_bias(&mut m, &lp.b_proj.data);
        let ffn_drop = mask(m.len());
        if let Some(dm) = &ffn_drop {
            m.iter_mut().zip(dm).for_each(|(v, dm)| *v *= *dm);
        }
        x.iter_mut().zip(&m).for_each(|(x, m)| *x += *m);

        layers.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln2_xhat,
            ln2_rstd,
            h2,
            pre_act,
            act,
            ffn_drop,
        });
    }

    let (hf, lnf_xhat, lnf_rstd) = layer_norm(&x, &p.lnf_g.data, &p.lnf_b.data);
    let kk = cfg.context_k;
    let mut state_rows = vec![F::zero(); kk * d];
    for t in 0..kk {
        state_rows[t * d..(t + 1) * d].copy_from_slice(&hf[(3 * t + 1) * d..(3 * t + 2) * d]);
    }
    let mut logits = matmul(&state_rows, &p.w_head.data, kk, d, cfg.n_actions);
    add_bias(&mut logits, &p.b_head.data);

    WindowCache { emb_drop, layers, lnf_xhat, lnf_rstd, hf, logits }
}

pub(crate) fn window_rng(mode: Mode, index: usize) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Eval => None,
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(window_seed(seed, index))),
    }
}

/// Batched forward pass. Windows are processed in parallel; results are
/// independent of thread count.
pub fn forward<F: Real>(p: &DTParams<F>, batch: &[TrainingWindow], mode: Mode) -> Result<ForwardTrace<F>> {
    for w in batch {
        check_window(&p.cfg, w)?;
    }
    let windows = batch
        .par_iter()
        .enumerate()
        .map(|(i, w)| forward_window(p, w, window_rng(mode, i)))
        .collect();
    Ok(ForwardTrace { cfg: p.cfg.clone(), windows })
}

/// Cross-entropy of one logit row against `target`, in f64.
pub(crate) fn cross_entropy<F: Real>(logits: &[F], target: usize) -> f64 {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    lse - logits[target].as_f64()
}

pub(crate) fn count_targets(batch: &[TrainingWindow], n_actions: usize) -> usize {
    batch
        .iter()
        .map(|w| (0..w.len()).filter(|&i| w.is_target(i, n_actions)).count())
        .sum()
}

/// Mean cross-entropy over real, non-reserved action positions.
pub fn loss<F: Real>(trace: &ForwardTrace<F>, batch: &[TrainingWindow]) -> Result<f64> {
    let n_actions = trace.cfg.n_actions;
    let n = count_targets(batch, n_actions);
    if n == 0 {
        return Err(Error::InsufficientData("batch has no real action positions".into()));
    }
    let mut total = 0.0;
    for (b, w) in batch.iter().enumerate() {
        for i in 0..w.len() {
            if w.is_target(i, n_actions) {
                total += cross_entropy(trace.logits_at(b, i), w.actions[i]);
            }
        }
    }
    Ok(total / n as f64)
}
