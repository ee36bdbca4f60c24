//! Analytic gradients of the mean action cross-entropy.
//!
//! Each window is differentiated independently; per-window gradients are
//! summed in fixed-size chunks and the chunk sums are reduced in batch order,
//! so results do not depend on the number of worker threads.

use rayon::prelude::*;

use super::forward::{
    check_window, count_targets, cross_entropy, forward_window, gelu_grad, window_rng, ForwardTrace, Mode,
    WindowCache,
};
use super::params::{DTParams, LayerParams};
use super::tensor::{acc_col_sums, gemm};
use super::Real;
use crate::error::{Error, Result};
use crate::trajectory::TrainingWindow;

const CHUNK: usize = 4;

/// Layer-norm backward for all rows; accumulates gain/bias gradients and
/// returns the input gradient.
fn layer_norm_backward<F: Real>(dy: &[F], xhat: &[F], rstd: &[F], g: &[F], dg: &mut [F], db: &mut [F]) -> Vec<F> {
    let d = g.len();
    let inv_d = F::one() / F::of(d as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_x = F::zero();
        for c in 0..d {
            dg[c] += dyr[c] * xr[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_x += dxhat[c] * xr[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_x *= inv_d;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - mean_dxhat - xr[c] * mean_dxhat_x);
        }
    }
    dx
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }
}

/// `dW += x^T dy` and `db += colsum(dy)` for a dense layer `y = x W + b`,
/// returning `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
fn dense_backward<F: Real>(
    x: &[F],
    dy: &[F],
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    rows: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<F> {
    gemm(dw, x, dy, n_in, rows, n_out, true, false, F::one());
    acc_col_sums(db, dy);
    let mut dx = vec![F::zero(); rows * n_in];
    gemm(&mut dx, dy, w, rows, n_out, n_in, false, true, F::zero());
    dx
}

fn attention_backward<F: Real>(
    lp: &LayerParams<F>,
    lc: &super::forward::LayerCache<F>,
    lg: &mut LayerParams<F>,
    dctx: &[F],
    t_len: usize,
    d: usize,
    n_heads: usize,
) -> Vec<F> {
    let hd = d / n_heads;
    let scale = F::one() / F::of(hd as f64).sqrt();
    let mut dq = vec![F::zero(); t_len * d];
    let mut dk = vec![F::zero(); t_len * d];
    let mut dv = vec![F::zero(); t_len * d];

    let gather = |src: &[F], h: usize| -> Vec<F> {
        let mut out = vec![F::zero(); t_len * hd];
        for r in 0..t_len {
            out[r * hd..(r + 1) * hd].copy_from_slice(&src[r * d + h * hd..r * d + (h + 1) * hd]);
        }
        out
    };
    let scatter = |dst: &mut [F], src: &[F], h: usize| {
        for r in 0..t_len {
            dst[r * d + h * hd..r * d + (h + 1) * hd].copy_from_slice(&src[r * hd..(r + 1) * hd]);
        }
    };

    let mut dp = vec![F::zero(); t_len * t_len];
    let mut dvh = vec![F::zero(); t_len * hd];
    let mut dqh = vec![F::zero(); t_len * hd];
    let mut dkh = vec![F::zero(); t_len * hd];
    for h in 0..n_heads {
        let qh = gather(&lc.q, h);
        let kh = gather(&lc.k, h);
        let vh = gather(&lc.v, h);
        let dch = gather(dctx, h);
        let ph = &lc.probs[h * t_len * t_len..(h + 1) * t_len * t_len];

        gemm(&mut dp, &dch, &vh, t_len, hd, t_len, false, true, F::zero());
        gemm(&mut dvh, ph, &dch, t_len, t_len, hd, true, false, F::zero());

        // softmax backward; masked entries have p = 0 and stay 0
        for i in 0..t_len {
            let prow = &ph[i * t_len..(i + 1) * t_len];
            let drow = &mut dp[i * t_len..(i + 1) * t_len];
            let dot: F = prow.iter().zip(drow.iter()).map(|(&p, &g)| p * g).sum();
            for (g, &p) in drow.iter_mut().zip(prow) {
                *g = p * (*g - dot) * scale;
            }
        }
        gemm(&mut dqh, &dp, &kh, t_len, t_len, hd, false, false, F::zero());
        gemm(&mut dkh, &dp, &qh, t_len, t_len, hd, true, false, F::zero());

        scatter(&mut dq, &dqh, h);
        scatter(&mut dk, &dkh, h);
        scatter(&mut dv, &dvh, h);
    }

    let mut dh1 = dense_backward(&lc.h1, &dq, &lp.w_q.data, &mut lg.w_q.data, &mut lg.b_q.data, t_len, d, d);
    let dh1_k = dense_backward(&lc.h1, &dk, &lp.w_k.data, &mut lg.w_k.data, &mut lg.b_k.data, t_len, d, d);
    let dh1_v = dense_backward(&lc.h1, &dv, &lp.w_v.data, &mut lg.w_v.data, &mut lg.b_v.data, t_len, d, d);
    for ((a, b), c) in dh1.iter_mut().zip(&dh1_k).zip(&dh1_v) {
        *a += *b + *c;
    }
    dh1
}

/// Accumulates the gradient of one window into `g`, given the gradient of
/// the loss with respect to its `K x n_actions` logits.
pub(crate) fn backward_window<F: Real>(
    p: &DTParams<F>,
    w: &TrainingWindow,
    cache: &WindowCache<F>,
    dlogits: &[F],
    g: &mut DTParams<F>,
) {
    let cfg = &p.cfg;
    let d = cfg.d_model;
    let k = cfg.context_k;
    let t_len = cfg.seq_len();
    let n_a = cfg.n_actions;

    let mut state_rows = vec![F::zero(); k * d];
    for t in 0..k {
        state_rows[t * d..(t + 1) * d].copy_from_slice(&cache.hf[(3 * t + 1) * d..(3 * t + 2) * d]);
    }
    let d_rows = dense_backward(&state_rows, dlogits, &p.w_head.data, &mut g.w_head.data, &mut g.b_head.data, k, d, n_a);
    let mut dhf = vec![F::zero(); t_len * d];
    for t in 0..k {
        dhf[(3 * t + 1) * d..(3 * t + 2) * d].copy_from_slice(&d_rows[t * d..(t + 1) * d]);
    }
    let mut dx = layer_norm_backward(&dhf, &cache.lnf_xhat, &cache.lnf_rstd, &p.lnf_g.data, &mut g.lnf_g.data, &mut g.lnf_b.data);

    for ((lp, lc), lg) in p.layers.iter().zip(&cache.layers).zip(g.layers.iter_mut()).rev() {
        // feed-forward branch
        let mut dm = dx.clone();
        apply_mask(&mut dm, &lc.ffn_drop);
        let mut dact = dense_backward(&lc.act, &dm, &lp.w_proj.data, &mut lg.w_proj.data, &mut lg.b_proj.data, t_len, 4 * d, d);
        for (da, &z) in dact.iter_mut().zip(&lc.pre_act) {
            *da *= gelu_grad(z);
        }
        let dh2 = dense_backward(&lc.h2, &dact, &lp.w_fc.data, &mut lg.w_fc.data, &mut lg.b_fc.data, t_len, d, 4 * d);
        let dres = layer_norm_backward(&dh2, &lc.ln2_xhat, &lc.ln2_rstd, &lp.ln2_g.data, &mut lg.ln2_g.data, &mut lg.ln2_b.data);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += *b);

        // attention branch
        let mut da = dx.clone();
        apply_mask(&mut da, &lc.attn_drop);
        let dctx = dense_backward(&lc.ctx, &da, &lp.w_o.data, &mut lg.w_o.data, &mut lg.b_o.data, t_len, d, d);
        let dh1 = attention_backward(lp, lc, lg, &dctx, t_len, d, cfg.n_heads);
        let dres = layer_norm_backward(&dh1, &lc.ln1_xhat, &lc.ln1_rstd, &lp.ln1_g.data, &mut lg.ln1_g.data, &mut lg.ln1_b.data);
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += *b);
    }

    apply_mask(&mut dx, &cache.emb_drop);

    let mut d_state_emb = vec![F::zero(); k * d];
    for t in 0..k {
        let dr = &dx[(3 * t) * d..(3 * t + 1) * d];
        let ds = &dx[(3 * t + 1) * d..(3 * t + 2) * d];
        let dac = &dx[(3 * t + 2) * d..(3 * t + 3) * d];
        let rtg = F::of(w.returns_to_go[t]);
        for c in 0..d {
            g.w_return.data[c] += dr[c] * rtg;
            g.b_return.data[c] += dr[c];
            g.b_state.data[c] += ds[c];
        }
        d_state_emb[t * d..(t + 1) * d].copy_from_slice(ds);
        let arow = g.action_table.row_mut(w.actions[t]);
        arow.iter_mut().zip(dac).for_each(|(a, b)| *a += *b);
        let trow = g.time_table.row_mut(w.timesteps[t].min(cfg.max_timestep - 1));
        for c in 0..d {
            trow[c] += dr[c] + ds[c] + dac[c];
        }
    }
    let states: Vec<F> = w.states.iter().flat_map(|s| s.0.iter().map(|&v| F::of(v))).collect();
    gemm(&mut g.w_state.data, &states, &d_state_emb, cfg.d_state, k, d, true, false, F::one());
}

/// Gradient of the mean loss with respect to the logits of one window, and
/// that window's summed cross-entropy.
fn logit_grad<F: Real>(logits: &[F], w: &TrainingWindow, n_a: usize, inv_n: F) -> (Vec<F>, f64) {
    let mut dl = vec![F::zero(); logits.len()];
    let mut loss = 0.0;
    for i in 0..w.len() {
        if !w.is_target(i, n_a) {
            continue;
        }
        let row = &logits[i * n_a..(i + 1) * n_a];
        loss += cross_entropy(row, w.actions[i]);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        for (a, e) in exps.iter().enumerate() {
            let target = if a == w.actions[i] { F::one() } else { F::zero() };
            dl[i * n_a + a] = (*e / sum - target) * inv_n;
        }
    }
    (dl, loss)
}

fn reduce<F: Real>(parts: Vec<(f64, DTParams<F>)>, cfg: &super::DTConfig) -> (f64, DTParams<F>) {
    let mut total = DTParams::zeros(cfg);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.add_assign(&g);
    }
    (loss, total)
}

/// Gradients of the mean loss for a trace produced by [`super::forward`].
pub fn backward<F: Real>(p: &DTParams<F>, trace: &ForwardTrace<F>, batch: &[TrainingWindow]) -> Result<DTParams<F>> {
    let n_a = p.cfg.n_actions;
    let n = count_targets(batch, n_a);
    if n == 0 {
        return Err(Error::InsufficientData("batch has no real action positions".into()));
    }
    if trace.windows.len() != batch.len() {
        return Err(Error::Shape("trace and batch sizes differ".into()));
    }
    let inv_n = F::one() / F::of(n as f64);
    let parts: Vec<(f64, DTParams<F>)> = batch
        .par_chunks(CHUNK)
        .zip(trace.windows.par_chunks(CHUNK))
        .map(|(ws, cs)| {
            let mut g = DTParams::zeros(&p.cfg);
            let mut l = 0.0;
            for (w, c) in ws.iter().zip(cs) {
                let (dl, wl) = logit_grad(&c.logits, w, n_a, inv_n);
                backward_window(p, w, c, &dl, &mut g);
                l += wl;
            }
            (l, g)
        })
        .collect();
    Ok(reduce(parts, &p.cfg).1)
}

/// Forward and backward in one pass without retaining the trace. Returns the
/// mean loss and its gradient.
pub fn loss_and_grad<F: Real>(p: &DTParams<F>, batch: &[TrainingWindow], mode: Mode) -> Result<(f64, DTParams<F>)> {
    for w in batch {
        check_window(&p.cfg, w)?;
    }
    let n_a = p.cfg.n_actions;
    let n = count_targets(batch, n_a);
    if n == 0 {
        return Err(Error::InsufficientData("batch has no real action positions".into()));
    }
    let inv_n = F::one() / F::of(n as f64);
    let parts: Vec<(f64, DTParams<F>)> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, ws)| {
            let mut g = DTParams::zeros(&p.cfg);
            let mut l = 0.0;
            for (j, w) in ws.iter().enumerate() {
                let cache = forward_window(p, w, window_rng(mode, ci * CHUNK + j));
                let (dl, wl) = logit_grad(&cache.logits, w, n_a, inv_n);
                backward_window(p, w, &cache, &dl, &mut g);
                l += wl;
            }
            (l, g)
        })
        .collect();
    let (loss, grad) = reduce(parts, &p.cfg);
    Ok((loss / n as f64, grad))
}
