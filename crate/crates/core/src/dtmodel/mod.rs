//! Decision Transformer over (return-to-go, state, action) token triples.
//!
//! The model is generic over the scalar type: `f32` is the training and
//! serving default, `f64` is used for gradient verification. Gradients are
//! computed analytically; see `backward`.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod tensor;

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, loss_and_grad};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward, loss, ForwardTrace, Mode};
pub use params::{init_params, DTParams, LayerParams};
pub use tensor::Tensor;

/// Scalar type the model can run in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers in `tensor` check slice lengths against the shapes
        // and strides before calling.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DTConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length in timesteps; the token sequence is three times longer.
    pub context_k: usize,
    pub n_actions: usize,
    pub d_state: usize,
    pub max_timestep: usize,
    pub dropout: f64,
    /// Divisor applied to returns-to-go before embedding.
    pub return_scale: f64,
}

impl Default for DTConfig {
    fn default() -> Self {
        DTConfig {
            d_model: 128,
            n_layers: 3,
            n_heads: 1,
            context_k: 20,
            n_actions: 8,
            d_state: crate::embed::DEFAULT_DIM,
            max_timestep: 1024,
            dropout: 0.1,
            return_scale: 1.0,
        }
    }
}

impl DTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.context_k == 0 {
            return fail("context length must be at least 1");
        }
        if self.n_actions < 2 {
            return fail("need at least 2 actions");
        }
        if self.d_state == 0 || self.max_timestep == 0 || self.n_layers == 0 {
            return fail("d_state, max_timestep and n_layers must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !(self.return_scale > 0.0 && self.return_scale.is_finite()) {
            return fail("return_scale must be positive and finite");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        3 * self.context_k
    }

    /// The reserved padding / no-action id.
    pub fn pad_action(&self) -> usize {
        self.n_actions
    }

    pub(crate) fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("n_layers".into(), self.n_layers.to_string());
        m.insert("n_heads".into(), self.n_heads.to_string());
        m.insert("context_k".into(), self.context_k.to_string());
        m.insert("n_actions".into(), self.n_actions.to_string());
        m.insert("d_state".into(), self.d_state.to_string());
        m.insert("max_timestep".into(), self.max_timestep.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("return_scale".into(), self.return_scale.to_string());
        m
    }

    pub(crate) fn from_meta(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            m.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata missing {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata field {key} is malformed")))
        }
        let cfg = DTConfig {
            d_model: get(m, "d_model")?,
            n_layers: get(m, "n_layers")?,
            n_heads: get(m, "n_heads")?,
            context_k: get(m, "context_k")?,
            n_actions: get(m, "n_actions")?,
            d_state: get(m, "d_state")?,
            max_timestep: get(m, "max_timestep")?,
            dropout: get(m, "dropout")?,
            return_scale: get(m, "return_scale")?,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}
