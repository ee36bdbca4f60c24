//! Topic recommendation for counseling dialogue with a Decision Transformer.
//!
//! The pipeline turns transcripts into turn-pairs, embeds them, labels each
//! with a topic, scores working-alliance rewards, and trains a causal
//! transformer over (return-to-go, state, action) sequences to recommend the
//! next topic.

pub mod alliance;
pub mod analysis;
pub mod corpus;
pub mod dtmodel;
pub mod embed;
pub mod error;
pub mod labelgen;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod service;
pub mod synth;
pub mod topics;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
