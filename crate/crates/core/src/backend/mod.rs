//! The model-access contract every metric is written against.
//!
//! A white-box backend exposes its input embeddings, teacher-forced
//! next-token distributions computed from an arbitrary (possibly perturbed)
//! embedding matrix, and the exact gradient of a weighted sum of chosen-token
//! log-probabilities with respect to that matrix. Trace-only sources carry
//! precomputed log-probabilities and support only NLL and entropy.
//!
//! Row `i` of `H` is the input for token `ids[i]`. The distribution that
//! predicts token `i` (for `i >= 1`) may depend on rows `0..i` only.

mod bigram;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use bigram::BigramBackend;
pub use trace::{TraceRecord, TraceSet};

use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, GradientMatrix, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    WhiteBox,
    TraceOnly,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::WhiteBox => "white_box",
            Tier::TraceOnly => "trace_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapabilities {
    pub tier: Tier,
    pub supports_gradients: bool,
    pub supports_embedding_override: bool,
    pub embedding_dim: Option<usize>,
}

impl BackendCapabilities {
    pub fn white_box(dim: usize) -> Self {
        Self {
            tier: Tier::WhiteBox,
            supports_gradients: true,
            supports_embedding_override: true,
            embedding_dim: Some(dim),
        }
    }

    pub fn trace_only() -> Self {
        Self {
            tier: Tier::TraceOnly,
            supports_gradients: false,
            supports_embedding_override: false,
            embedding_dim: None,
        }
    }
}

/// Next-token distribution predicting the token at full-sequence row `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    pub probs: Vec<f64>,
    pub position: usize,
}

pub trait Backend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn vocab_size(&self) -> usize;

    fn embed_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix>;

    /// Log-probabilities over the vocabulary for each response position, in
    /// response order, from one teacher-forced pass over `h`.
    fn response_log_distributions(
        &self,
        h: &EmbeddingMatrix,
        tokens: &TokenSequence,
    ) -> Result<Vec<Vec<f64>>>;

    /// Gradient of `Σ_i weights[i] · log Pr(ids[i] | rows 0..i)` with respect
    /// to every entry of `h`. `weights[0]` must be zero since the first token
    /// has no prediction.
    fn log_prob_gradient(
        &self,
        h: &EmbeddingMatrix,
        tokens: &TokenSequence,
        weights: &[f64],
    ) -> Result<GradientMatrix>;

    /// `ln P(x_t)` for every response token.
    fn chosen_token_log_probs(&self, h: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let dists = self.response_log_distributions(h, tokens)?;
        Ok(dists
            .iter()
            .zip(tokens.response())
            .map(|(lp, &id)| lp[id as usize])
            .collect())
    }
}

/// Probability-space view of [`Backend::response_log_distributions`].
pub fn forward_distributions(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
) -> Result<Vec<NextTokenDistribution>> {
    let logs = backend.response_log_distributions(h, tokens)?;
    Ok(logs
        .into_iter()
        .enumerate()
        .map(|(j, lp)| NextTokenDistribution {
            probs: lp.into_iter().map(f64::exp).collect(),
            position: tokens.response_row(j),
        })
        .collect())
}

/// Unit weight on every response row, zero on the query.
pub fn response_weights(tokens: &TokenSequence) -> Vec<f64> {
    let mut w = vec![0.0; tokens.len()];
    w[tokens.query_len()..].fill(1.0);
    w
}

pub(crate) fn require_white_box(backend: &dyn Backend, what: &str) -> Result<usize> {
    let caps = backend.capabilities();
    match (caps.tier, caps.embedding_dim) {
        (Tier::WhiteBox, Some(d)) => Ok(d),
        _ => Err(Error::unsupported(what, caps.tier)),
    }
}

pub(crate) fn check_ids(tokens: &TokenSequence, vocab_size: usize) -> Result<()> {
    tokens.check_shape()?;
    match tokens.ids().iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
        None => Ok(()),
    }
}

pub(crate) fn check_embeddings(h: &EmbeddingMatrix, tokens: &TokenSequence, dim: usize) -> Result<()> {
    if h.rows() != tokens.len() || h.dim() != dim {
        return Err(Error::ShapeMismatch(format!(
            "embedding matrix is {}x{}, expected {}x{dim}",
            h.rows(),
            h.dim(),
            tokens.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_weights(weights: &[f64], tokens: &TokenSequence) -> Result<()> {
    if weights.len() != tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} position weights for a sequence of {}",
            weights.len(),
            tokens.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("position weights must be finite".into()));
    }
    if weights[0] != 0.0 {
        return Err(Error::InvalidInput(
            "weight on row 0 must be zero: the first token has no prediction".into(),
        ));
    }
    Ok(())
}
