use super::{check_embeddings, check_ids, check_weights, Backend, BackendCapabilities};
use crate::error::{Error, Result};
use crate::numeric::{dot, log_softmax};
use crate::types::{EmbeddingMatrix, GradientMatrix, TokenSequence};

/// Closed-form backend: the logits predicting row `t` are `U · h_{t-1}`.
///
/// Used as the analytic oracle throughout the tests: the chosen-token
/// log-probability gradient with respect to `h_{t-1}` is
/// `U_c - Σ_v p_v U_v`, and every other row gets zero.
#[derive(Debug, Clone)]
pub struct BigramBackend {
    vocab_size: usize,
    dim: usize,
    embedding: Vec<f64>,
    unembedding: Vec<f64>,
}

impl BigramBackend {
    /// Both tables are row-major `|V| x d`.
    pub fn new(vocab_size: usize, dim: usize, embedding: Vec<f64>, unembedding: Vec<f64>) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "bigram tables need |V| >= 2 and d >= 1, got {vocab_size}x{dim}"
            )));
        }
        for (name, t) in [("embedding", &embedding), ("unembedding", &unembedding)] {
            if t.len() != vocab_size * dim {
                return Err(Error::ShapeMismatch(format!(
                    "{name} table has {} entries, expected {vocab_size}x{dim}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} table has non-finite entries")));
            }
        }
        Ok(Self {
            vocab_size,
            dim,
            embedding,
            unembedding,
        })
    }

    pub fn from_rows(embedding: &[Vec<f64>], unembedding: &[Vec<f64>]) -> Result<Self> {
        let v = embedding.len();
        let d = embedding.first().map_or(0, Vec::len);
        if unembedding.len() != v
            || embedding.iter().chain(unembedding).any(|r| r.len() != d)
        {
            return Err(Error::ShapeMismatch("bigram tables disagree in shape".into()));
        }
        Self::new(v, d, embedding.concat(), unembedding.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unembedding_row(&self, v: usize) -> &[f64] {
        &self.unembedding[v * self.dim..(v + 1) * self.dim]
    }

    pub fn embedding_row(&self, v: usize) -> &[f64] {
        &self.embedding[v * self.dim..(v + 1) * self.dim]
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..self.vocab_size)
            .map(|v| dot(self.unembedding_row(v), h))
            .collect()
    }
}

impl Backend for BigramBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities::white_box(self.dim)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn embed_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        check_ids(tokens, self.vocab_size)?;
        let data = tokens
            .ids()
            .iter()
            .flat_map(|&id| self.embedding_row(id as usize).iter().copied())
            .collect();
        EmbeddingMatrix::new(tokens.len(), self.dim, data)
    }

    fn response_log_distributions(&self, h: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        check_ids(tokens, self.vocab_size)?;
        check_embeddings(h, tokens, self.dim)?;
        Ok((tokens.query_len()..tokens.len())
            .map(|t| log_softmax(&self.logits(h.row(t - 1))))
            .collect())
    }

    fn log_prob_gradient(&self, h: &EmbeddingMatrix, tokens: &TokenSequence, weights: &[f64]) -> Result<GradientMatrix> {
        check_ids(tokens, self.vocab_size)?;
        check_embeddings(h, tokens, self.dim)?;
        check_weights(weights, tokens)?;
        let mut grad = GradientMatrix::zeros(h.rows(), self.dim);
        for t in 1..tokens.len() {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let lp = log_softmax(&self.logits(h.row(t - 1)));
            let chosen = tokens.ids()[t] as usize;
            let row = grad.row_mut(t - 1);
            for (v, &l) in lp.iter().enumerate() {
                let coeff = if v == chosen { 1.0 - l.exp() } else { -l.exp() };
                for (g, &u) in row.iter_mut().zip(self.unembedding_row(v)) {
                    *g += w * coeff * u;
                }
            }
        }
        Ok(grad)
    }
}
