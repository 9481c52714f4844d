//! A deterministic tiny causal transformer usable as a white-box backend.
//!
//! Pre-norm GPT layout: token embedding plus learned absolute position
//! embedding form the input row `h_i`; each block applies
//! `x += Attn(LN(x))` then `x += MLP(LN(x))` with a tanh-GELU MLP; a final
//! layer norm feeds an untied unembedding. Perturbations act on the summed
//! input rows, i.e. on exactly the `H` handed to the forward pass.
//!
//! Parameters are stored in one flat vector whose order is also the draw
//! order at initialisation and the order in the parameter file:
//!
//! ```text
//! token_embedding   |V| x d
//! position_embedding max_positions x d
//! per layer:
//!   ln1_gain d, ln1_bias d,
//!   w_q d x d, b_q d, w_k d x d, b_k d, w_v d x d, b_v d, w_o d x d, b_o d,
//!   ln2_gain d, ln2_bias d,
//!   w_1 d x ffn, b_1 ffn, w_2 ffn x d, b_2 d
//! final_gain d, final_bias d
//! unembedding       |V| x d
//! ```
//!
//! Weight matrices are row-major `in x out` (`y = x W + b`); the
//! unembedding is `|V| x d` (`logit_v = U_v · z`).

mod forward;
mod params_file;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use params_file::{read_params, write_params, PARAM_MAGIC};

use crate::backend::{
    check_embeddings, check_ids, check_weights, Backend, BackendCapabilities,
};
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, softmax};
use crate::rng;
use crate::types::{
    DecodeStrategy, EmbeddingMatrix, GenerationConfig, GradientMatrix, TokenId, TokenSequence,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            max_positions: 128,
            init_seed: 0,
            init_scale: 0.5,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return bad("dim, num_heads, ffn_dim and max_positions must be >= 1".into());
        }
        if self.dim % self.num_heads != 0 {
            return bad(format!(
                "dim {} is not divisible by num_heads {}",
                self.dim, self.num_heads
            ));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale must be > 0, got {}", self.init_scale));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub unembedding: usize,
    pub total: usize,
    /// Ranges holding layer-norm gains, which are stored as `1 + draw`.
    pub gain_ranges: Vec<(usize, usize)>,
}

impl ParamLayout {
    pub fn new(cfg: &TinyTransformerConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.dim, cfg.ffn_dim);
        let mut cursor = 0usize;
        let mut take = |n: usize| {
            let at = cursor;
            cursor += n;
            at
        };
        let token_embedding = take(v * d);
        let position_embedding = take(cfg.max_positions * d);
        let mut gain_ranges = Vec::new();
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let l = LayerOffsets {
                    ln1_gain: take(d),
                    ln1_bias: take(d),
                    w_q: take(d * d),
                    b_q: take(d),
                    w_k: take(d * d),
                    b_k: take(d),
                    w_v: take(d * d),
                    b_v: take(d),
                    w_o: take(d * d),
                    b_o: take(d),
                    ln2_gain: take(d),
                    ln2_bias: take(d),
                    w_1: take(d * f),
                    b_1: take(f),
                    w_2: take(f * d),
                    b_2: take(d),
                };
                gain_ranges.push((l.ln1_gain, d));
                gain_ranges.push((l.ln2_gain, d));
                l
            })
            .collect();
        let final_gain = take(d);
        let final_bias = take(d);
        gain_ranges.push((final_gain, d));
        let unembedding = take(v * d);
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            unembedding,
            total: cursor,
            gain_ranges,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    config: TinyTransformerConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl ReferenceModel {
    /// Draws every parameter from `N(0, init_scale²)` in layout order with a
    /// ChaCha8 stream seeded by `init_seed`. Layer-norm gains are stored as
    /// `1 + draw` so the untrained model does not start with collapsed
    /// normalisation outputs.
    pub fn init(config: TinyTransformerConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut stream = rng::stream(config.init_seed);
        let mut params: Vec<f64> = (0..layout.total)
            .map(|_| {
                let z: f64 = stream.sample(StandardNormal);
                z * config.init_scale
            })
            .collect();
        for &(at, len) in &layout.gain_ranges {
            params[at..at + len].iter_mut().for_each(|g| *g += 1.0);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: TinyTransformerConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ParamFile(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::ParamFile("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub(crate) fn slice(&self, at: usize, len: usize) -> &[f64] {
        &self.params[at..at + len]
    }

    fn check_ids_raw(&self, ids: &[TokenId]) -> Result<()> {
        if ids.len() > self.config.max_positions {
            return Err(Error::PositionOverflow {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Token embedding plus position embedding for each id.
    pub fn embed_ids(&self, ids: &[TokenId]) -> Result<EmbeddingMatrix> {
        self.check_ids_raw(ids)?;
        let d = self.config.dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            let tok = self.slice(self.layout.token_embedding + id as usize * d, d);
            let p = self.slice(self.layout.position_embedding + pos * d, d);
            data.extend(tok.iter().zip(p).map(|(a, b)| a + b));
        }
        EmbeddingMatrix::new(ids.len(), d, data)
    }

    /// `(rows x |V|)` logits, row `i` predicting token `i + 1`.
    pub fn forward_logits(&self, h: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_input(h)?;
        let pass = forward::forward(self, h, false);
        Ok(pass.logits_rows(self.config.vocab_size))
    }

    /// Exact reverse pass of the weighted chosen-token log-probability.
    pub fn backward_to_embeddings(
        &self,
        h: &EmbeddingMatrix,
        tokens: &TokenSequence,
        weights: &[f64],
    ) -> Result<GradientMatrix> {
        check_ids(tokens, self.config.vocab_size)?;
        check_embeddings(h, tokens, self.config.dim)?;
        check_weights(weights, tokens)?;
        self.check_input(h)?;
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(GradientMatrix::zeros(h.rows(), h.dim()));
        }
        let pass = forward::forward(self, h, true);
        let v = self.config.vocab_size;
        let mut dlogits = vec![0.0; h.rows() * v];
        for t in 1..tokens.len() {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let row = t - 1;
            let probs = softmax(&pass.logits[row * v..(row + 1) * v]);
            let chosen = tokens.ids()[t] as usize;
            let out = &mut dlogits[row * v..(row + 1) * v];
            for (k, (o, p)) in out.iter_mut().zip(&probs).enumerate() {
                let target = if k == chosen { 1.0 } else { 0.0 };
                *o = w * (target - p);
            }
        }
        let data = forward::backward(self, &pass, &dlogits);
        GradientMatrix::from_vec(h.rows(), h.dim(), data)
    }

    fn check_input(&self, h: &EmbeddingMatrix) -> Result<()> {
        if h.dim() != self.config.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding dim {} != model dim {}",
                h.dim(),
                self.config.dim
            )));
        }
        if h.rows() > self.config.max_positions {
            return Err(Error::PositionOverflow {
                len: h.rows(),
                max: self.config.max_positions,
            });
        }
        if h.rows() == 0 {
            return Err(Error::ShapeMismatch("empty embedding matrix".into()));
        }
        Ok(())
    }

    /// Next-token logits after `ids`.
    pub fn next_token_logits(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let h = self.embed_ids(ids)?;
        let mut rows = self.forward_logits(&h)?;
        Ok(rows.pop().expect("non-empty input"))
    }

    /// Autoregressive decoding from `prompt`. Greedy picks the argmax with
    /// ties going to the lowest id; sampling draws from `softmax(logits / T)`.
    pub fn generate(&self, prompt: &[TokenId], gen: &GenerationConfig) -> Result<TokenSequence> {
        gen.validate()?;
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must be non-empty".into()));
        }
        let total = prompt.len() + gen.max_new_tokens;
        if total > self.config.max_positions {
            return Err(Error::PositionOverflow {
                len: total,
                max: self.config.max_positions,
            });
        }
        let mut ids = prompt.to_vec();
        let mut stream = rng::stream(gen.seed);
        for _ in 0..gen.max_new_tokens {
            let logits = self.next_token_logits(&ids)?;
            let next = match gen.strategy {
                DecodeStrategy::Greedy => argmax(&logits),
                DecodeStrategy::Sample => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / gen.temperature).collect();
                    sample_index(&softmax(&scaled), stream.random::<f64>())
                }
            };
            ids.push(next as TokenId);
        }
        TokenSequence::new(ids, prompt.len())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw with `u` uniform in `[0, 1)`.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Backend for ReferenceModel {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities::white_box(self.config.dim)
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn embed_tokens(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        check_ids(tokens, self.config.vocab_size)?;
        self.embed_ids(tokens.ids())
    }

    fn response_log_distributions(&self, h: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        check_ids(tokens, self.config.vocab_size)?;
        check_embeddings(h, tokens, self.config.dim)?;
        self.check_input(h)?;
        // Rows at and after the last one predict nothing in scope.
        let used = EmbeddingMatrix::new(
            h.rows() - 1,
            h.dim(),
            h.as_slice()[..(h.rows() - 1) * h.dim()].to_vec(),
        )?;
        let logits = self.forward_logits(&used)?;
        Ok(logits[tokens.query_len() - 1..]
            .iter()
            .map(|l| log_softmax(l))
            .collect())
    }

    fn log_prob_gradient(&self, h: &EmbeddingMatrix, tokens: &TokenSequence, weights: &[f64]) -> Result<GradientMatrix> {
        self.backward_to_embeddings(h, tokens, weights)
    }
}
