#![allow(dead_code)]

use tokuq::backend::{Backend, BigramBackend};
use tokuq::model::{ReferenceModel, TinyTransformerConfig};
use tokuq::types::{EmbeddingMatrix, TokenSequence};

/// Tiny deterministic generator for test fixtures (independent of the crate's RNG).
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    /// Uniform in [-1, 1).
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

pub fn random_bigram(vocab: usize, dim: usize, seed: u64) -> BigramBackend {
    let mut r = Lcg(seed);
    let e = (0..vocab * dim).map(|_| r.unit()).collect();
    let u = (0..vocab * dim).map(|_| 1.5 * r.unit()).collect();
    BigramBackend::new(vocab, dim, e, u).unwrap()
}

pub fn random_tokens(vocab: usize, m: usize, n: usize, seed: u64) -> TokenSequence {
    let mut r = Lcg(seed ^ 0xabcdef);
    let ids = (0..m + n).map(|_| r.below(vocab as u64) as u32).collect();
    TokenSequence::new(ids, m).unwrap()
}

pub fn model(vocab: usize, dim: usize, layers: usize, heads: usize, max_pos: usize, seed: u64) -> ReferenceModel {
    ReferenceModel::init(TinyTransformerConfig {
        vocab_size: vocab,
        dim,
        num_layers: layers,
        num_heads: heads,
        ffn_dim: 2 * dim,
        max_positions: max_pos,
        init_seed: seed,
        init_scale: 0.5,
    })
    .unwrap()
}

/// Weighted chosen-token log-probability objective evaluated by forward passes only.
pub fn objective(backend: &dyn Backend, h: &EmbeddingMatrix, tokens: &TokenSequence, weights: &[f64]) -> f64 {
    // forward over the full sequence treating every row >= 1 as a prediction
    let full = TokenSequence::new(tokens.ids().to_vec(), 1).unwrap();
    let lp = backend.chosen_token_log_probs(h, &full).unwrap();
    lp.iter().zip(&weights[1..]).map(|(l, w)| l * w).sum()
}

/// Central finite-difference gradient of `objective` with the given step.
pub fn fd_gradient(backend: &dyn Backend, h: &EmbeddingMatrix, tokens: &TokenSequence, weights: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.as_slice().len());
    for idx in 0..h.as_slice().len() {
        let mut plus = h.clone();
        plus.as_mut_slice()[idx] += step;
        let mut minus = h.clone();
        minus.as_mut_slice()[idx] -= step;
        out.push(
            (objective(backend, &plus, tokens, weights) - objective(backend, &minus, tokens, weights))
                / (2.0 * step),
        );
    }
    out
}

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}
