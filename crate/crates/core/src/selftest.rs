//! Built-in checks run by `tokuq selftest`: analytic gradients against
//! finite differences, causal masking, and closed-form metric oracles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{response_weights, Backend, BigramBackend};
use crate::eval::{auroc, average_precision, resolve_k};
use crate::model::{ReferenceModel, TinyTransformerConfig};
use crate::numeric::entropy;
use crate::rng;
use crate::types::{EmbeddingMatrix, KSpec, TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;

fn uniform(stream: &mut ChaCha8Rng) -> f64 {
    stream.random_range(-1.0..1.0)
}

fn random_ids(stream: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| stream.random_range(0..vocab as TokenId)).collect()
}

fn random_bigram(vocab: usize, dim: usize, stream: &mut ChaCha8Rng) -> BigramBackend {
    let e = (0..vocab * dim).map(|_| uniform(stream)).collect();
    let u = (0..vocab * dim).map(|_| 1.5 * uniform(stream)).collect();
    BigramBackend::new(vocab, dim, e, u).expect("valid bigram tables")
}

fn tiny_model(vocab: usize, dim: usize, layers: usize, heads: usize, seed: u64) -> ReferenceModel {
    ReferenceModel::init(TinyTransformerConfig {
        vocab_size: vocab,
        dim,
        num_layers: layers,
        num_heads: heads,
        ffn_dim: 2 * dim,
        max_positions: 32,
        init_seed: seed,
        init_scale: 0.5,
    })
    .expect("valid model config")
}

fn response_log_prob(backend: &dyn Backend, h: &EmbeddingMatrix, tokens: &TokenSequence) -> f64 {
    backend
        .chosen_token_log_probs(h, tokens)
        .expect("forward pass")
        .iter()
        .sum()
}

/// Largest relative error between the analytic gradient and central
/// differences, with the denominator floored at 1e-6.
pub fn max_fd_error(backend: &dyn Backend, tokens: &TokenSequence) -> crate::Result<f64> {
    let h = backend.embed_tokens(tokens)?;
    let grad = backend.log_prob_gradient(&h, tokens, &response_weights(tokens))?;
    let mut worst: f64 = 0.0;
    for (idx, &g) in grad.as_slice().iter().enumerate() {
        let mut plus = h.clone();
        plus.as_mut_slice()[idx] += FD_STEP;
        let mut minus = h.clone();
        minus.as_mut_slice()[idx] -= FD_STEP;
        let fd = (response_log_prob(backend, &plus, tokens) - response_log_prob(backend, &minus, tokens))
            / (2.0 * FD_STEP);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
    }
    Ok(worst)
}

fn gradient_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let configs = [(16, 8, 1, 2, 10), (32, 8, 2, 2, 12), (64, 16, 1, 4, 16), (24, 12, 3, 3, 20), (48, 16, 2, 1, 24)];
    for (i, &(v, d, l, heads, len)) in configs.iter().enumerate() {
        let model = tiny_model(v, d, l, heads, 100 + i as u64);
        let mut stream = rng::stream(200 + i as u64);
        let tokens = TokenSequence::new(random_ids(&mut stream, v, len), len / 3).expect("valid shape");
        let name = format!("transformer V={v} d={d} L={l} heads={heads} len={len}");
        out.push(match max_fd_error(&model, &tokens) {
            Ok(e) => CheckResult::new("gradient", name, e < FD_TOLERANCE, format!("max rel err {e:.3e}")),
            Err(e) => CheckResult::new("gradient", name, false, e.to_string()),
        });
    }
    let mut stream = rng::stream(7);
    let bigram = random_bigram(20, 6, &mut stream);
    let tokens = TokenSequence::new(random_ids(&mut stream, 20, 12), 4).expect("valid shape");
    out.push(match max_fd_error(&bigram, &tokens) {
        Ok(e) => CheckResult::new("gradient", "bigram", e < FD_TOLERANCE, format!("max rel err {e:.3e}")),
        Err(e) => CheckResult::new("gradient", "bigram", false, e.to_string()),
    });
    out
}

/// Perturbs rows `>= t` and checks every distribution predicting a position
/// `<= t` is bit-identical. Returns the number of violating trials.
pub fn causality_violations(backend: &dyn Backend, vocab: usize, dim: usize, max_len: usize, trials: usize, seed: u64) -> usize {
    let mut stream = rng::stream(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let len = stream.random_range(2..=max_len);
        let tokens = TokenSequence::new(random_ids(&mut stream, vocab, len), 1).expect("valid shape");
        let data: Vec<f64> = (0..len * dim).map(|_| uniform(&mut stream)).collect();
        let h = EmbeddingMatrix::new(len, dim, data).expect("finite");
        let t = stream.random_range(1..len);
        let mut moved = h.clone();
        for row in t..len {
            for x in moved.row_mut(row) {
                *x += uniform(&mut stream);
            }
        }
        let a = backend.response_log_distributions(&h, &tokens).expect("forward");
        let b = backend.response_log_distributions(&moved, &tokens).expect("forward");
        // response row j predicts position j + 1
        let same = (0..t).all(|j| {
            a[j].iter().zip(&b[j]).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same {
            bad += 1;
        }
    }
    bad
}

fn causality_suite() -> Vec<CheckResult> {
    let model = tiny_model(32, 8, 2, 2, 11);
    let mut stream = rng::stream(12);
    let bigram = random_bigram(32, 8, &mut stream);
    [("transformer", &model as &dyn Backend), ("bigram", &bigram as &dyn Backend)]
        .into_iter()
        .map(|(name, b)| {
            let bad = causality_violations(b, 32, 8, 24, 100, 13);
            CheckResult::new("causality", name, bad == 0, format!("{bad}/100 trials leaked"))
        })
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn oracle_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let uniform_h = entropy(&[0.125; 8]);
    out.push(CheckResult::new(
        "oracle",
        "entropy of uniform is ln|V|",
        close(uniform_h, 8f64.ln(), 1e-12),
        format!("{uniform_h}"),
    ));
    let onehot = entropy(&[0.0, 1.0, 0.0]);
    out.push(CheckResult::new("oracle", "entropy of one-hot is 0", onehot == 0.0, format!("{onehot}")));
    let nll = crate::metrics::nll_from_log_probs(&[0.25f64.ln()]).values[0];
    out.push(CheckResult::new("oracle", "nll of 0.25 is ln 4", close(nll, 4f64.ln(), 1e-12), format!("{nll}")));
    let a = auroc(&[true, false, true, false], &[0.9, 0.9, 0.2, 0.1]);
    out.push(CheckResult::new(
        "oracle",
        "auroc tie fixture",
        matches!(a, Ok(v) if close(v, 0.625, 1e-12)),
        format!("{a:?}"),
    ));
    let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7]);
    out.push(CheckResult::new(
        "oracle",
        "average precision fixture",
        matches!(ap, Ok(v) if close(v, 0.8333333333333334, 1e-9)),
        format!("{ap:?}"),
    ));
    let ks = [
        resolve_k(KSpec::Percent(1.0), 250),
        resolve_k(KSpec::Percent(1.0), 50),
        resolve_k(KSpec::Absolute(5), 4),
    ];
    let got: Vec<_> = ks.iter().map(|k| k.as_ref().ok().copied()).collect();
    out.push(CheckResult::new(
        "oracle",
        "resolve k",
        got == [Some(3), Some(1), Some(4)],
        format!("{got:?}"),
    ));
    out
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = gradient_suite();
    out.extend(causality_suite());
    out.extend(oracle_suite());
    out
}
