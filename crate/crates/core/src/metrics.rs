//! Token-level uncertainty scores over the response tokens of one case.
//!
//! * `nll`: `-ln P(x_t)`.
//! * `entropy`: Shannon entropy (nats) of the full next-token distribution.
//! * `rand_pert`: unbiased sample variance of `P(x_t)` over i.i.d. Gaussian
//!   noise added to every input row, one forward pass per noise draw.
//! * `adv_l2_pert` / `adv_linf_pert`: a single descent step on `H` against the
//!   total response log-probability (raw or signed gradient), scored as
//!   `ln P(x_t | H) - ln P(x_t | Ĥ)`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::backend::{require_white_box, response_weights, Backend, TraceRecord};
use crate::error::{Error, Result};
use crate::numeric::{entropy, entropy_from_log_probs, RunningVariance};
use crate::rng;
use crate::types::{
    EmbeddingMatrix, Metric, PerturbationConfig, PerturbationMode, ScoreSeries, TokenSequence,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationOutcome {
    pub score_series: ScoreSeries,
    /// `Ĥ`, kept only when requested.
    pub perturbed_embeddings: Option<EmbeddingMatrix>,
    /// Total response log-probability under `H`.
    pub objective_before: f64,
    /// Total response log-probability under `Ĥ`.
    pub objective_after: f64,
}

pub fn nll_from_log_probs(log_probs: &[f64]) -> ScoreSeries {
    // max(0) folds the -0.0 of P = 1 into +0.0
    ScoreSeries::new(Metric::Nll, log_probs.iter().map(|lp| (-lp).max(0.0)).collect())
}

pub fn nll_series(backend: &dyn Backend, h: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<ScoreSeries> {
    Ok(nll_from_log_probs(&backend.chosen_token_log_probs(h, tokens)?))
}

pub fn entropy_from_distributions(dists: &[Vec<f64>]) -> ScoreSeries {
    ScoreSeries::new(Metric::Entropy, dists.iter().map(|p| entropy(p)).collect())
}

pub fn entropy_series(backend: &dyn Backend, h: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<ScoreSeries> {
    let dists = backend.response_log_distributions(h, tokens)?;
    let max = (backend.vocab_size() as f64).ln();
    Ok(ScoreSeries::new(
        Metric::Entropy,
        dists.iter().map(|lp| entropy_from_log_probs(lp).min(max)).collect(),
    ))
}

pub fn nll_from_trace(trace: &TraceRecord) -> ScoreSeries {
    nll_from_log_probs(&trace.log_probs)
}

/// Uses precomputed entropies when present, otherwise the full
/// distributions; a trace with chosen-token log-probs only cannot supply it.
pub fn entropy_from_trace(trace: &TraceRecord) -> Result<ScoreSeries> {
    if let Some(e) = &trace.entropies {
        return Ok(ScoreSeries::new(Metric::Entropy, e.clone()));
    }
    if let Some(d) = &trace.distributions {
        return Ok(entropy_from_distributions(d));
    }
    Err(Error::unsupported(
        "entropy (trace has neither full distributions nor precomputed entropies)",
        "trace_only",
    ))
}

fn noisy_copy(h: &EmbeddingMatrix, first_row: usize, sigma: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut out = h.clone();
    let mut stream = rng::stream(seed);
    let d = h.dim();
    for v in &mut out.as_mut_slice()[first_row * d..] {
        let z: f64 = StandardNormal.sample(&mut stream);
        *v += sigma * z;
    }
    if !out.is_finite() {
        return Err(Error::InvalidInput("noise produced non-finite embeddings".into()));
    }
    Ok(out)
}

/// Chosen-token log-probs for each noise draw, in draw order.
fn perturbed_log_prob_samples(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
    case_id: &str,
    cfg: &PerturbationConfig,
) -> Result<Vec<Vec<f64>>> {
    require_white_box(backend, "random perturbation")?;
    cfg.validate()?;
    if cfg.num_samples < 2 {
        return Err(Error::InvalidConfig(format!(
            "random perturbation needs num_samples >= 2, got {}",
            cfg.num_samples
        )));
    }
    let first_row = if cfg.noise_response_only {
        tokens.query_len()
    } else {
        0
    };
    (0..cfg.num_samples as u64)
        .into_par_iter()
        .map(|s| {
            let seed = rng::derive_seed(cfg.seed, case_id, s);
            let noisy = noisy_copy(h, first_row, cfg.sigma, seed)?;
            backend.chosen_token_log_probs(&noisy, tokens)
        })
        .collect()
}

fn variance_per_token(samples: &[Vec<f64>], n: usize, map: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut acc = vec![RunningVariance::default(); n];
    for sample in samples {
        for (a, &lp) in acc.iter_mut().zip(sample) {
            a.push(map(lp));
        }
    }
    acc.iter().map(RunningVariance::sample_variance).collect()
}

/// Unbiased variance of `P(x_t)` across `cfg.num_samples` noise draws. Draw
/// `s` uses its own stream seeded from `(cfg.seed, case_id, s)`.
pub fn random_perturbation_series(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
    case_id: &str,
    cfg: &PerturbationConfig,
) -> Result<ScoreSeries> {
    let samples = perturbed_log_prob_samples(backend, h, tokens, case_id, cfg)?;
    Ok(ScoreSeries::new(
        Metric::RandPert,
        variance_per_token(&samples, tokens.response_len(), f64::exp),
    ))
}

/// Same draws as [`random_perturbation_series`], variance of `ln P(x_t)`.
pub fn random_perturbation_log_series(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
    case_id: &str,
    cfg: &PerturbationConfig,
) -> Result<ScoreSeries> {
    let samples = perturbed_log_prob_samples(backend, h, tokens, case_id, cfg)?;
    Ok(ScoreSeries::new(
        Metric::RandPertLog,
        variance_per_token(&samples, tokens.response_len(), |lp| lp),
    ))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Ĥ = H - α g` (l2) or `Ĥ = H - α sign(g)` (l∞), with `g` the gradient of
/// the summed response log-probability.
pub fn adversarial_perturb(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
    cfg: &PerturbationConfig,
) -> Result<EmbeddingMatrix> {
    require_white_box(backend, "adversarial perturbation")?;
    if !backend.capabilities().supports_gradients {
        return Err(Error::unsupported("embedding gradients", backend.capabilities().tier));
    }
    cfg.validate()?;
    let grad = backend.log_prob_gradient(h, tokens, &response_weights(tokens))?;
    let alpha = cfg.alpha;
    let mut out = h.clone();
    match cfg.mode {
        PerturbationMode::AdvL2 => {
            let norm = grad.frobenius_norm();
            let scale = if cfg.normalize_gradient && norm > 0.0 {
                alpha / norm
            } else {
                alpha
            };
            for (x, g) in out.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *x -= scale * g;
            }
        }
        PerturbationMode::AdvLinf => {
            for (x, g) in out.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *x -= alpha * sign(*g);
            }
        }
        PerturbationMode::Random => {
            return Err(Error::InvalidConfig(
                "adversarial perturbation needs mode adv_l2 or adv_linf".into(),
            ))
        }
    }
    if !out.is_finite() {
        return Err(Error::InvalidInput("adversarial step produced non-finite embeddings".into()));
    }
    Ok(out)
}

/// Per-token drop in log-probability after one adversarial step. Costs one
/// backward and two teacher-forced forward passes.
pub fn adversarial_score_series(
    backend: &dyn Backend,
    h: &EmbeddingMatrix,
    tokens: &TokenSequence,
    cfg: &PerturbationConfig,
    keep_perturbed: bool,
) -> Result<PerturbationOutcome> {
    let metric = match cfg.mode {
        PerturbationMode::AdvL2 => Metric::AdvL2Pert,
        PerturbationMode::AdvLinf => Metric::AdvLinfPert,
        PerturbationMode::Random => {
            return Err(Error::InvalidConfig(
                "adversarial scoring needs mode adv_l2 or adv_linf".into(),
            ))
        }
    };
    let perturbed = adversarial_perturb(backend, h, tokens, cfg)?;
    let before = backend.chosen_token_log_probs(h, tokens)?;
    let after = backend.chosen_token_log_probs(&perturbed, tokens)?;
    let values = before.iter().zip(&after).map(|(b, a)| b - a).collect();
    Ok(PerturbationOutcome {
        score_series: ScoreSeries::new(metric, values),
        perturbed_embeddings: keep_perturbed.then_some(perturbed),
        objective_before: before.iter().sum(),
        objective_after: after.iter().sum(),
    })
}

pub fn response_average_score(series: &ScoreSeries) -> Result<f64> {
    if series.values.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(series.values.iter().sum::<f64>() / series.values.len() as f64)
}

/// Any metric on a white-box backend; `embeddings` defaults to the
/// backend's own embedding of `tokens`.
pub fn score_white_box(
    backend: &dyn Backend,
    tokens: &TokenSequence,
    case_id: &str,
    metric: Metric,
    cfg: &PerturbationConfig,
) -> Result<PerturbationOutcome> {
    if metric.requires_white_box() {
        require_white_box(backend, metric.as_str())?;
    }
    let h = backend.embed_tokens(tokens)?;
    let plain = |series: ScoreSeries| PerturbationOutcome {
        score_series: series,
        perturbed_embeddings: None,
        objective_before: f64::NAN,
        objective_after: f64::NAN,
    };
    match metric {
        Metric::Nll => Ok(plain(nll_series(backend, &h, tokens)?)),
        Metric::Entropy => Ok(plain(entropy_series(backend, &h, tokens)?)),
        Metric::RandPert => Ok(plain(random_perturbation_series(
            backend,
            &h,
            tokens,
            case_id,
            &cfg.with_mode(PerturbationMode::Random),
        )?)),
        Metric::RandPertLog => Ok(plain(random_perturbation_log_series(
            backend,
            &h,
            tokens,
            case_id,
            &cfg.with_mode(PerturbationMode::Random),
        )?)),
        Metric::AdvL2Pert => {
            adversarial_score_series(backend, &h, tokens, &cfg.with_mode(PerturbationMode::AdvL2), false)
        }
        Metric::AdvLinfPert => adversarial_score_series(
            backend,
            &h,
            tokens,
            &cfg.with_mode(PerturbationMode::AdvLinf),
            false,
        ),
        Metric::External => Err(Error::InvalidInput(
            "external scores are ingested, not computed".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::BigramBackend;

    fn bigram() -> BigramBackend {
        let e = vec![vec![0.3, -0.2], vec![-0.5, 0.8], vec![0.1, 0.4]];
        let u = vec![vec![1.0, 0.5], vec![-0.7, 0.2], vec![0.3, -1.1]];
        BigramBackend::from_rows(&e, &u).unwrap()
    }

    fn toks() -> TokenSequence {
        TokenSequence::new(vec![0, 1, 2, 0, 1], 2).unwrap()
    }

    #[test]
    fn nll_closed_forms() {
        let s = nll_from_log_probs(&[0.0, 0.25f64.ln()]);
        assert_eq!(s.values[0], 0.0);
        assert!(s.values[0].is_sign_positive());
        assert!((s.values[1] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds_on_bigram() {
        let b = bigram();
        let t = toks();
        let h = b.embed_tokens(&t).unwrap();
        let e = entropy_series(&b, &h, &t).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.values.iter().all(|&v| (0.0..=3f64.ln()).contains(&v)));
    }

    #[test]
    fn trace_without_distributions_cannot_give_entropy() {
        let tr = TraceRecord::new("a", vec![-0.1, -0.2]);
        assert!(matches!(
            entropy_from_trace(&tr),
            Err(Error::CapabilityUnsupported { .. })
        ));
        let mut tr = tr;
        tr.entropies = Some(vec![0.5, 0.6]);
        assert_eq!(entropy_from_trace(&tr).unwrap().values, vec![0.5, 0.6]);
    }

    #[test]
    fn zero_sigma_gives_zero_variance() {
        let b = bigram();
        let t = toks();
        let h = b.embed_tokens(&t).unwrap();
        let cfg = PerturbationConfig {
            sigma: 0.0,
            ..Default::default()
        };
        let s = random_perturbation_series(&b, &h, &t, "c", &cfg).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_is_rejected() {
        let b = bigram();
        let t = toks();
        let h = b.embed_tokens(&t).unwrap();
        let cfg = PerturbationConfig {
            num_samples: 1,
            ..Default::default()
        };
        assert!(matches!(
            random_perturbation_series(&b, &h, &t, "c", &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_alpha_is_identity() {
        let b = bigram();
        let t = toks();
        let h = b.embed_tokens(&t).unwrap();
        for mode in [PerturbationMode::AdvL2, PerturbationMode::AdvLinf] {
            let cfg = PerturbationConfig {
                alpha: 0.0,
                mode,
                ..Default::default()
            };
            assert_eq!(adversarial_perturb(&b, &h, &t, &cfg).unwrap(), h);
            let out = adversarial_score_series(&b, &h, &t, &cfg, true).unwrap();
            assert!(out.score_series.values.iter().all(|&v| v == 0.0));
            assert_eq!(out.perturbed_embeddings.as_ref(), Some(&h));
        }
    }

    #[test]
    fn normalized_l2_step_has_length_alpha() {
        let b = bigram();
        let t = toks();
        let h = b.embed_tokens(&t).unwrap();
        let cfg = PerturbationConfig {
            alpha: 1e-3,
            mode: PerturbationMode::AdvL2,
            normalize_gradient: true,
            ..Default::default()
        };
        let p = adversarial_perturb(&b, &h, &t, &cfg).unwrap();
        let step: f64 = p
            .as_slice()
            .iter()
            .zip(h.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!((step - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(2.0), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
    }

    #[test]
    fn average_score() {
        assert_eq!(
            response_average_score(&ScoreSeries::new(Metric::Nll, vec![1.0, 3.0])).unwrap(),
            2.0
        );
        assert_eq!(
            response_average_score(&ScoreSeries::new(Metric::Nll, vec![0.0; 3])).unwrap(),
            0.0
        );
        assert!(matches!(
            response_average_score(&ScoreSeries::new(Metric::Nll, vec![])),
            Err(Error::EmptySeries)
        ));
    }
}
