//! Synthetic annotated corpus drawn from the reference model.
//!
//! Each case is a random prompt followed by a decoded response. A
//! configurable fraction of cases gets one mid-response token replaced by
//! the token of median probability at that step; the rest of the response
//! is then re-decoded from the corrupted prefix. The replaced position is
//! the annotated wrong step and the case is marked incorrect.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ReferenceModel;
use crate::numeric::softmax;
use crate::rng;
use crate::types::{
    DecodeStrategy, GenerationConfig, ReasoningCase, Span, TokenId, TokenSequence, Vocabulary,
    WrongStepAnnotation,
};

/// How the corrupted position is picked inside the middle half of the
/// response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSelection {
    /// Every mid-response position equally likely.
    Uniform,
    /// Probability proportional to `1 - max_v P(v)` at that step, so errors
    /// land where the model was less sure of its choice.
    Uncertainty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_cases: usize,
    pub prompt_len: usize,
    pub response_len: usize,
    /// Fraction of cases corrupted, in `[0, 1]`.
    pub corruption: f64,
    pub seed: u64,
    pub strategy: DecodeStrategy,
    pub temperature: f64,
    /// Width of the fixed sentence chunks written as sentence boundaries.
    pub sentence_len: usize,
    pub site_selection: SiteSelection,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_cases: 200,
            prompt_len: 16,
            response_len: 64,
            corruption: 1.0,
            seed: 0,
            strategy: DecodeStrategy::Greedy,
            temperature: 0.2,
            sentence_len: 8,
            site_selection: SiteSelection::Uncertainty,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, model: &ReferenceModel) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_cases == 0 || self.prompt_len == 0 || self.response_len == 0 {
            return bad("num_cases, prompt_len and response_len must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return bad(format!("corruption fraction {} outside [0, 1]", self.corruption));
        }
        if self.sentence_len == 0 {
            return bad("sentence_len must be >= 1".into());
        }
        if self.strategy == DecodeStrategy::Sample && !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        let max = model.config().max_positions;
        if self.prompt_len + self.response_len > max {
            return Err(Error::PositionOverflow {
                len: self.prompt_len + self.response_len,
                max,
            });
        }
        Ok(())
    }
}

/// Display strings for the synthetic vocabulary: `w0`, `w1`, ...
pub fn synthetic_vocab(size: usize) -> Result<Vocabulary> {
    Vocabulary::with_display((0..size).map(|i| format!("w{i}")).collect())
}

/// Token ranked in the middle of the distribution (descending probability,
/// ties by lower id). Never the argmax when `|V| >= 2`.
pub fn median_probability_token(probs: &[f64]) -> TokenId {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order[probs.len() / 2] as TokenId
}

fn middle_range(n: usize) -> (usize, usize) {
    let lo = n / 4;
    let hi = (3 * n).div_ceil(4).max(lo + 1).min(n);
    (lo, hi)
}

fn pick_site(model: &ReferenceModel, ids: &[TokenId], prompt_len: usize, n: usize, how: SiteSelection, u: f64) -> Result<usize> {
    let (lo, hi) = middle_range(n);
    let weights: Vec<f64> = match how {
        SiteSelection::Uniform => vec![1.0; hi - lo],
        SiteSelection::Uncertainty => {
            let h = model.embed_ids(&ids[..prompt_len + hi - 1])?;
            let logits = model.forward_logits(&h)?;
            (lo..hi)
                .map(|j| {
                    let p = softmax(&logits[prompt_len + j - 1]);
                    1.0 - p.iter().copied().fold(0.0, f64::max)
                })
                .collect()
        }
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Ok(lo);
    }
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Ok(lo + i);
        }
    }
    Ok(hi - 1)
}

fn sentence_chunks(n: usize, width: usize) -> Vec<Span> {
    (0..n)
        .step_by(width)
        .map(|s| Span::new(s, (s + width).min(n)))
        .collect()
}

fn build_case(model: &ReferenceModel, cfg: &CorpusConfig, index: usize) -> Result<ReasoningCase> {
    let case_id = format!("synth-{index:05}");
    let vocab = model.config().vocab_size as u32;
    let mut stream = rng::stream(rng::derive_seed(cfg.seed, &case_id, 0));
    let prompt: Vec<TokenId> = (0..cfg.prompt_len)
        .map(|_| stream.random_range(0..vocab))
        .collect();
    let gen = GenerationConfig {
        temperature: cfg.temperature,
        max_new_tokens: cfg.response_len,
        strategy: cfg.strategy,
        seed: rng::derive_seed(cfg.seed, &case_id, 1),
    };
    let clean = model.generate(&prompt, &gen)?;
    let corrupt = stream.random::<f64>() < cfg.corruption;
    let site_u = stream.random::<f64>();

    let sentences = sentence_chunks(cfg.response_len, cfg.sentence_len);
    let mut case = if corrupt {
        let ids = clean.ids();
        let site = pick_site(model, ids, cfg.prompt_len, cfg.response_len, cfg.site_selection, site_u)?;
        let prefix = &ids[..cfg.prompt_len + site];
        let probs = softmax(&model.next_token_logits(prefix)?);
        let replacement = median_probability_token(&probs);
        let original = ids[cfg.prompt_len + site];

        let mut corrupted = prefix.to_vec();
        corrupted.push(replacement);
        let remaining = cfg.response_len - site - 1;
        if remaining > 0 {
            let cont = GenerationConfig {
                max_new_tokens: remaining,
                seed: rng::derive_seed(cfg.seed, &case_id, 2),
                ..gen.clone()
            };
            corrupted = model.generate(&corrupted, &cont)?.ids().to_vec();
        }
        let mut case = ReasoningCase::new(&case_id, TokenSequence::new(corrupted, cfg.prompt_len)?);
        let mut ann = WrongStepAnnotation::new(site, site + 1);
        ann.sentence_index = Some(site / cfg.sentence_len);
        ann.source = Some("synthetic_corruption".into());
        case.annotation = Some(ann);
        case.final_answer_correct = Some(false);
        case.extra.insert(
            "corruption".into(),
            serde_json::json!({ "original_token": original, "replacement_token": replacement }),
        );
        case
    } else {
        let mut case = ReasoningCase::new(&case_id, clean);
        case.final_answer_correct = Some(true);
        case
    };
    case.sentence_boundaries = Some(sentences);
    Ok(case)
}

/// Deterministic for a fixed model and config; cases are independent so
/// the corpus is built in parallel.
pub fn synth_corpus(model: &ReferenceModel, cfg: &CorpusConfig) -> Result<Vec<ReasoningCase>> {
    use rayon::prelude::*;
    cfg.validate(model)?;
    (0..cfg.num_cases)
        .into_par_iter()
        .map(|i| build_case(model, cfg, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyTransformerConfig;
    use crate::types::{validate_case, Vocabulary};

    fn model() -> ReferenceModel {
        ReferenceModel::init(TinyTransformerConfig {
            vocab_size: 16,
            dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 32,
            init_seed: 5,
            init_scale: 0.5,
        })
        .unwrap()
    }

    fn cfg(corruption: f64) -> CorpusConfig {
        CorpusConfig {
            num_cases: 6,
            prompt_len: 4,
            response_len: 12,
            corruption,
            sentence_len: 4,
            ..Default::default()
        }
    }

    #[test]
    fn median_token_is_not_argmax() {
        assert_eq!(median_probability_token(&[0.1, 0.6, 0.2, 0.1]), 0);
        assert_eq!(median_probability_token(&[0.5, 0.5]), 1);
        assert_eq!(median_probability_token(&[0.7, 0.2, 0.1]), 1);
    }

    #[test]
    fn no_corruption_means_all_correct() {
        let m = model();
        let cases = synth_corpus(&m, &cfg(0.0)).unwrap();
        assert!(cases.iter().all(|c| c.final_answer_correct == Some(true) && c.annotation.is_none()));
    }

    #[test]
    fn full_corruption_annotates_one_token() {
        let m = model();
        let vocab = Vocabulary::new(16).unwrap();
        let cases = synth_corpus(&m, &cfg(1.0)).unwrap();
        for c in &cases {
            assert_eq!(c.final_answer_correct, Some(false));
            let a = c.annotation.as_ref().unwrap();
            assert_eq!(a.end - a.start, 1);
            assert!(validate_case(c, &vocab).is_empty());
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let m = model();
        assert_eq!(synth_corpus(&m, &cfg(0.5)).unwrap(), synth_corpus(&m, &cfg(0.5)).unwrap());
    }

    #[test]
    fn middle_range_is_non_empty() {
        assert_eq!(middle_range(64), (16, 48));
        assert_eq!(middle_range(1), (0, 1));
        assert_eq!(middle_range(2), (0, 2));
    }
}
