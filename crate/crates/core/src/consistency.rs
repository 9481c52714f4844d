//! Multiple-sampling consistency baseline with exact token matching.
//!
//! A sentence of the target response counts as supported by a sample when
//! the sample contains the sentence's token ids as a contiguous run. No
//! semantic similarity is attempted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Span, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Always `"exact_match"`.
    pub method: String,
    /// Per target sentence, the fraction of samples containing it verbatim.
    pub fractions: Vec<f64>,
    /// Lowest fraction, earliest sentence on ties.
    pub least_consistent: usize,
}

fn contains_run(haystack: &[TokenId], needle: &[TokenId]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

pub fn exact_match_consistency(samples: &[Vec<TokenId>], target: &[TokenId], sentences: &[Span]) -> Result<ConsistencyReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "consistency needs at least 2 sampled responses, got {}",
            samples.len()
        )));
    }
    if sentences.is_empty() {
        return Err(Error::InvalidInput("target has no sentences".into()));
    }
    let mut fractions = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.start >= s.end || s.end > target.len() {
            return Err(Error::InvalidInput(format!(
                "sentence [{},{}) outside target of length {}",
                s.start,
                s.end,
                target.len()
            )));
        }
        let needle = &target[s.start..s.end];
        let hits = samples.iter().filter(|x| contains_run(x, needle)).count();
        fractions.push(hits as f64 / samples.len() as f64);
    }
    let mut least_consistent = 0;
    for (i, &f) in fractions.iter().enumerate() {
        if f < fractions[least_consistent] {
            least_consistent = i;
        }
    }
    Ok(ConsistencyReport {
        method: "exact_match".into(),
        fractions,
        least_consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_are_fully_consistent() {
        let t = vec![1, 2, 3, 4];
        let spans = [Span::new(0, 2), Span::new(2, 4)];
        let r = exact_match_consistency(&[t.clone(), t.clone()], &t, &spans).unwrap();
        assert_eq!(r.fractions, vec![1.0, 1.0]);
        assert_eq!(r.least_consistent, 0);
    }

    #[test]
    fn absent_sentence_scores_zero() {
        let t = vec![1, 2, 3, 4];
        let spans = [Span::new(0, 2), Span::new(2, 4)];
        let r = exact_match_consistency(&[vec![9, 1, 2], vec![1, 2, 7]], &t, &spans).unwrap();
        assert_eq!(r.fractions, vec![1.0, 0.0]);
        assert_eq!(r.least_consistent, 1);
    }

    #[test]
    fn too_few_samples() {
        assert!(exact_match_consistency(&[], &[1], &[Span::new(0, 1)]).is_err());
        assert!(exact_match_consistency(&[vec![1]], &[1], &[Span::new(0, 1)]).is_err());
    }
}
