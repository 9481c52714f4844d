//! Evaluation protocol: top-k first-wrong-step detection, sentence-level
//! aggregation, response-level AUROC / average precision and per-token
//! min-max normalisation.
//!
//! Every ranking uses one total order: score descending, then index
//! ascending, so the earlier token or sentence wins ties.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{KSpec, Metric, ScoreSeries, Span, TokenId, Vocabulary, WrongStepAnnotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub case_id: String,
    pub metric: Metric,
    pub k_spec: KSpec,
    pub resolved_k: usize,
    /// Ascending.
    pub top_k_indices: Vec<usize>,
    pub detected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryClassificationReport {
    pub auroc: f64,
    pub average_precision: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Absolute k is clamped to `n`; percent `p` becomes `ceil(p/100 · n)`
/// clamped to `[1, n]`.
pub fn resolve_k(spec: KSpec, response_len: usize) -> Result<usize> {
    spec.validate()?;
    if response_len == 0 {
        return Err(Error::InvalidInput("response_len must be >= 1".into()));
    }
    Ok(match spec {
        KSpec::Absolute(k) => k.min(response_len),
        KSpec::Percent(p) => {
            let raw = (p / 100.0 * response_len as f64).ceil();
            (raw as usize).clamp(1, response_len)
        }
    })
}

fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Indices in rank order (most uncertain first).
pub fn ranked_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| rank_order((a, values[a]), (b, values[b])));
    idx
}

/// The `k` highest-scoring indices, returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} outside [1, {}]",
            values.len()
        )));
    }
    let mut top = ranked_indices(values);
    top.truncate(k);
    top.sort_unstable();
    Ok(top)
}

pub fn detect_wrong_step(
    case_id: &str,
    series: &ScoreSeries,
    annotation: Option<&WrongStepAnnotation>,
    spec: KSpec,
) -> Result<DetectionOutcome> {
    let ann = annotation.ok_or_else(|| Error::MissingAnnotation(case_id.to_string()))?;
    let n = series.values.len();
    if !(ann.start < ann.end && ann.end <= n) {
        return Err(Error::InvalidInput(format!(
            "annotation [{},{}) does not fit a response of {n} tokens",
            ann.start, ann.end
        )));
    }
    let resolved_k = resolve_k(spec, n)?;
    let top = top_k_indices(&series.values, resolved_k)?;
    let span = ann.span();
    let detected = top.iter().any(|&i| span.contains(i));
    Ok(DetectionOutcome {
        case_id: case_id.to_string(),
        metric: series.metric,
        k_spec: spec,
        resolved_k,
        top_k_indices: top,
        detected,
    })
}

pub fn detection_rate(outcomes: &[DetectionOutcome]) -> Result<f64> {
    let first = outcomes
        .first()
        .ok_or_else(|| Error::InvalidInput("no detection outcomes".into()))?;
    if let Some(o) = outcomes
        .iter()
        .find(|o| o.metric != first.metric || o.k_spec != first.k_spec)
    {
        return Err(Error::MixedConfiguration(format!(
            "outcomes mix ({}, k={}) with ({}, k={})",
            first.metric, first.k_spec, o.metric, o.k_spec
        )));
    }
    let hits = outcomes.iter().filter(|o| o.detected).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

fn check_boundaries(n: usize, boundaries: &[Span]) -> Result<()> {
    if boundaries.is_empty() {
        return Err(Error::InvalidInput("no sentence boundaries".into()));
    }
    let mut cursor = 0;
    for s in boundaries {
        if s.start != cursor || s.end <= s.start {
            return Err(Error::InvalidInput(format!(
                "sentence boundaries must tile [0, {n}); interval {s} breaks at {cursor}"
            )));
        }
        cursor = s.end;
    }
    if cursor != n {
        return Err(Error::InvalidInput(format!(
            "sentence boundaries cover [0, {cursor}) but the series has {n} values"
        )));
    }
    Ok(())
}

/// Mean score inside each sentence, in boundary order.
pub fn sentence_means(series: &ScoreSeries, boundaries: &[Span]) -> Result<Vec<(Span, f64)>> {
    check_boundaries(series.values.len(), boundaries)?;
    Ok(boundaries
        .iter()
        .map(|&s| {
            let vals = &series.values[s.start..s.end];
            (s, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}

/// Sentence with the largest mean; the earliest wins ties.
pub fn most_uncertain_sentence(series: &ScoreSeries, boundaries: &[Span]) -> Result<usize> {
    let means: Vec<f64> = sentence_means(series, boundaries)?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    Ok(ranked_indices(&means)[0])
}

/// One case for the sentence-overlap protocol.
#[derive(Debug, Clone, Copy)]
pub struct SentenceCase<'a> {
    pub case_id: &'a str,
    pub series: &'a ScoreSeries,
    pub boundaries: Option<&'a [Span]>,
    pub wrong_sentence: Option<usize>,
}

/// Fraction of cases whose most uncertain sentence is the annotated one.
pub fn sentence_overlap_rate(cases: &[SentenceCase<'_>]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no cases for sentence overlap".into()));
    }
    let mut hits = 0usize;
    for c in cases {
        let b = c.boundaries.ok_or_else(|| {
            Error::InvalidInput(format!("case {} has no sentence boundaries", c.case_id))
        })?;
        let wrong = c
            .wrong_sentence
            .ok_or_else(|| Error::MissingAnnotation(c.case_id.to_string()))?;
        if most_uncertain_sentence(c.series, b)? == wrong {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

fn check_labels(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_labels(labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(((rank_sum - p * (p + 1.0) / 2.0) / (p * n)).clamp(0.0, 1.0))
}

/// Mean over positives of the precision at each positive's rank, ranking by
/// score descending with ties by original index.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check_labels(labels, scores)?;
    if pos == 0 {
        return Err(Error::DegenerateLabels("average precision needs a positive".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranked_indices(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

pub fn classification_report(labels: &[bool], scores: &[f64]) -> Result<BinaryClassificationReport> {
    let (pos, neg) = check_labels(labels, scores)?;
    Ok(BinaryClassificationReport {
        auroc: auroc(labels, scores)?,
        average_precision: average_precision(labels, scores)?,
        n_positive: pos,
        n_negative: neg,
    })
}

/// `(v - min) / (max - min)`; a constant series maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / range).clamp(0.0, 1.0))
        .collect()
}

/// Splits a response into sentences: a sentence ends after any token whose
/// display string contains a newline or ends (ignoring trailing spaces) in
/// `.`, `!` or `?`. Without display strings the whole response is one
/// sentence.
pub fn split_sentences(response: &[TokenId], vocab: &Vocabulary) -> Vec<Span> {
    let n = response.len();
    if n == 0 {
        return Vec::new();
    }
    let Some(display) = &vocab.display else {
        return vec![Span::new(0, n)];
    };
    let ends_sentence = |id: TokenId| {
        display.get(id as usize).is_some_and(|s| {
            s.contains('\n') || s.trim_end().ends_with(['.', '!', '?'])
        })
    };
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &id) in response.iter().enumerate() {
        if ends_sentence(id) {
            out.push(Span::new(start, i + 1));
            start = i + 1;
        }
    }
    if start < n {
        out.push(Span::new(start, n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(v: &[f64]) -> ScoreSeries {
        ScoreSeries::new(Metric::Nll, v.to_vec())
    }

    #[test]
    fn resolve_k_examples() {
        assert_eq!(resolve_k(KSpec::Percent(1.0), 250).unwrap(), 3);
        assert_eq!(resolve_k(KSpec::Percent(1.0), 50).unwrap(), 1);
        assert_eq!(resolve_k(KSpec::Absolute(5), 4).unwrap(), 4);
        assert_eq!(resolve_k(KSpec::Percent(100.0), 7).unwrap(), 7);
        assert!(resolve_k(KSpec::Absolute(0), 4).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.5, 0.3], 1).unwrap(), vec![1]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(top_k_indices(&[0.2, 0.1, 0.3], 3).unwrap(), vec![0, 1, 2]);
        assert!(top_k_indices(&[0.2], 2).is_err());
    }

    #[test]
    fn detection_examples() {
        let s = series(&[0.1, 0.9, 0.3, 0.2]);
        let hit = detect_wrong_step("c", &s, Some(&WrongStepAnnotation::new(1, 2)), KSpec::Absolute(1)).unwrap();
        assert!(hit.detected);
        let miss = detect_wrong_step("c", &s, Some(&WrongStepAnnotation::new(2, 4)), KSpec::Absolute(1)).unwrap();
        assert!(!miss.detected);
        assert!(matches!(
            detect_wrong_step("c", &s, None, KSpec::Absolute(1)),
            Err(Error::MissingAnnotation(_))
        ));
    }

    #[test]
    fn detection_rate_rules() {
        let s = series(&[0.1, 0.9, 0.3, 0.2]);
        let mk = |start, end, k| {
            detect_wrong_step("c", &s, Some(&WrongStepAnnotation::new(start, end)), KSpec::Absolute(k)).unwrap()
        };
        let outs = vec![mk(1, 2, 1), mk(2, 3, 1), mk(3, 4, 1), mk(0, 1, 1)];
        assert_eq!(detection_rate(&outs).unwrap(), 0.25);
        assert_eq!(detection_rate(&outs[..1]).unwrap(), 1.0);
        assert!(detection_rate(&[]).is_err());
        let mixed = vec![mk(1, 2, 1), mk(1, 2, 2)];
        assert!(matches!(detection_rate(&mixed), Err(Error::MixedConfiguration(_))));
    }

    #[test]
    fn sentence_examples() {
        let s = series(&[1.0, 3.0, 5.0, 7.0]);
        let b = [Span::new(0, 2), Span::new(2, 4)];
        let m = sentence_means(&s, &b).unwrap();
        assert_eq!(m.iter().map(|x| x.1).collect::<Vec<_>>(), vec![2.0, 6.0]);
        assert_eq!(most_uncertain_sentence(&s, &b).unwrap(), 1);
        let tie = series(&[4.0, 4.0, 4.0, 4.0]);
        assert_eq!(most_uncertain_sentence(&tie, &b).unwrap(), 0);
        assert!(sentence_means(&s, &[Span::new(0, 3)]).is_err());
        let all = sentence_means(&s, &[Span::new(0, 4)]).unwrap();
        assert_eq!(all[0].1, 4.0);
    }

    #[test]
    fn overlap_rate_examples() {
        let s = series(&[1.0, 3.0, 5.0, 7.0]);
        let b = [Span::new(0, 2), Span::new(2, 4)];
        let case = |w| SentenceCase {
            case_id: "c",
            series: &s,
            boundaries: Some(&b),
            wrong_sentence: Some(w),
        };
        assert_eq!(sentence_overlap_rate(&[case(1), case(1)]).unwrap(), 1.0);
        assert_eq!(sentence_overlap_rate(&[case(0)]).unwrap(), 0.0);
        assert_eq!(sentence_overlap_rate(&[case(1), case(0)]).unwrap(), 0.5);
        let missing = SentenceCase {
            boundaries: None,
            ..case(1)
        };
        assert!(sentence_overlap_rate(&[missing]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[true, true, false, false], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[true, false], &[0.4, 0.6]).unwrap(), 0.0);
        let v = auroc(&[true, false, true, false], &[0.9, 0.9, 0.2, 0.1]).unwrap();
        assert!((v - 0.625).abs() < 1e-12);
        assert!(matches!(auroc(&[true, true], &[0.1, 0.2]), Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true, false], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        let v = average_precision(&[true, false, true], &[0.9, 0.8, 0.7]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let v = average_precision(&[false, false, false, true], &[0.9, 0.8, 0.7, 0.1]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
        assert!(average_precision(&[false, false], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[3.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn splitter_breaks_on_punctuation_and_newlines() {
        let vocab = Vocabulary::with_display(
            ["a", "b", ".", "\n", "c?"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let spans = split_sentences(&[0, 1, 2, 0, 3, 4, 0], &vocab);
        assert_eq!(
            spans,
            vec![Span::new(0, 3), Span::new(3, 5), Span::new(5, 6), Span::new(6, 7)]
        );
        let bare = Vocabulary::new(5).unwrap();
        assert_eq!(split_sentences(&[0, 2, 1], &bare), vec![Span::new(0, 3)]);
    }
}
