//! Domain types shared by every module.
//!
//! Response-token indices are 0-based and relative to the first generated
//! token: index 0 is the first response token, which sits at row
//! `query_len` of the full sequence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocabulary size must be >= 2, got {size}"
            )));
        }
        Ok(Self {
            size,
            display: None,
        })
    }

    pub fn with_display(display: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new(display.len())?;
        vocab.display = Some(display);
        Ok(vocab)
    }

    /// Display string for a token, falling back to `<id>`.
    pub fn token_str(&self, id: TokenId) -> String {
        self.display
            .as_ref()
            .and_then(|d| d.get(id as usize).cloned())
            .unwrap_or_else(|| format!("<{id}>"))
    }
}

/// Half-open interval `[start, end)` of response-token indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// Query followed by response, as one id list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    query_len: usize,
    response_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, query_len: usize) -> Result<Self> {
        if query_len == 0 {
            return Err(Error::InvalidInput("query_len must be >= 1".into()));
        }
        if ids.len() <= query_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} ids leaves no response after a query of {query_len}",
                ids.len()
            )));
        }
        let response_len = ids.len() - query_len;
        Ok(Self {
            ids,
            query_len,
            response_len,
        })
    }

    /// Builds a sequence without checking the length relation; used by
    /// ingestion so `validate_case` can report the problem instead.
    pub fn from_parts_unchecked(ids: Vec<TokenId>, query_len: usize, response_len: usize) -> Self {
        Self {
            ids,
            query_len,
            response_len,
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn query(&self) -> &[TokenId] {
        &self.ids[..self.query_len.min(self.ids.len())]
    }

    pub fn response(&self) -> &[TokenId] {
        &self.ids[self.query_len.min(self.ids.len())..]
    }

    /// Full-sequence row index of response token `j`.
    pub fn response_row(&self, j: usize) -> usize {
        self.query_len + j
    }

    /// Sequence truncated to the first `keep` response tokens.
    pub fn truncate_response(&self, keep: usize) -> Result<Self> {
        if keep == 0 || keep > self.response_len {
            return Err(Error::InvalidInput(format!(
                "cannot keep {keep} of {} response tokens",
                self.response_len
            )));
        }
        Self::new(self.ids[..self.query_len + keep].to_vec(), self.query_len)
    }

    pub(crate) fn check_shape(&self) -> Result<()> {
        if self.query_len == 0
            || self.response_len == 0
            || self.ids.len() != self.query_len + self.response_len
        {
            return Err(Error::ShapeMismatch(format!(
                "token sequence has {} ids but query_len {} + response_len {}",
                self.ids.len(),
                self.query_len,
                self.response_len
            )));
        }
        Ok(())
    }
}

/// Row-major `(m+n) x d` matrix of per-token input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("embedding dim must be >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} entries cannot form a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite embedding entry at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("rows have differing dimensions".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view. Callers are responsible for keeping entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `d objective / d h_i` for every row of an [`EmbeddingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl GradientMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} entries cannot form a {rows}x{dim} gradient",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    Random,
    AdvL2,
    AdvLinf,
}

impl PerturbationMode {
    pub fn is_adversarial(self) -> bool {
        !matches!(self, PerturbationMode::Random)
    }
}

/// Number of noise draws, noise scale and adversarial step for the
/// perturbation metrics. Defaults: 20 draws, sigma 1e-3, alpha 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub sigma: f64,
    pub num_samples: usize,
    pub alpha: f64,
    pub mode: PerturbationMode,
    pub seed: u64,
    #[serde(default)]
    pub normalize_gradient: bool,
    /// Restrict random noise to response rows (ablation only).
    #[serde(default)]
    pub noise_response_only: bool,
}

pub const DEFAULT_NUM_SAMPLES: usize = 20;
pub const DEFAULT_SIGMA: f64 = 1e-3;
pub const DEFAULT_ALPHA: f64 = 1e-4;

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            num_samples: DEFAULT_NUM_SAMPLES,
            alpha: DEFAULT_ALPHA,
            mode: PerturbationMode::Random,
            seed: 0,
            normalize_gradient: false,
            noise_response_only: false,
        }
    }
}

impl PerturbationConfig {
    pub fn with_mode(&self, mode: PerturbationMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.mode == PerturbationMode::Random && self.num_samples < 2 {
            return Err(Error::InvalidConfig(format!(
                "random perturbation needs num_samples >= 2, got {}",
                self.num_samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub strategy: DecodeStrategy,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_new_tokens: 32,
            strategy: DecodeStrategy::Greedy,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if self.strategy == DecodeStrategy::Sample
            && !(self.temperature > 0.0 && self.temperature.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nll,
    Entropy,
    RandPert,
    AdvL2Pert,
    AdvLinfPert,
    /// Variance of the log-probability instead of the probability. Not part
    /// of the default metric set.
    RandPertLog,
    External,
}

impl Metric {
    /// The five default scores, in report order.
    pub const DEFAULTS: [Metric; 5] = [
        Metric::Nll,
        Metric::Entropy,
        Metric::RandPert,
        Metric::AdvL2Pert,
        Metric::AdvLinfPert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Nll => "nll",
            Metric::Entropy => "entropy",
            Metric::RandPert => "rand_pert",
            Metric::AdvL2Pert => "adv_l2_pert",
            Metric::AdvLinfPert => "adv_linf_pert",
            Metric::RandPertLog => "rand_pert_log",
            Metric::External => "external",
        }
    }

    /// Metrics that need embeddings (and, for adversarial ones, gradients).
    pub fn requires_white_box(self) -> bool {
        matches!(
            self,
            Metric::RandPert | Metric::RandPertLog | Metric::AdvL2Pert | Metric::AdvLinfPert
        )
    }

    pub fn perturbation_mode(self) -> Option<PerturbationMode> {
        match self {
            Metric::RandPert | Metric::RandPertLog => Some(PerturbationMode::Random),
            Metric::AdvL2Pert => Some(PerturbationMode::AdvL2),
            Metric::AdvLinfPert => Some(PerturbationMode::AdvLinf),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nll" => Metric::Nll,
            "entropy" => Metric::Entropy,
            "rand_pert" => Metric::RandPert,
            "adv_l2_pert" => Metric::AdvL2Pert,
            "adv_linf_pert" => Metric::AdvLinfPert,
            "rand_pert_log" => Metric::RandPertLog,
            "external" => Metric::External,
            other => return Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        })
    }
}

/// One score per response token. Larger means more uncertain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub metric: Metric,
    pub values: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(metric: Metric, values: Vec<f64>) -> Self {
        Self { metric, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrongStepAnnotation {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl WrongStepAnnotation {
    pub fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            sentence_index: None,
            source: None,
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

/// Either an absolute k or a percentage of the response length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KSpec {
    Absolute(usize),
    Percent(f64),
}

impl KSpec {
    pub fn defaults() -> Vec<KSpec> {
        vec![KSpec::Absolute(3), KSpec::Absolute(5), KSpec::Percent(1.0)]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KSpec::Absolute(0) => Err(Error::InvalidInput("k must be >= 1".into())),
            KSpec::Percent(p) if !(p > 0.0 && p <= 100.0) => Err(Error::InvalidInput(format!(
                "percent k must lie in (0, 100], got {p}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Absolute(k) => write!(f, "{k}"),
            KSpec::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = if let Some(p) = s.strip_suffix('%') {
            KSpec::Percent(
                p.trim()
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad percent k {s:?}")))?,
            )
        } else {
            KSpec::Absolute(
                s.parse()
                    .map_err(|_| Error::InvalidInput(format!("bad k {s:?}")))?,
            )
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for KSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningCase {
    pub case_id: String,
    pub tokens: TokenSequence,
    pub annotation: Option<WrongStepAnnotation>,
    pub final_answer_correct: Option<bool>,
    pub sentence_boundaries: Option<Vec<Span>>,
    /// Display text and any fields this crate does not interpret; carried
    /// through load/save untouched.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ReasoningCase {
    pub fn new(case_id: impl Into<String>, tokens: TokenSequence) -> Self {
        Self {
            case_id: case_id.into(),
            tokens,
            annotation: None,
            final_answer_correct: None,
            sentence_boundaries: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn response_len(&self) -> usize {
        self.tokens.response_len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every case invariant; returns one entry per broken rule.
pub fn validate_case(case: &ReasoningCase, vocab: &Vocabulary) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &'static str, rule: String| out.push(Violation { field, rule });

    if case.case_id.is_empty() {
        push("case_id", "must be non-empty".into());
    }
    if vocab.size < 2 {
        push("vocabulary", format!("size {} must be >= 2", vocab.size));
    }
    let t = &case.tokens;
    if t.query_len() == 0 {
        push("query_len", "must be >= 1".into());
    }
    if t.response_len() == 0 {
        push("response_len", "must be >= 1".into());
    }
    if t.ids().len() != t.query_len() + t.response_len() {
        push(
            "ids",
            format!(
                "length {} != query_len {} + response_len {}",
                t.ids().len(),
                t.query_len(),
                t.response_len()
            ),
        );
    }
    if let Some((pos, id)) = t
        .ids()
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= vocab.size)
    {
        push(
            "ids",
            format!("id {id} at position {pos} is >= vocabulary size {}", vocab.size),
        );
    }

    let n = t.response_len();
    if let Some(a) = &case.annotation {
        if !(a.start < a.end && a.end <= n) {
            push(
                "annotation.token_range",
                format!("[{},{}) must satisfy 0 <= start < end <= {n}", a.start, a.end),
            );
        }
        if let (Some(idx), Some(b)) = (a.sentence_index, &case.sentence_boundaries) {
            if idx >= b.len() {
                push(
                    "annotation.sentence_index",
                    format!("{idx} out of range for {} sentences", b.len()),
                );
            }
        }
    }

    if let Some(bounds) = &case.sentence_boundaries {
        let mut cursor = 0usize;
        for (i, s) in bounds.iter().enumerate() {
            if s.start >= s.end {
                push("sentence_boundaries", format!("interval {i} {s} is empty"));
            }
            if s.start > cursor {
                push(
                    "sentence_boundaries",
                    format!("coverage gap at index {cursor} before interval {i} {s}"),
                );
            } else if s.start < cursor {
                push(
                    "sentence_boundaries",
                    format!("interval {i} {s} overlaps or is out of order"),
                );
            }
            cursor = cursor.max(s.end);
        }
        if cursor != n {
            push(
                "sentence_boundaries",
                format!("union ends at {cursor}, expected response_len {n}"),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(m: usize, n: usize) -> ReasoningCase {
        let ids = (0..(m + n) as u32).map(|i| i % 4).collect();
        ReasoningCase::new("c", TokenSequence::new(ids, m).unwrap())
    }

    #[test]
    fn valid_case_has_no_violations() {
        let vocab = Vocabulary::new(10).unwrap();
        assert!(validate_case(&case(3, 5), &vocab).is_empty());
    }

    #[test]
    fn annotation_past_response_is_reported() {
        let vocab = Vocabulary::new(10).unwrap();
        let mut c = case(3, 5);
        c.annotation = Some(WrongStepAnnotation::new(2, 7));
        let v = validate_case(&c, &vocab);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "annotation.token_range");
    }

    #[test]
    fn boundary_gap_is_reported() {
        let vocab = Vocabulary::new(10).unwrap();
        let mut c = case(3, 5);
        c.sentence_boundaries = Some(vec![Span::new(0, 2), Span::new(3, 5)]);
        let v = validate_case(&c, &vocab);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].rule.contains("gap at index 2"));
    }

    #[test]
    fn out_of_range_id_and_length_mismatch() {
        let vocab = Vocabulary::new(3).unwrap();
        let c = ReasoningCase::new(
            "bad",
            TokenSequence::from_parts_unchecked(vec![0, 1, 7], 1, 5),
        );
        let v = validate_case(&c, &vocab);
        assert!(v.iter().any(|v| v.field == "ids" && v.rule.contains("length")));
        assert!(v.iter().any(|v| v.field == "ids" && v.rule.contains("id 7")));
    }

    #[test]
    fn kspec_parse() {
        assert_eq!("3".parse::<KSpec>().unwrap(), KSpec::Absolute(3));
        assert_eq!("1%".parse::<KSpec>().unwrap(), KSpec::Percent(1.0));
        assert!("0".parse::<KSpec>().is_err());
        assert!("150%".parse::<KSpec>().is_err());
    }

    #[test]
    fn perturbation_config_rules() {
        let mut cfg = PerturbationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.num_samples = 1;
        assert!(cfg.validate().is_err());
        cfg.mode = PerturbationMode::AdvL2;
        assert!(cfg.validate().is_ok());
        cfg.alpha = -1.0;
        assert!(cfg.validate().is_err());
    }
}
