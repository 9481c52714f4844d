//! Corpus-level operations behind the CLI subcommands. Each takes in-memory
//! inputs and returns records; `main.rs` only handles paths and printing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Tier, TraceSet};
use crate::error::{Error, Result};
use crate::eval::{
    classification_report, detect_wrong_step, detection_rate, min_max_normalize,
    sentence_overlap_rate, split_sentences, BinaryClassificationReport, DetectionOutcome,
    SentenceCase,
};
use crate::io::{ScoreRecord, Timing, FORMAT_VERSION};
use crate::metrics::{
    entropy_from_trace, nll_from_trace, response_average_score, score_white_box,
};
use crate::types::{
    KSpec, Metric, PerturbationConfig, ReasoningCase, ScoreSeries, Span, Vocabulary,
    DEFAULT_ALPHA, DEFAULT_NUM_SAMPLES, DEFAULT_SIGMA,
};

/// Where token scores come from.
#[derive(Clone)]
pub enum ScoringSource {
    WhiteBox {
        name: String,
        backend: Arc<dyn Backend>,
    },
    Trace(Arc<TraceSet>),
}

impl ScoringSource {
    pub fn white_box(name: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        ScoringSource::WhiteBox {
            name: name.into(),
            backend,
        }
    }

    pub fn tier(&self) -> Tier {
        match self {
            ScoringSource::WhiteBox { backend, .. } => backend.capabilities().tier,
            ScoringSource::Trace(_) => Tier::TraceOnly,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ScoringSource::WhiteBox { name, .. } => name,
            ScoringSource::Trace(_) => "trace",
        }
    }

    /// Rejects any metric the tier cannot provide, naming the metric.
    pub fn check_metrics(&self, metrics: &[Metric]) -> Result<()> {
        let tier = self.tier();
        for &m in metrics {
            if m == Metric::External {
                return Err(Error::InvalidInput(
                    "external scores are ingested, not computed".into(),
                ));
            }
            if m.requires_white_box() && tier != Tier::WhiteBox {
                return Err(Error::unsupported(m.as_str(), tier));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub metrics: Vec<Metric>,
    pub config: PerturbationConfig,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            metrics: Metric::DEFAULTS.to_vec(),
            config: PerturbationConfig::default(),
            workers: None,
        }
    }
}

fn score_one(case: &ReasoningCase, source: &ScoringSource, metric: Metric, cfg: &PerturbationConfig) -> Result<ScoreRecord> {
    let started = Instant::now();
    let mut record = ScoreRecord {
        format_version: FORMAT_VERSION,
        case_id: case.case_id.clone(),
        metric,
        values: Vec::new(),
        backend: source.name().to_string(),
        config: None,
        objective_before: None,
        objective_after: None,
        timing: None,
    };
    match source {
        ScoringSource::WhiteBox { backend, .. } => {
            let out = score_white_box(backend.as_ref(), &case.tokens, &case.case_id, metric, cfg)?;
            if let Some(mode) = metric.perturbation_mode() {
                record.config = Some(cfg.with_mode(mode));
            }
            if metric.perturbation_mode().is_some_and(|m| m.is_adversarial()) {
                record.objective_before = Some(out.objective_before);
                record.objective_after = Some(out.objective_after);
            }
            record.values = out.score_series.values;
        }
        ScoringSource::Trace(traces) => {
            let trace = traces.get(&case.case_id)?;
            trace.validate(case.response_len())?;
            record.values = match metric {
                Metric::Nll => nll_from_trace(trace).values,
                Metric::Entropy => entropy_from_trace(trace)?.values,
                other => return Err(Error::unsupported(other.as_str(), Tier::TraceOnly)),
            };
        }
    }
    record.timing = Some(Timing {
        duration_secs: started.elapsed().as_secs_f64(),
    });
    Ok(record)
}

fn run_with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// One record per `(case, metric)`, case-major in input order regardless of
/// how the work was scheduled.
pub fn score_cases(cases: &[ReasoningCase], source: &ScoringSource, opts: &ScoreOptions) -> Result<Vec<ScoreRecord>> {
    source.check_metrics(&opts.metrics)?;
    opts.config.validate()?;
    let per_case: Vec<Result<Vec<ScoreRecord>>> = run_with_workers(opts.workers, || {
        cases
            .par_iter()
            .map(|case| {
                opts.metrics
                    .iter()
                    .map(|&m| score_one(case, source, m, &opts.config))
                    .collect()
            })
            .collect()
    })?;
    let mut out = Vec::with_capacity(cases.len() * opts.metrics.len());
    for r in per_case {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct DetectOptions {
    /// Empty means `{3, 5, 1%}`.
    pub k_specs: Vec<KSpec>,
    /// Also evaluate cases not marked as having an incorrect final answer.
    pub include_all: bool,
    /// Used to split sentences for cases without stored boundaries.
    pub vocab: Option<Vocabulary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRateRow {
    pub metric: Metric,
    pub k: KSpec,
    pub rate: f64,
    pub n_cases: usize,
    pub n_detected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceOverlapRow {
    pub metric: Metric,
    pub rate: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionReport {
    pub rates: Vec<DetectionRateRow>,
    pub outcomes: Vec<DetectionOutcome>,
    pub sentence_overlap: Vec<SentenceOverlapRow>,
    /// Eligible cases skipped for lacking an annotation.
    pub unannotated: usize,
    /// Cases skipped because the final answer was not marked incorrect.
    pub not_incorrect: usize,
}

/// Report records as written to the report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportRecord {
    DetectionRate {
        format_version: u32,
        #[serde(flatten)]
        row: DetectionRateRow,
    },
    DetectionOutcome {
        format_version: u32,
        #[serde(flatten)]
        outcome: DetectionOutcome,
    },
    SentenceOverlap {
        format_version: u32,
        #[serde(flatten)]
        row: SentenceOverlapRow,
    },
    Tally {
        format_version: u32,
        unannotated: usize,
        not_incorrect: usize,
    },
    Correctness {
        format_version: u32,
        metric: Metric,
        #[serde(flatten)]
        report: BinaryClassificationReport,
    },
}

impl DetectionReport {
    pub fn records(&self) -> Vec<ReportRecord> {
        let v = FORMAT_VERSION;
        let mut out: Vec<ReportRecord> = self
            .rates
            .iter()
            .map(|row| ReportRecord::DetectionRate {
                format_version: v,
                row: row.clone(),
            })
            .collect();
        out.extend(self.sentence_overlap.iter().map(|row| ReportRecord::SentenceOverlap {
            format_version: v,
            row: row.clone(),
        }));
        out.push(ReportRecord::Tally {
            format_version: v,
            unannotated: self.unannotated,
            not_incorrect: self.not_incorrect,
        });
        out.extend(self.outcomes.iter().map(|o| ReportRecord::DetectionOutcome {
            format_version: v,
            outcome: o.clone(),
        }));
        out
    }

    /// Aligned text table: one row per metric, one column per k.
    pub fn table(&self) -> String {
        let mut ks: Vec<KSpec> = Vec::new();
        let mut metrics: Vec<Metric> = Vec::new();
        for r in &self.rates {
            if !ks.contains(&r.k) {
                ks.push(r.k);
            }
            if !metrics.contains(&r.metric) {
                metrics.push(r.metric);
            }
        }
        let header = |k: &KSpec| match k {
            KSpec::Absolute(k) => format!("top{k}"),
            KSpec::Percent(p) => format!("{p}%"),
        };
        let mut s = String::new();
        let _ = write!(s, "{:<16}", "metric");
        for k in &ks {
            let _ = write!(s, "{:>10}", header(k));
        }
        s.push('\n');
        for m in &metrics {
            let _ = write!(s, "{:<16}", m.as_str());
            for k in &ks {
                match self.rates.iter().find(|r| r.metric == *m && r.k == *k) {
                    Some(r) => {
                        let _ = write!(s, "{:>10.3}", r.rate);
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        let n = self.rates.first().map_or(0, |r| r.n_cases);
        let _ = writeln!(
            s,
            "cases: {n} evaluated, {} unannotated, {} not marked incorrect",
            self.unannotated, self.not_incorrect
        );
        s
    }
}

/// Scores grouped by metric (first-appearance order), each keyed by case id.
fn index_scores<'a>(scores: &'a [ScoreRecord], cases: &[ReasoningCase]) -> Result<Vec<(Metric, HashMap<&'a str, &'a ScoreRecord>)>> {
    let known: HashSet<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
    let unknown: Vec<&str> = scores
        .iter()
        .map(|r| r.case_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Join(format!(
            "score records for unknown cases: {}",
            unknown.join(", ")
        )));
    }
    let mut by_metric: Vec<(Metric, HashMap<&str, &ScoreRecord>)> = Vec::new();
    for r in scores {
        let slot = match by_metric.iter().position(|(m, _)| *m == r.metric) {
            Some(i) => i,
            None => {
                by_metric.push((r.metric, HashMap::new()));
                by_metric.len() - 1
            }
        };
        by_metric[slot].1.insert(r.case_id.as_str(), r);
    }
    Ok(by_metric)
}

fn lookup<'a>(index: &HashMap<&str, &'a ScoreRecord>, metric: Metric, case: &ReasoningCase) -> Result<&'a ScoreRecord> {
    let r = index.get(case.case_id.as_str()).ok_or_else(|| {
        Error::Join(format!("no {metric} scores for case {}", case.case_id))
    })?;
    if r.values.len() != case.response_len() {
        return Err(Error::Join(format!(
            "{metric} scores for case {} have {} values, response_len is {}",
            case.case_id,
            r.values.len(),
            case.response_len()
        )));
    }
    Ok(r)
}

fn case_sentences(case: &ReasoningCase, vocab: Option<&Vocabulary>) -> Option<Vec<Span>> {
    case.sentence_boundaries.clone().or_else(|| {
        vocab
            .filter(|v| v.display.is_some())
            .map(|v| split_sentences(case.tokens.response(), v))
    })
}

/// Wrong sentence from the annotation, or the sentence holding its first token.
fn wrong_sentence(case: &ReasoningCase, sentences: &[Span]) -> Option<usize> {
    let ann = case.annotation.as_ref()?;
    ann.sentence_index
        .or_else(|| sentences.iter().position(|s| s.contains(ann.start)))
}

pub fn eval_detect(scores: &[ScoreRecord], cases: &[ReasoningCase], opts: &DetectOptions) -> Result<DetectionReport> {
    let k_specs = if opts.k_specs.is_empty() {
        KSpec::defaults()
    } else {
        opts.k_specs.clone()
    };
    let index = index_scores(scores, cases)?;
    let mut report = DetectionReport::default();
    let mut eligible = Vec::new();
    for c in cases {
        if !opts.include_all && c.final_answer_correct != Some(false) {
            report.not_incorrect += 1;
        } else if c.annotation.is_none() {
            report.unannotated += 1;
        } else {
            eligible.push(c);
        }
    }

    for (metric, by_case) in &index {
        let mut series = Vec::with_capacity(eligible.len());
        for c in &eligible {
            let r = lookup(by_case, *metric, c)?;
            series.push(ScoreSeries::new(*metric, r.values.clone()));
        }
        for &k in &k_specs {
            let outcomes: Vec<DetectionOutcome> = eligible
                .iter()
                .zip(&series)
                .map(|(c, s)| detect_wrong_step(&c.case_id, s, c.annotation.as_ref(), k))
                .collect::<Result<_>>()?;
            if outcomes.is_empty() {
                continue;
            }
            let n_detected = outcomes.iter().filter(|o| o.detected).count();
            report.rates.push(DetectionRateRow {
                metric: *metric,
                k,
                rate: detection_rate(&outcomes)?,
                n_cases: outcomes.len(),
                n_detected,
            });
            report.outcomes.extend(outcomes);
        }

        let sentences: Vec<(usize, Vec<Span>, usize)> = eligible
            .iter()
            .enumerate()
            .filter_map(|(i, c)| {
                let b = case_sentences(c, opts.vocab.as_ref())?;
                let w = wrong_sentence(c, &b)?;
                Some((i, b, w))
            })
            .collect();
        if !sentences.is_empty() {
            let inputs: Vec<SentenceCase<'_>> = sentences
                .iter()
                .map(|(i, b, w)| SentenceCase {
                    case_id: &eligible[*i].case_id,
                    series: &series[*i],
                    boundaries: Some(b),
                    wrong_sentence: Some(*w),
                })
                .collect();
            report.sentence_overlap.push(SentenceOverlapRow {
                metric: *metric,
                rate: sentence_overlap_rate(&inputs)?,
                n_cases: inputs.len(),
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRow {
    pub metric: Metric,
    pub report: BinaryClassificationReport,
}

/// Response-mean score per case as a detector of incorrect final answers
/// (label true = incorrect). Cases without a correctness label are ignored.
pub fn eval_correctness(scores: &[ScoreRecord], cases: &[ReasoningCase]) -> Result<Vec<CorrectnessRow>> {
    let index = index_scores(scores, cases)?;
    let labelled: Vec<&ReasoningCase> = cases
        .iter()
        .filter(|c| c.final_answer_correct.is_some())
        .collect();
    let labels: Vec<bool> = labelled
        .iter()
        .map(|c| c.final_answer_correct == Some(false))
        .collect();
    let mut out = Vec::new();
    for (metric, by_case) in &index {
        let means: Vec<f64> = labelled
            .iter()
            .map(|c| {
                let r = lookup(by_case, *metric, c)?;
                response_average_score(&ScoreSeries::new(*metric, r.values.clone()))
            })
            .collect::<Result<_>>()?;
        out.push(CorrectnessRow {
            metric: *metric,
            report: classification_report(&labels, &means)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub sigma_values: Vec<f64>,
    pub num_samples_values: Vec<usize>,
    pub alpha_values: Vec<f64>,
    pub metrics: Vec<Metric>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            sigma_values: vec![1e-4, 1e-3, 1e-2],
            num_samples_values: vec![5, 10, 20],
            alpha_values: vec![1e-5, 1e-4, 1e-3],
            metrics: vec![Metric::RandPert, Metric::AdvL2Pert, Metric::AdvLinfPert],
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_values.is_empty()
            || self.num_samples_values.is_empty()
            || self.alpha_values.is_empty()
            || self.metrics.is_empty()
        {
            return Err(Error::InvalidConfig("ablation grid axes must be non-empty".into()));
        }
        if let Some(m) = self.metrics.iter().find(|m| m.perturbation_mode().is_none()) {
            return Err(Error::InvalidConfig(format!(
                "{m} has no perturbation hyperparameters to sweep"
            )));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.sigma_values.len() * self.num_samples_values.len() * self.alpha_values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub format_version: u32,
    pub metric: Metric,
    pub sigma: f64,
    pub num_samples: usize,
    pub alpha: f64,
    pub k: KSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub n_cases: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Key of the hyperparameters a metric actually depends on.
fn relevant_key(metric: Metric, cfg: &PerturbationConfig) -> (Metric, u64, usize, u64) {
    if metric.perturbation_mode().is_some_and(|m| m.is_adversarial()) {
        (metric, 0, 0, cfg.alpha.to_bits())
    } else {
        (metric, cfg.sigma.to_bits(), cfg.num_samples, 0)
    }
}

/// Detection rates over the full cartesian grid, one row per
/// `(grid point, metric, k)`. A failing grid point is reported in its row
/// and the sweep continues.
pub fn ablate(
    cases: &[ReasoningCase],
    source: &ScoringSource,
    grid: &AblationGrid,
    base: &PerturbationConfig,
    detect: &DetectOptions,
    workers: Option<usize>,
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    source.check_metrics(&grid.metrics)?;
    let k_specs = if detect.k_specs.is_empty() {
        KSpec::defaults()
    } else {
        detect.k_specs.clone()
    };
    let mut cache: BTreeMap<(Metric, u64, usize, u64), std::result::Result<DetectionReport, String>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(grid.num_points() * grid.metrics.len() * k_specs.len());
    for &sigma in &grid.sigma_values {
        for &num_samples in &grid.num_samples_values {
            for &alpha in &grid.alpha_values {
                let cfg = PerturbationConfig {
                    sigma,
                    num_samples,
                    alpha,
                    ..base.clone()
                };
                for &metric in &grid.metrics {
                    let key = relevant_key(metric, &cfg);
                    let result = cache.entry(key).or_insert_with(|| {
                        let opts = ScoreOptions {
                            metrics: vec![metric],
                            config: cfg.clone(),
                            workers,
                        };
                        score_cases(cases, source, &opts)
                            .and_then(|scores| eval_detect(&scores, cases, detect))
                            .map_err(|e| e.to_string())
                    });
                    for &k in &k_specs {
                        let (rate, n_cases, error) = match result {
                            Ok(rep) => match rep.rates.iter().find(|r| r.k == k) {
                                Some(r) => (Some(r.rate), r.n_cases, None),
                                None => (None, 0, Some("no eligible cases".to_string())),
                            },
                            Err(e) => (None, 0, Some(e.clone())),
                        };
                        rows.push(AblationRow {
                            format_version: FORMAT_VERSION,
                            metric,
                            sigma,
                            num_samples,
                            alpha,
                            k,
                            rate,
                            n_cases,
                            error,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub metric: Metric,
    pub count: usize,
    pub mean_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    pub total_secs: f64,
}

/// Per-metric wall-clock statistics over records that carry timing.
pub fn timing_report(scores: &[ScoreRecord]) -> Vec<TimingRow> {
    let mut rows: Vec<TimingRow> = Vec::new();
    for r in scores {
        let Some(t) = r.timing else { continue };
        let d = t.duration_secs;
        match rows.iter_mut().find(|row| row.metric == r.metric) {
            Some(row) => {
                row.count += 1;
                row.total_secs += d;
                row.min_secs = row.min_secs.min(d);
                row.max_secs = row.max_secs.max(d);
            }
            None => rows.push(TimingRow {
                metric: r.metric,
                count: 1,
                mean_secs: 0.0,
                min_secs: d,
                max_secs: d,
                total_secs: d,
            }),
        }
    }
    for row in &mut rows {
        row.mean_secs = row.total_secs / row.count as f64;
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub case_id: String,
    pub metric: Metric,
    pub token_index: usize,
    pub token: String,
    pub value: f64,
}

/// Min-max normalised per-token scores of one case, every metric present.
pub fn plot_data(scores: &[ScoreRecord], case_id: &str, case: Option<&ReasoningCase>, vocab: Option<&Vocabulary>) -> Result<Vec<PlotRow>> {
    let records: Vec<&ScoreRecord> = scores.iter().filter(|r| r.case_id == case_id).collect();
    if records.is_empty() {
        return Err(Error::UnknownCase(case_id.to_string()));
    }
    let token_str = |j: usize| -> String {
        match (case, vocab) {
            (Some(c), Some(v)) => c
                .tokens
                .response()
                .get(j)
                .map(|&id| v.token_str(id))
                .unwrap_or_default(),
            (Some(c), None) => c
                .tokens
                .response()
                .get(j)
                .map(|id| id.to_string())
                .unwrap_or_default(),
            _ => String::new(),
        }
    };
    let mut out = Vec::new();
    for r in records {
        for (j, v) in min_max_normalize(&r.values).into_iter().enumerate() {
            out.push(PlotRow {
                case_id: case_id.to_string(),
                metric: r.metric,
                token_index: j,
                token: token_str(j),
                value: v,
            });
        }
    }
    Ok(out)
}

/// Defaults the CLI starts from; dumped by `tokuq config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultsDump {
    pub perturbation: PerturbationConfig,
    pub metrics: Vec<Metric>,
    pub k_specs: Vec<KSpec>,
    pub ablation: AblationGrid,
}

impl Default for DefaultsDump {
    fn default() -> Self {
        debug_assert_eq!(PerturbationConfig::default().num_samples, DEFAULT_NUM_SAMPLES);
        debug_assert_eq!(PerturbationConfig::default().sigma, DEFAULT_SIGMA);
        debug_assert_eq!(PerturbationConfig::default().alpha, DEFAULT_ALPHA);
        Self {
            perturbation: PerturbationConfig::default(),
            metrics: Metric::DEFAULTS.to_vec(),
            k_specs: KSpec::defaults(),
            ablation: AblationGrid::default(),
        }
    }
}
