//! Line-delimited JSON files: cases, traces, scores and reports.
//!
//! Every record carries `format_version`. Floats are written with
//! shortest round-trip formatting so a load/save cycle is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::TraceRecord;
use crate::error::{Error, Result};
use crate::types::{
    validate_case, Metric, PerturbationConfig, ReasoningCase, Span, TokenId, TokenSequence,
    Vocabulary, WrongStepAnnotation,
};

pub const FORMAT_VERSION: u32 = 1;

fn format_version() -> u32 {
    FORMAT_VERSION
}

/// File form of a [`ReasoningCase`]. Unknown fields land in `extra` and are
/// written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    #[serde(default = "format_version")]
    pub format_version: u32,
    pub case_id: String,
    pub ids: Vec<TokenId>,
    pub query_len: usize,
    pub response_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<WrongStepAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_boundaries: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer_correct: Option<bool>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl From<&ReasoningCase> for CaseRecord {
    fn from(c: &ReasoningCase) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            case_id: c.case_id.clone(),
            ids: c.tokens.ids().to_vec(),
            query_len: c.tokens.query_len(),
            response_len: c.tokens.response_len(),
            annotation: c.annotation.clone(),
            sentence_boundaries: c.sentence_boundaries.clone(),
            final_answer_correct: c.final_answer_correct,
            extra: c.extra.clone(),
        }
    }
}

impl From<CaseRecord> for ReasoningCase {
    fn from(r: CaseRecord) -> Self {
        ReasoningCase {
            case_id: r.case_id,
            tokens: TokenSequence::from_parts_unchecked(r.ids, r.query_len, r.response_len),
            annotation: r.annotation,
            final_answer_correct: r.final_answer_correct,
            sentence_boundaries: r.sentence_boundaries,
            extra: r.extra,
        }
    }
}

/// Parses every non-blank line of `path` as `T`, keeping 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCases {
    pub cases: Vec<ReasoningCase>,
    /// `(line, reason)` for records dropped under `skip_invalid`.
    pub skipped: Vec<(usize, String)>,
}

/// Loads and validates a case file. Without a vocabulary, token ids are not
/// range-checked. Invalid records abort the load unless `skip_invalid`.
pub fn load_cases(path: &Path, vocab: Option<&Vocabulary>, skip_invalid: bool) -> Result<LoadedCases> {
    let unbounded = Vocabulary {
        size: usize::MAX,
        display: None,
    };
    let vocab = vocab.unwrap_or(&unbounded);
    let mut out = LoadedCases::default();
    for (line, rec) in read_jsonl::<CaseRecord>(path)? {
        let case = ReasoningCase::from(rec);
        let violations = validate_case(&case, vocab);
        if violations.is_empty() {
            out.cases.push(case);
            continue;
        }
        let rule = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        if !skip_invalid {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line,
                rule,
            });
        }
        out.skipped.push((line, rule));
    }
    Ok(out)
}

pub fn save_cases(path: &Path, cases: &[ReasoningCase]) -> Result<()> {
    let records: Vec<CaseRecord> = cases.iter().map(CaseRecord::from).collect();
    write_jsonl(path, &records)
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let vocab: Vocabulary = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if vocab.size < 2 {
        return Err(Error::InvalidInput("vocabulary size must be >= 2".into()));
    }
    if let Some(d) = &vocab.display {
        if d.len() != vocab.size {
            return Err(Error::InvalidInput(format!(
                "vocabulary declares size {} but has {} display strings",
                vocab.size,
                d.len()
            )));
        }
    }
    Ok(vocab)
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, vocab)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub duration_secs: f64,
}

/// One `(case, metric)` score series. Everything except `timing` is
/// deterministic for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(default = "format_version")]
    pub format_version: u32,
    pub case_id: String,
    pub metric: Metric,
    pub values: Vec<f64>,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PerturbationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl ScoreRecord {
    /// The record serialised without its timing field.
    pub fn payload_json(&self) -> String {
        let stripped = ScoreRecord {
            timing: None,
            ..self.clone()
        };
        serde_json::to_string(&stripped).expect("score records always serialise")
    }
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Maps a character span onto the tokens it overlaps. `offsets[j]` is the
/// `[start, end)` character range of response token `j`.
pub fn annotation_from_char_span(offsets: &[(usize, usize)], char_start: usize, char_end: usize) -> Result<WrongStepAnnotation> {
    if char_end <= char_start {
        return Err(Error::InvalidInput(format!(
            "empty character span [{char_start},{char_end})"
        )));
    }
    let hits: Vec<usize> = offsets
        .iter()
        .enumerate()
        .filter(|(_, &(s, e))| s < char_end && char_start < e)
        .map(|(j, _)| j)
        .collect();
    match (hits.first(), hits.last()) {
        (Some(&first), Some(&last)) => Ok(WrongStepAnnotation::new(first, last + 1)),
        _ => Err(Error::InvalidInput(format!(
            "character span [{char_start},{char_end}) overlaps no token"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_span_conversion() {
        let offsets = [(0, 3), (3, 4), (4, 9), (9, 12)];
        let a = annotation_from_char_span(&offsets, 3, 8).unwrap();
        assert_eq!((a.start, a.end), (1, 3));
        let a = annotation_from_char_span(&offsets, 10, 11).unwrap();
        assert_eq!((a.start, a.end), (3, 4));
        assert!(annotation_from_char_span(&offsets, 20, 30).is_err());
        assert!(annotation_from_char_span(&offsets, 5, 5).is_err());
    }

    #[test]
    fn unknown_fields_survive() {
        let line = r#"{"format_version":1,"case_id":"a","ids":[1,2,3],"query_len":1,"response_len":2,"text":"hi","judge":{"x":1}}"#;
        let rec: CaseRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.extra.len(), 2);
        let case = ReasoningCase::from(rec);
        let back = serde_json::to_string(&CaseRecord::from(&case)).unwrap();
        let again: serde_json::Value = serde_json::from_str(&back).unwrap();
        assert_eq!(again["judge"]["x"], 1);
        assert_eq!(again["text"], "hi");
    }

    #[test]
    fn payload_excludes_timing() {
        let rec = ScoreRecord {
            format_version: FORMAT_VERSION,
            case_id: "a".into(),
            metric: Metric::Nll,
            values: vec![0.1],
            backend: "reference".into(),
            config: None,
            objective_before: None,
            objective_after: None,
            timing: Some(Timing { duration_secs: 1.5 }),
        };
        assert!(!rec.payload_json().contains("timing"));
        assert!(serde_json::to_string(&rec).unwrap().contains("duration_secs"));
    }
}
