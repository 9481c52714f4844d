use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, Tier};
use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Per-token output of an externally run model for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(default = "trace_version")]
    pub format_version: u32,
    pub case_id: String,
    /// `ln P(x_t)` for every response token.
    pub log_probs: Vec<f64>,
    /// Full next-token distribution per response token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributions: Option<Vec<Vec<f64>>>,
    /// Precomputed entropy (nats) per response token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropies: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

fn trace_version() -> u32 {
    TRACE_FORMAT_VERSION
}

impl TraceRecord {
    pub fn new(case_id: impl Into<String>, log_probs: Vec<f64>) -> Self {
        Self {
            format_version: TRACE_FORMAT_VERSION,
            case_id: case_id.into(),
            log_probs,
            distributions: None,
            entropies: None,
            model: None,
            temperature: None,
        }
    }

    pub fn validate(&self, response_len: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("trace {}: {msg}", self.case_id)));
        if self.log_probs.len() != response_len {
            return bad(format!(
                "{} log-probs for response_len {response_len}",
                self.log_probs.len()
            ));
        }
        if self.log_probs.iter().any(|lp| !(lp.is_finite() && *lp <= 0.0)) {
            return bad("log-probs must be finite and <= 0".into());
        }
        if let Some(d) = &self.distributions {
            if d.len() != response_len {
                return bad(format!("{} distributions for response_len {response_len}", d.len()));
            }
        }
        if let Some(e) = &self.entropies {
            if e.len() != response_len {
                return bad(format!("{} entropies for response_len {response_len}", e.len()));
            }
        }
        Ok(())
    }
}

/// Trace records keyed by case id; the trace-only scoring source.
#[derive(Debug, Clone, Default)]
pub struct TraceSet {
    records: HashMap<String, TraceRecord>,
}

impl TraceSet {
    pub fn new(records: impl IntoIterator<Item = TraceRecord>) -> Self {
        Self {
            records: records
                .into_iter()
                .map(|r| (r.case_id.clone(), r))
                .collect(),
        }
    }

    pub fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities::trace_only()
    }

    pub fn tier(&self) -> Tier {
        Tier::TraceOnly
    }

    pub fn get(&self, case_id: &str) -> Result<&TraceRecord> {
        self.records
            .get(case_id)
            .ok_or_else(|| Error::Join(format!("no trace record for case {case_id}")))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
