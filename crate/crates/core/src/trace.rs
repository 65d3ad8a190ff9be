//! Line-delimited JSON trace files.
//!
//! A trace holds one or more responses. Each response is a `header` line, one `token` line
//! per generated token and a closing `summary` line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::candidates::Source;
use crate::error::{Error, Result};
use crate::geometry::{Cell, Region};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub regions: Vec<Region>,
    pub sources: Vec<Source>,
    /// Empty for selection modes that do not measure gain.
    pub gains: Vec<f64>,
    pub backend_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub index: usize,
    pub token: u32,
    pub a_visual: f64,
    pub delta: Option<f64>,
    pub fired: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion: Option<Insertion>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRecord {
    pub question_id: String,
    pub question: String,
    pub enhanced_question: String,
    pub warnings: Vec<String>,
    pub mask: Vec<Cell>,
    pub config: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<TokenEntry>,
    pub response: String,
    pub error: Option<String>,
}

impl TraceRecord {
    pub fn insertions(&self) -> impl Iterator<Item = (&TokenEntry, &Insertion)> {
        self.entries.iter().filter_map(|e| e.insertion.as_ref().map(|i| (e, i)))
    }

    pub fn insertion_count(&self) -> usize {
        self.insertions().count()
    }

    /// Fraction of selected regions that came from the exploratory pool.
    pub fn p_exp(&self) -> Option<f64> {
        let (mut exp, mut total) = (0usize, 0usize);
        for (_, ins) in self.insertions() {
            total += ins.sources.len();
            exp += ins.sources.iter().filter(|&&s| s == Source::Exploratory).count();
        }
        (total > 0).then(|| exp as f64 / total as f64)
    }

    /// Shift series over every token with a predecessor.
    pub fn deltas(&self) -> Vec<f64> {
        self.entries.iter().filter_map(|e| e.delta).collect()
    }

    /// Every cell covered by an inserted region.
    pub fn inserted_cells(&self) -> std::collections::BTreeSet<Cell> {
        self.insertions().flat_map(|(_, ins)| ins.regions.iter().flat_map(|r| r.cells().collect::<Vec<_>>())).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header {
        trace_version: u32,
        question_id: String,
        question: String,
        enhanced_question: String,
        #[serde(default)]
        warnings: Vec<String>,
        #[serde(default)]
        mask: Vec<Cell>,
        config: BTreeMap<String, serde_json::Value>,
    },
    Token(TokenEntry),
    Summary {
        response: String,
        insertions: usize,
        p_exp: Option<f64>,
        error: Option<String>,
    },
}

pub fn write_trace<W: Write>(out: &mut W, record: &TraceRecord) -> Result<()> {
    let header = Line::Header {
        trace_version: TRACE_VERSION,
        question_id: record.question_id.clone(),
        question: record.question.clone(),
        enhanced_question: record.enhanced_question.clone(),
        warnings: record.warnings.clone(),
        mask: record.mask.clone(),
        config: record.config.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for e in &record.entries {
        serde_json::to_writer(&mut *out, &Line::Token(e.clone()))?;
        out.write_all(b"\n")?;
    }
    let summary = Line::Summary {
        response: record.response.clone(),
        insertions: record.insertion_count(),
        p_exp: record.p_exp(),
        error: record.error.clone(),
    };
    serde_json::to_writer(&mut *out, &summary)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    let mut current: Option<TraceRecord> = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("trace line {}: {e}", n + 1)))?;
        match parsed {
            Line::Header { trace_version, question_id, question, enhanced_question, warnings, mask, config } => {
                if trace_version != TRACE_VERSION {
                    return Err(Error::Data(format!("unsupported trace_version {trace_version}")));
                }
                if let Some(open) = current.take() {
                    return Err(Error::Data(format!("response {} has no summary", open.question_id)));
                }
                current = Some(TraceRecord {
                    question_id,
                    question,
                    enhanced_question,
                    warnings,
                    mask,
                    config,
                    ..Default::default()
                });
            }
            Line::Token(entry) => {
                let rec = current
                    .as_mut()
                    .ok_or_else(|| Error::Data(format!("trace line {}: token before header", n + 1)))?;
                if rec.entries.last().is_some_and(|e| e.index >= entry.index) {
                    return Err(Error::Data(format!("trace line {}: token index out of order", n + 1)));
                }
                rec.entries.push(entry);
            }
            Line::Summary { response, error, .. } => {
                let mut rec = current
                    .take()
                    .ok_or_else(|| Error::Data(format!("trace line {}: summary before header", n + 1)))?;
                rec.response = response;
                rec.error = error;
                out.push(rec);
            }
        }
    }
    if let Some(open) = current {
        return Err(Error::Data(format!("response {} has no summary", open.question_id)));
    }
    Ok(out)
}
