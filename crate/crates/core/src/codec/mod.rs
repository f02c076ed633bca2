//! Tagging formats: encode gold annotations into model targets and decode
//! (possibly imperfect) model output back into character-exact spans.
//!
//! Three formats are supported:
//!
//! * **json**: an array of `{"start_idx", "end_idx", "type", "entity"}` records,
//!   character offsets, end-exclusive.
//! * **html**: the sentence with `<type:entity>` … `</type:entity>` tags around
//!   each mention; `<`, `>` and `\` in text are backslash-escaped.
//! * **symbolic**: one `"<type>: <sentence>"` line per schema type, in schema
//!   order, with `[` and `]` around the mentions of that type; `[`, `]`, `\`
//!   and line breaks in text are backslash-escaped.
//!
//! Decoding never fails hard. Anything lost or repaired is reported through
//! [`Diagnostic`]s on the [`DecodeOutcome`].

pub mod align;
mod html;
mod json;
mod symbolic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::{self, ExecMode};
use crate::model::{DatasetSchema, EntitySpan, Sentence};

pub use align::{align_to_source, AlignmentRejected, Alignment, DEFAULT_MAX_EDIT_RATIO};
pub use html::{decode_html, encode_html};
pub use json::{decode_json, encode_json};
pub use symbolic::{decode_symbolic, encode_symbolic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Json,
    Html,
    #[default]
    Symbolic,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Json, Strategy::Html, Strategy::Symbolic];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Json => "json",
            Strategy::Html => "html",
            Strategy::Symbolic => "symbolic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Strategy::Json),
            "html" => Ok(Strategy::Html),
            "symbolic" => Ok(Strategy::Symbolic),
            other => Err(format!("unknown tagging strategy {other:?} (expected json, html or symbolic)")),
        }
    }
}

/// A serialized annotation of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedText {
    pub strategy: Strategy,
    pub payload: String,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("entities ({a_start}, {a_end}) and ({b_start}, {b_end}) cross and cannot be nested in {strategy} format")]
    OverlapUnserializable {
        strategy: Strategy,
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },
    #[error("entity type {0:?} is not in the schema")]
    UnknownType(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// An item was kept after its offsets or structure were corrected.
    Repair,
    /// An item was discarded.
    Dropped,
    /// A generated sentence copy was too far from the source to align.
    AlignmentRejected,
    /// Nothing could be parsed from the payload.
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl Diagnostic {
    pub fn repair(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Warning, kind: DiagnosticKind::Repair, message: message.into() }
    }

    pub fn dropped(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, kind: DiagnosticKind::Dropped, message: message.into() }
    }

    fn rejected(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, kind: DiagnosticKind::AlignmentRejected, message: message.into() }
    }

    fn unparseable(message: impl Into<String>) -> Self {
        Diagnostic { severity: Severity::Error, kind: DiagnosticKind::Unparseable, message: message.into() }
    }
}

/// Entities recovered from one payload plus everything lost on the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DecodeOutcome {
    /// Sorted by `(start, end, type)` and free of duplicates.
    pub entities: Vec<EntitySpan>,
    pub diagnostics: Vec<Diagnostic>,
    pub failed: bool,
}

impl DecodeOutcome {
    fn failure(diagnostic: Diagnostic) -> Self {
        DecodeOutcome { entities: Vec::new(), diagnostics: vec![diagnostic], failed: true }
    }

    pub fn count(&self, kind: DiagnosticKind) -> usize {
        self.diagnostics.iter().filter(|d| d.kind == kind).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Maximum edit ratio accepted when aligning a generated copy to the source.
    pub max_edit_ratio: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { max_edit_ratio: DEFAULT_MAX_EDIT_RATIO }
    }
}

pub fn encode(strategy: Strategy, sentence: &Sentence, schema: &DatasetSchema) -> Result<TaggedText, CodecError> {
    match strategy {
        Strategy::Json => Ok(encode_json(sentence)),
        Strategy::Html => encode_html(sentence),
        Strategy::Symbolic => encode_symbolic(sentence, schema),
    }
}

pub fn decode(
    strategy: Strategy,
    payload: &str,
    schema: &DatasetSchema,
    source: &Sentence,
    opts: &DecodeOptions,
) -> DecodeOutcome {
    match strategy {
        Strategy::Json => decode_json(payload, schema, source),
        Strategy::Html => decode_html(payload, schema, source, opts),
        Strategy::Symbolic => decode_symbolic(payload, schema, source, opts),
    }
}

/// One payload to decode against its source sentence.
#[derive(Debug, Clone, Copy)]
pub struct DecodeJob<'a> {
    pub strategy: Strategy,
    pub payload: &'a str,
    pub schema: &'a DatasetSchema,
    pub source: &'a Sentence,
}

/// Decodes every job; outcomes are in job order.
pub fn decode_batch(jobs: &[DecodeJob<'_>], opts: &DecodeOptions, mode: ExecMode) -> Vec<DecodeOutcome> {
    exec::map(mode, jobs, |j| decode(j.strategy, j.payload, j.schema, j.source, opts))
}

/// Sorts, drops duplicates with a diagnostic, and returns the outcome.
fn finish(mut entities: Vec<EntitySpan>, mut diagnostics: Vec<Diagnostic>, failed: bool) -> DecodeOutcome {
    entities.sort();
    let mut unique: Vec<EntitySpan> = Vec::with_capacity(entities.len());
    for e in entities {
        // sorted, so duplicates are adjacent
        if unique.last().is_some_and(|u| u.key() == e.key()) {
            diagnostics.push(Diagnostic::dropped(format!(
                "duplicate entity {:?} ({}, {}) {:?}",
                e.etype, e.start, e.end, e.text
            )));
            continue;
        }
        unique.push(e);
    }
    let entities = if failed { Vec::new() } else { unique };
    DecodeOutcome { entities, diagnostics, failed }
}

/// Orders span open/close events so that spans nest properly: at each
/// position, closes come before opens, longer spans open first, and closes
/// mirror the opening order.
fn nesting_events<'a>(entities: &[&'a EntitySpan], len: usize) -> (Vec<Vec<&'a EntitySpan>>, Vec<Vec<&'a EntitySpan>>) {
    let mut opens: Vec<Vec<&EntitySpan>> = vec![Vec::new(); len + 1];
    let mut closes: Vec<Vec<&EntitySpan>> = vec![Vec::new(); len + 1];
    for e in entities {
        opens[e.start].push(e);
        closes[e.end].push(e);
    }
    for v in &mut opens {
        v.sort_by(|a, b| b.end.cmp(&a.end).then_with(|| a.etype.cmp(&b.etype)));
    }
    for v in &mut closes {
        v.sort_by(|a, b| b.start.cmp(&a.start).then_with(|| b.etype.cmp(&a.etype)));
    }
    (opens, closes)
}

fn find_crossing(strategy: Strategy, entities: &[&EntitySpan]) -> Result<(), CodecError> {
    let mut sorted: Vec<&EntitySpan> = entities.to_vec();
    sorted.sort();
    for (i, a) in sorted.iter().enumerate() {
        for b in &sorted[i + 1..] {
            if b.start >= a.end {
                break;
            }
            if a.crosses(b) {
                return Err(CodecError::OverlapUnserializable {
                    strategy,
                    a_start: a.start,
                    a_end: a.end,
                    b_start: b.start,
                    b_end: b.end,
                });
            }
        }
    }
    Ok(())
}

/// All character offsets at which `needle` occurs in `hay`.
fn occurrences(hay: &[char], needle: &[char]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    hay.windows(needle.len()).enumerate().filter(|(_, w)| *w == needle).map(|(i, _)| i).collect()
}

/// The occurrence of `needle` whose start is closest to `anchor`; ties go left.
fn nearest_occurrence(hay: &[char], needle: &[char], anchor: usize) -> Option<usize> {
    occurrences(hay, needle).into_iter().min_by_key(|&i| (i.abs_diff(anchor), i))
}
