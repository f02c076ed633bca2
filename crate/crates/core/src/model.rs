//! Domain types shared by every stage of the pipeline.
//!
//! All offsets are indices into the sentence text counted in Unicode scalar
//! values (Rust `char`s), with an inclusive start and an exclusive end.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Language of a sentence or dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Zh,
    En,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::Zh => "zh",
            Language::En => "en",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed mention inside a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
    /// Surface text, always `sentence.text[start..end)`.
    pub text: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>, text: impl Into<String>) -> Self {
        EntitySpan { start, end, etype: etype.into(), text: text.into() }
    }

    /// Builds a span over `source`, deriving the surface text.
    ///
    /// Returns `None` when the offsets are empty or out of range.
    pub fn from_source(source: &str, start: usize, end: usize, etype: impl Into<String>) -> Option<Self> {
        let text = char_slice(source, start, end)?;
        if start >= end {
            return None;
        }
        Some(EntitySpan::new(start, end, etype, text))
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// `(start, end, type)`, the identity of a span within a sentence.
    pub fn key(&self) -> (usize, usize, &str) {
        (self.start, self.end, self.etype.as_str())
    }

    pub fn same_span(&self, other: &EntitySpan) -> bool {
        self.start == other.start && self.end == other.end
    }

    /// Number of characters shared by the two spans.
    pub fn overlap(&self, other: &EntitySpan) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    /// True when `other` lies within `self` (equal spans contain each other).
    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// Partial overlap without containment in either direction.
    pub fn crosses(&self, other: &EntitySpan) -> bool {
        self.overlap(other) > 0 && !self.contains(other) && !other.contains(self)
    }
}

/// One annotated sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub dataset: String,
    pub entities: Vec<EntitySpan>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, dataset: impl Into<String>, language: Language, text: impl Into<String>) -> Self {
        Sentence {
            id: id.into(),
            text: text.into(),
            language,
            dataset: dataset.into(),
            entities: Vec::new(),
        }
    }

    /// Adds an entity by offsets, deriving its surface text. Panics on invalid offsets.
    pub fn with_entity(mut self, start: usize, end: usize, etype: &str) -> Self {
        let e = EntitySpan::from_source(&self.text, start, end, etype)
            .unwrap_or_else(|| panic!("invalid span ({start}, {end}) for {:?}", self.text));
        self.entities.push(e);
        self
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Entities sorted by `(start, end, type)`.
    pub fn sorted_entities(&self) -> Vec<EntitySpan> {
        let mut v = self.entities.clone();
        v.sort();
        v
    }

    pub fn tokens(&self) -> Vec<Token> {
        tokenize(&self.text, self.language)
    }
}

/// An entity type with its natural-language definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub definition: String,
}

/// The ordered set of entity types of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub language: Language,
    pub types: Vec<EntityType>,
}

/// Problems with a schema definition itself.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema {schema}: empty entity type name")]
    EmptyTypeName { schema: String },
    #[error("schema {schema}: duplicate entity type {name:?}")]
    DuplicateType { schema: String, name: String },
    #[error("schema {schema}: entity type {name:?} contains a reserved character")]
    ReservedCharacter { schema: String, name: String },
}

impl DatasetSchema {
    pub fn new(name: impl Into<String>, language: Language, types: &[(&str, &str)]) -> Self {
        DatasetSchema {
            name: name.into(),
            language,
            types: types
                .iter()
                .map(|(n, d)| EntityType { name: n.to_string(), definition: d.to_string() })
                .collect(),
        }
    }

    /// Type names must be unique, non-empty, free of `:` and line breaks.
    /// `|` is also reserved because it delimits selector inputs.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = HashSet::new();
        for t in &self.types {
            if t.name.trim().is_empty() {
                return Err(SchemaError::EmptyTypeName { schema: self.name.clone() });
            }
            if t.name.contains([':', '\n', '\r', '|']) || t.name != t.name.trim() {
                return Err(SchemaError::ReservedCharacter { schema: self.name.clone(), name: t.name.clone() });
            }
            if !seen.insert(t.name.as_str()) {
                return Err(SchemaError::DuplicateType { schema: self.name.clone(), name: t.name.clone() });
            }
        }
        Ok(())
    }

    pub fn has_type(&self, name: &str) -> bool {
        self.types.iter().any(|t| t.name == name)
    }

    pub fn type_names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }
}

/// A token of a sentence: `[start, end)` in character offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

/// Splits `text` into tokens.
///
/// Chinese text yields one token per non-whitespace character. English text
/// yields maximal runs of alphanumeric characters, and every other
/// non-whitespace character becomes a token of its own.
pub fn tokenize(text: &str, language: Language) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run: Option<(usize, String)> = None;
    let flush = |run: &mut Option<(usize, String)>, tokens: &mut Vec<Token>, end: usize| {
        if let Some((start, surface)) = run.take() {
            tokens.push(Token { start, end, surface });
        }
    };
    let mut pos = 0;
    for (i, c) in text.chars().enumerate() {
        pos = i + 1;
        if c.is_whitespace() {
            flush(&mut run, &mut tokens, i);
            continue;
        }
        if language == Language::En && c.is_alphanumeric() {
            match run.as_mut() {
                Some((_, s)) => s.push(c),
                None => run = Some((i, c.to_string())),
            }
            continue;
        }
        flush(&mut run, &mut tokens, i);
        tokens.push(Token { start: i, end: i + 1, surface: c.to_string() });
    }
    flush(&mut run, &mut tokens, pos);
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("span ({start}, {end}) overlaps no token")]
pub struct NoTokenOverlap {
    pub start: usize,
    pub end: usize,
}

/// Indices of the first and last token overlapping `[start, end)`.
pub fn char_span_to_token_span(start: usize, end: usize, tokens: &[Token]) -> Result<(usize, usize), NoTokenOverlap> {
    // tokens are sorted and disjoint, so both searches are binary
    let first = tokens.partition_point(|t| t.end <= start);
    let after = tokens.partition_point(|t| t.start < end);
    if first >= after {
        return Err(NoTokenOverlap { start, end });
    }
    Ok((first, after - 1))
}

/// One broken invariant of a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    OffsetOutOfRange { index: usize, start: usize, end: usize, text_len: usize },
    EmptySpan { index: usize, start: usize, end: usize },
    SurfaceMismatch { index: usize, expected: String, found: String },
    DuplicateEntity { index: usize },
    UnknownType { index: usize, etype: String },
    DatasetMismatch { sentence: String, schema: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OffsetOutOfRange { index, start, end, text_len } => {
                write!(f, "entity #{index}: offsets ({start}, {end}) out of range for text of length {text_len}")
            }
            Violation::EmptySpan { index, start, end } => write!(f, "entity #{index}: empty span ({start}, {end})"),
            Violation::SurfaceMismatch { index, expected, found } => {
                write!(f, "entity #{index}: surface text {found:?} does not match source slice {expected:?}")
            }
            Violation::DuplicateEntity { index } => write!(f, "entity #{index}: duplicate (span, type)"),
            Violation::UnknownType { index, etype } => write!(f, "entity #{index}: unknown type {etype:?}"),
            Violation::DatasetMismatch { sentence, schema } => {
                write!(f, "sentence dataset {sentence:?} does not match schema {schema:?}")
            }
        }
    }
}

/// Checks every sentence and entity invariant. Passing `None` skips the
/// schema checks (type membership and dataset name).
pub fn validate_sentence(s: &Sentence, schema: Option<&DatasetSchema>) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(schema) = schema {
        if schema.name != s.dataset {
            out.push(Violation::DatasetMismatch { sentence: s.dataset.clone(), schema: schema.name.clone() });
        }
    }
    let chars: Vec<char> = s.text.chars().collect();
    let mut seen = HashSet::new();
    for (index, e) in s.entities.iter().enumerate() {
        if e.end > chars.len() || e.start > chars.len() {
            out.push(Violation::OffsetOutOfRange { index, start: e.start, end: e.end, text_len: chars.len() });
        } else if e.start >= e.end {
            out.push(Violation::EmptySpan { index, start: e.start, end: e.end });
        } else {
            let expected: String = chars[e.start..e.end].iter().collect();
            if expected != e.text {
                out.push(Violation::SurfaceMismatch { index, expected, found: e.text.clone() });
            }
        }
        if let Some(schema) = schema {
            if !schema.has_type(&e.etype) {
                out.push(Violation::UnknownType { index, etype: e.etype.clone() });
            }
        }
        if !seen.insert(e.key()) {
            out.push(Violation::DuplicateEntity { index });
        }
    }
    out
}

/// `text[start..end)` in character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<String> {
    if start > end {
        return None;
    }
    let mut it = text.chars();
    let mut out = String::new();
    for _ in 0..start {
        it.next()?;
    }
    for _ in start..end {
        out.push(it.next()?);
    }
    Some(out)
}
