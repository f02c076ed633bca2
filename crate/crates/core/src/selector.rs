//! Entity selector: marked candidate construction, contrastive sample
//! generation, and score-based filtering of predictions.
//!
//! A candidate span is marked by inserting `s1` before and `s2` after it,
//! and the scorer sees `type | marked sentence`. Training samples pair gold
//! spans (label 1) with perturbed copies (label 0) whose boundaries are
//! shifted by one or two tokens or whose type is swapped.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json_lines, write_lines, CorpusError, SchemaRegistry};
use crate::inference::{run_pool, Backend, BackendError, BackendErrorKind, GenerationRequest, RetryPolicy};
use crate::model::{char_span_to_token_span, tokenize, EntitySpan, Sentence};

/// Separator between the entity type and the marked sentence.
pub const INPUT_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Markers {
    pub open: String,
    pub close: String,
}

impl Default for Markers {
    fn default() -> Self {
        Markers { open: "⟨e⟩".to_string(), close: "⟨/e⟩".to_string() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("sentence {id}: marker {marker:?} occurs in the text")]
    MarkerCollision { id: String, marker: String },
    #[error("markers must be non-empty")]
    EmptyMarker,
    #[error("sentence {id}: span ({start}, {end}) is out of bounds")]
    OutOfBounds { id: String, start: usize, end: usize },
    #[error("corpus has no entities to sample from")]
    NoEntities,
    #[error("could only generate {generated} of {requested} negatives")]
    InsufficientNegatives { generated: usize, requested: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedCandidate {
    pub sentence_id: String,
    pub candidate: EntitySpan,
    pub marked_text: String,
    pub selector_input: String,
}

/// Inserts the markers around `e` and prefixes the entity type.
pub fn mark_candidate(s: &Sentence, e: &EntitySpan, markers: &Markers) -> Result<MarkedCandidate, SelectorError> {
    if markers.open.is_empty() || markers.close.is_empty() {
        return Err(SelectorError::EmptyMarker);
    }
    for m in [&markers.open, &markers.close] {
        if s.text.contains(m.as_str()) {
            return Err(SelectorError::MarkerCollision { id: s.id.clone(), marker: m.clone() });
        }
    }
    let chars: Vec<char> = s.text.chars().collect();
    if e.start >= e.end || e.end > chars.len() {
        return Err(SelectorError::OutOfBounds { id: s.id.clone(), start: e.start, end: e.end });
    }
    let mut marked = String::with_capacity(s.text.len() + markers.open.len() + markers.close.len());
    marked.extend(&chars[..e.start]);
    marked.push_str(&markers.open);
    marked.extend(&chars[e.start..e.end]);
    marked.push_str(&markers.close);
    marked.extend(&chars[e.end..]);
    Ok(MarkedCandidate {
        sentence_id: s.id.clone(),
        candidate: e.clone(),
        selector_input: format!("{}{INPUT_SEPARATOR}{marked}", e.etype),
        marked_text: marked,
    })
}

/// Removes the first `open` marker and the first `close` marker after it.
pub fn strip_markers(marked: &str, markers: &Markers) -> Option<String> {
    let open = marked.find(&markers.open)?;
    let rest = &marked[open + markers.open.len()..];
    let close = rest.find(&markers.close)?;
    Some(format!("{}{}{}", &marked[..open], &rest[..close], &rest[close + markers.close.len()..]))
}

/// How a training sample was derived from its gold anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    ShiftStart { delta: i8, anchor_start: usize, anchor_end: usize },
    ShiftEnd { delta: i8, anchor_start: usize, anchor_end: usize },
    TypeSwap { from: String, to: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectorSample {
    pub candidate: MarkedCandidate,
    pub label: u8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub total: usize,
    pub neg_ratio: f64,
    pub markers: Markers,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { seed: 0, total: 10_000, neg_ratio: 0.5, markers: Markers::default() }
    }
}

const TRIES_PER_ANCHOR: usize = 16;
const SHIFTS: [i8; 4] = [-2, -1, 1, 2];

struct Anchor<'a> {
    sentence: &'a Sentence,
    entity: &'a EntitySpan,
}

/// Tries one random perturbation of `a`; `None` when the result is invalid.
fn perturb_anchor<R: Rng>(a: &Anchor<'_>, types: &[&str], tokens: &[crate::model::Token], rng: &mut R) -> Option<(EntitySpan, Provenance)> {
    let e = a.entity;
    let family = rng.gen_range(0..3);
    if family == 2 {
        let others: Vec<&&str> = types.iter().filter(|t| **t != e.etype).collect();
        let to = others.choose(rng)?;
        let cand = EntitySpan::new(e.start, e.end, **to, e.text.clone());
        return Some((cand, Provenance::TypeSwap { from: e.etype.clone(), to: to.to_string() }));
    }
    let delta = *SHIFTS.choose(rng).expect("non-empty");
    let (first, last) = char_span_to_token_span(e.start, e.end, tokens).ok()?;
    let (start, end, provenance) = if family == 0 {
        let idx = first.checked_add_signed(delta as isize)?;
        if idx > last {
            return None;
        }
        let tok = tokens.get(idx)?;
        (tok.start, e.end, Provenance::ShiftStart { delta, anchor_start: e.start, anchor_end: e.end })
    } else {
        let idx = last.checked_add_signed(delta as isize)?;
        if idx < first {
            return None;
        }
        let tok = tokens.get(idx)?;
        (e.start, tok.end, Provenance::ShiftEnd { delta, anchor_start: e.start, anchor_end: e.end })
    };
    let cand = EntitySpan::from_source(&a.sentence.text, start, end, e.etype.clone())?;
    Some((cand, provenance))
}

/// Builds a shuffled set of `total` samples: `ceil(total * (1 - neg_ratio))`
/// gold positives and perturbed negatives for the rest.
///
/// Positives cycle through reshuffled passes over all gold entities, so
/// each entity is used at most once more than any other. A negative is
/// drawn by picking a random gold anchor, then one of the three perturbation
/// families (shift start, shift end, swap type) uniformly, with the shift
/// drawn from ±1, ±2 tokens. Candidates that are empty, out of range, or
/// equal to a gold entity of the sentence are redrawn, up to 16 times per
/// anchor.
pub fn gen_selector_dataset(
    corpus: &[Sentence],
    schemas: &SchemaRegistry,
    opts: &SampleOptions,
) -> Result<Vec<SelectorSample>, SelectorError> {
    let anchors: Vec<Anchor> =
        corpus.iter().flat_map(|s| s.entities.iter().map(move |e| Anchor { sentence: s, entity: e })).collect();
    if anchors.is_empty() {
        return Err(SelectorError::NoEntities);
    }
    let neg_ratio = opts.neg_ratio.clamp(0.0, 1.0);
    let positives = ((opts.total as f64) * (1.0 - neg_ratio)).ceil() as usize;
    let positives = positives.min(opts.total);
    let negatives = opts.total - positives;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut samples = Vec::with_capacity(opts.total);
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    while samples.len() < positives {
        order.shuffle(&mut rng);
        for &i in order.iter().take(positives - samples.len()) {
            let a = &anchors[i];
            samples.push(SelectorSample {
                candidate: mark_candidate(a.sentence, a.entity, &opts.markers)?,
                label: 1,
                provenance: Provenance::Gold,
            });
        }
    }

    let mut tokens_cache: HashMap<*const Sentence, Vec<crate::model::Token>> = HashMap::new();
    let mut gold_keys: HashMap<*const Sentence, HashSet<(usize, usize, String)>> = HashMap::new();
    let give_up_after = (anchors.len() * 4).max(1024);
    let mut consecutive_failures = 0;
    let mut produced = 0;
    while produced < negatives {
        let a = &anchors[rng.gen_range(0..anchors.len())];
        let key = a.sentence as *const Sentence;
        let tokens = tokens_cache.entry(key).or_insert_with(|| tokenize(&a.sentence.text, a.sentence.language));
        let gold = gold_keys
            .entry(key)
            .or_insert_with(|| a.sentence.entities.iter().map(|e| (e.start, e.end, e.etype.clone())).collect());
        let types: Vec<&str> = schemas.get(&a.sentence.dataset).map(|s| s.type_names().collect()).unwrap_or_default();
        let mut made = None;
        for _ in 0..TRIES_PER_ANCHOR {
            if let Some((cand, prov)) = perturb_anchor(a, &types, tokens, &mut rng) {
                if !gold.contains(&(cand.start, cand.end, cand.etype.clone())) {
                    made = Some((cand, prov));
                    break;
                }
            }
        }
        match made {
            Some((cand, provenance)) => {
                samples.push(SelectorSample { candidate: mark_candidate(a.sentence, &cand, &opts.markers)?, label: 0, provenance });
                produced += 1;
                consecutive_failures = 0;
            }
            None => {
                consecutive_failures += 1;
                if consecutive_failures >= give_up_after {
                    return Err(SelectorError::InsufficientNegatives { generated: produced, requested: negatives });
                }
            }
        }
    }
    samples.shuffle(&mut rng);
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub provenance: Provenance,
}

/// `{"input", "label", "meta"}`, one per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub input: String,
    pub label: u8,
    pub meta: SampleMeta,
}

impl From<&SelectorSample> for SampleRecord {
    fn from(s: &SelectorSample) -> Self {
        let c = &s.candidate;
        SampleRecord {
            input: c.selector_input.clone(),
            label: s.label,
            meta: SampleMeta {
                sentence_id: c.sentence_id.clone(),
                start: c.candidate.start,
                end: c.candidate.end,
                text: c.candidate.text.clone(),
                provenance: s.provenance.clone(),
            },
        }
    }
}

impl TryFrom<SampleRecord> for SelectorSample {
    type Error = String;

    fn try_from(r: SampleRecord) -> Result<Self, Self::Error> {
        let (etype, marked) =
            r.input.split_once(INPUT_SEPARATOR).ok_or_else(|| "input has no type separator".to_string())?;
        if r.label > 1 {
            return Err(format!("label {} is not 0 or 1", r.label));
        }
        Ok(SelectorSample {
            candidate: MarkedCandidate {
                sentence_id: r.meta.sentence_id,
                candidate: EntitySpan::new(r.meta.start, r.meta.end, etype, r.meta.text),
                marked_text: marked.to_string(),
                selector_input: r.input.clone(),
            },
            label: r.label,
            provenance: r.meta.provenance,
        })
    }
}

pub fn sample_to_line(s: &SelectorSample) -> String {
    serde_json::to_string(&SampleRecord::from(s)).expect("samples always serialize")
}

pub fn emit_selector_file(samples: &[SelectorSample], path: impl AsRef<Path>) -> Result<(), SelectorError> {
    Ok(write_lines(path.as_ref(), samples.iter().map(sample_to_line))?)
}

pub fn load_selector_file(path: impl AsRef<Path>) -> Result<Vec<SelectorSample>, SelectorError> {
    let records: Vec<SampleRecord> = read_json_lines(path.as_ref())?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| SelectorSample::try_from(r).map_err(|reason| SelectorError::Parse { line: i + 1, reason }))
        .collect()
}

/// Scores a selector input with the probability that the candidate is valid.
pub trait SelectorBackend: Send + Sync {
    fn score(&self, selector_input: &str) -> Result<f64, BackendError>;
}

/// Scores 1 for inputs built from gold entities and 0 otherwise.
pub struct GoldOracleSelector {
    gold: HashSet<String>,
}

impl GoldOracleSelector {
    pub fn new(corpus: &[Sentence], markers: &Markers) -> Self {
        let gold = corpus
            .iter()
            .flat_map(|s| s.entities.iter().filter_map(move |e| mark_candidate(s, e, markers).ok()))
            .map(|c| c.selector_input)
            .collect();
        GoldOracleSelector { gold }
    }
}

impl SelectorBackend for GoldOracleSelector {
    fn score(&self, selector_input: &str) -> Result<f64, BackendError> {
        Ok(if self.gold.contains(selector_input) { 1.0 } else { 0.0 })
    }
}

/// Always returns the same score.
pub struct ConstantSelector(pub f64);

impl SelectorBackend for ConstantSelector {
    fn score(&self, _: &str) -> Result<f64, BackendError> {
        Ok(self.0)
    }
}

/// Asks a generation backend for a score; the first line of the answer must
/// be a number in `[0, 1]`.
pub struct GenerativeSelector<B> {
    backend: B,
}

impl<B: Backend> GenerativeSelector<B> {
    pub fn new(backend: B) -> Self {
        GenerativeSelector { backend }
    }
}

pub fn parse_score(answer: &str) -> Result<f64, BackendError> {
    let first = answer.trim_start().lines().next().unwrap_or("").trim();
    match first.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(BackendError::new(BackendErrorKind::MalformedResponse, format!("expected a score in [0, 1], got {first:?}"))),
    }
}

impl<B: Backend> SelectorBackend for GenerativeSelector<B> {
    fn score(&self, selector_input: &str) -> Result<f64, BackendError> {
        parse_score(&self.backend.generate(&GenerationRequest::new(0, selector_input))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreAudit {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    pub text: String,
    pub score: Option<f64>,
    pub kept: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    /// Kept predictions per sentence, input order preserved.
    pub kept: Vec<Vec<EntitySpan>>,
    pub audit: Vec<ScoreAudit>,
}

#[derive(Debug, Clone)]
pub struct FilterOptions {
    pub threshold: f64,
    pub markers: Markers,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { threshold: 0.5, markers: Markers::default(), parallelism: 4, retry: RetryPolicy::default() }
    }
}

/// Keeps predictions scoring at least the threshold. Candidates that cannot
/// be marked or scored are kept, with the reason in the audit.
pub fn filter_predictions(
    preds: &[(&Sentence, &[EntitySpan])],
    backend: &dyn SelectorBackend,
    opts: &FilterOptions,
) -> FilterOutcome {
    let jobs: Vec<(usize, &Sentence, &EntitySpan)> =
        preds.iter().enumerate().flat_map(|(si, (s, es))| es.iter().map(move |e| (si, *s, e))).collect();
    let scores = run_pool(&jobs, opts.parallelism, |_, (_, s, e)| {
        let marked = mark_candidate(s, e, &opts.markers).map_err(|err| err.to_string())?;
        opts.retry.run(|| backend.score(&marked.selector_input)).map_err(|err| err.to_string())
    });
    let mut out = FilterOutcome { kept: vec![Vec::new(); preds.len()], audit: Vec::with_capacity(jobs.len()) };
    for ((si, s, e), result) in jobs.into_iter().zip(scores) {
        let (score, kept, error) = match result {
            Ok(v) => (Some(v), v >= opts.threshold, None),
            Err(msg) => {
                log::warn!("keeping unscored candidate in {}: {msg}", s.id);
                (None, true, Some(msg))
            }
        };
        if kept {
            out.kept[si].push(e.clone());
        }
        out.audit.push(ScoreAudit {
            sentence_id: s.id.clone(),
            start: e.start,
            end: e.end,
            etype: e.etype.clone(),
            text: e.text.clone(),
            score,
            kept,
            error,
        });
    }
    out
}
