//! Exact-match scoring, the four-way prediction error taxonomy, and
//! token-level boundary deviation statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::ops::AddAssign;

use serde::Serialize;

use crate::exec::{self, ExecMode};
use crate::model::{char_span_to_token_span, EntitySpan, Sentence, Token};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("{side} list contains a duplicate entity ({start}, {end}, {etype:?})")]
    DuplicateEntity { side: &'static str, start: usize, end: usize, etype: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    /// Exact span, wrong type.
    Type,
    /// Overlapping span, right type.
    Span,
    /// Overlapping span, wrong type.
    TypeAndSpan,
    /// No overlapping gold entity left.
    Spurious,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionError {
    pub pred: EntitySpan,
    pub category: ErrorCategory,
    pub gold: Option<EntitySpan>,
}

/// One-to-one assignment of predictions to gold entities.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub true_positives: Vec<(EntitySpan, EntitySpan)>,
    pub errors: Vec<PredictionError>,
    pub missed: Vec<EntitySpan>,
}

impl MatchResult {
    pub fn count(&self, category: ErrorCategory) -> usize {
        self.errors.iter().filter(|e| e.category == category).count()
    }

    pub fn predictions(&self) -> usize {
        self.true_positives.len() + self.errors.len()
    }

    /// Gold entities consumed by Type, Span and TypeAndSpan errors.
    pub fn gold_consumed_by_errors(&self) -> usize {
        self.errors.iter().filter(|e| e.gold.is_some()).count()
    }

    pub fn gold(&self) -> usize {
        self.true_positives.len() + self.missed.len() + self.gold_consumed_by_errors()
    }
}

fn check_unique(side: &'static str, items: &[EntitySpan]) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for e in items {
        if !seen.insert(e.key()) {
            return Err(EvalError::DuplicateEntity { side, start: e.start, end: e.end, etype: e.etype.clone() });
        }
    }
    Ok(())
}

/// Staged one-to-one matching.
///
/// 1. exact span and type: true positive;
/// 2. exact span, other type: [`ErrorCategory::Type`];
/// 3. overlapping span, same type: [`ErrorCategory::Span`];
/// 4. overlapping span, other type: [`ErrorCategory::TypeAndSpan`];
/// 5. leftover predictions are spurious, leftover gold is missed.
///
/// Predictions are processed in `(start, end, type)` order. In stages 3 and
/// 4 each takes the free gold entity with the largest character overlap,
/// then the smallest summed boundary distance, then the leftmost one.
pub fn match_entities(pred: &[EntitySpan], gold: &[EntitySpan]) -> Result<MatchResult, EvalError> {
    check_unique("prediction", pred)?;
    check_unique("gold", gold)?;
    let mut pred: Vec<&EntitySpan> = pred.iter().collect();
    pred.sort();
    let mut gold: Vec<&EntitySpan> = gold.iter().collect();
    gold.sort();

    let mut taken = vec![false; gold.len()];
    let mut assigned: Vec<Option<(usize, Option<ErrorCategory>)>> = vec![None; pred.len()];

    let by_key: HashMap<(usize, usize, &str), usize> = gold.iter().enumerate().map(|(i, g)| (g.key(), i)).collect();
    for (pi, p) in pred.iter().enumerate() {
        if let Some(&gi) = by_key.get(&p.key()) {
            taken[gi] = true;
            assigned[pi] = Some((gi, None));
        }
    }

    for (pi, p) in pred.iter().enumerate() {
        if assigned[pi].is_some() {
            continue;
        }
        if let Some(gi) = (0..gold.len()).find(|&gi| !taken[gi] && gold[gi].same_span(p)) {
            taken[gi] = true;
            assigned[pi] = Some((gi, Some(ErrorCategory::Type)));
        }
    }

    for (same_type, category) in [(true, ErrorCategory::Span), (false, ErrorCategory::TypeAndSpan)] {
        for (pi, p) in pred.iter().enumerate() {
            if assigned[pi].is_some() {
                continue;
            }
            let best = (0..gold.len())
                .filter(|&gi| !taken[gi])
                .filter(|&gi| (gold[gi].etype == p.etype) == same_type)
                .filter(|&gi| gold[gi].overlap(p) > 0 && !gold[gi].same_span(p))
                .min_by_key(|&gi| {
                    let g = gold[gi];
                    let distance = g.start.abs_diff(p.start) + g.end.abs_diff(p.end);
                    (std::cmp::Reverse(g.overlap(p)), distance, gi)
                });
            if let Some(gi) = best {
                taken[gi] = true;
                assigned[pi] = Some((gi, Some(category)));
            }
        }
    }

    let mut out = MatchResult::default();
    for (pi, p) in pred.iter().enumerate() {
        match assigned[pi] {
            Some((gi, None)) => out.true_positives.push(((*p).clone(), gold[gi].clone())),
            Some((gi, Some(category))) => {
                out.errors.push(PredictionError { pred: (*p).clone(), category, gold: Some(gold[gi].clone()) })
            }
            None => out.errors.push(PredictionError { pred: (*p).clone(), category: ErrorCategory::Spurious, gold: None }),
        }
    }
    out.missed = gold.iter().zip(&taken).filter(|(_, t)| !**t).map(|(g, _)| (*g).clone()).collect();
    Ok(out)
}

/// Precision, recall and F1; zero whenever a denominator is zero.
pub fn prf(tp: usize, predictions: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predictions == 0 { 0.0 } else { tp as f64 / predictions as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub predictions: usize,
    pub gold: usize,
    pub true_positives: usize,
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.predictions += o.predictions;
        self.gold += o.gold;
        self.true_positives += o.true_positives;
    }
}

impl Counts {
    pub fn prf(&self) -> (f64, f64, f64) {
        prf(self.true_positives, self.predictions, self.gold)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCounts {
    pub type_error: usize,
    pub span_error: usize,
    pub type_and_span_error: usize,
    pub spurious: usize,
    pub missed: usize,
    pub gold_consumed_by_errors: usize,
}

impl ErrorCounts {
    pub fn total_prediction_errors(&self) -> usize {
        self.type_error + self.span_error + self.type_and_span_error + self.spurious
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: ErrorCounts) {
        self.type_error += o.type_error;
        self.span_error += o.span_error;
        self.type_and_span_error += o.type_and_span_error;
        self.spurious += o.spurious;
        self.missed += o.missed;
        self.gold_consumed_by_errors += o.gold_consumed_by_errors;
    }
}

/// Which token-level statistic to histogram for boundary errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DeviationMeasure {
    /// `max(|Δ first token|, |Δ last token|)`.
    #[default]
    MaxBoundaryOffset,
    /// Difference in span length, in tokens.
    LengthDifference,
}

/// Histogram of token deviations over the Span and TypeAndSpan errors of
/// `m`, using the tokens of the sentence the entities belong to.
pub fn boundary_deviation_histogram(m: &MatchResult, tokens: &[Token], measure: DeviationMeasure) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for e in &m.errors {
        if !matches!(e.category, ErrorCategory::Span | ErrorCategory::TypeAndSpan) {
            continue;
        }
        let Some(gold) = &e.gold else { continue };
        let (Ok(p), Ok(g)) = (
            char_span_to_token_span(e.pred.start, e.pred.end, tokens),
            char_span_to_token_span(gold.start, gold.end, tokens),
        ) else {
            continue;
        };
        let dev = match measure {
            DeviationMeasure::MaxBoundaryOffset => p.0.abs_diff(g.0).max(p.1.abs_diff(g.1)),
            DeviationMeasure::LengthDifference => (p.1 - p.0).abs_diff(g.1 - g.0),
        };
        *hist.entry(dev).or_insert(0) += 1;
    }
    hist
}

/// Additive evaluation state; merging partial results is associative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalAccumulator {
    pub overall: Counts,
    pub per_type: BTreeMap<String, Counts>,
    pub errors: ErrorCounts,
    pub deviation: BTreeMap<usize, usize>,
}

impl EvalAccumulator {
    pub fn add_match(&mut self, m: &MatchResult) {
        self.overall += Counts { predictions: m.predictions(), gold: m.gold(), true_positives: m.true_positives.len() };
        for (p, _) in &m.true_positives {
            let c = self.per_type.entry(p.etype.clone()).or_default();
            c.true_positives += 1;
            c.predictions += 1;
            c.gold += 1;
        }
        for e in &m.errors {
            self.per_type.entry(e.pred.etype.clone()).or_default().predictions += 1;
            if let Some(g) = &e.gold {
                self.per_type.entry(g.etype.clone()).or_default().gold += 1;
            }
        }
        for g in &m.missed {
            self.per_type.entry(g.etype.clone()).or_default().gold += 1;
        }
        self.errors += ErrorCounts {
            type_error: m.count(ErrorCategory::Type),
            span_error: m.count(ErrorCategory::Span),
            type_and_span_error: m.count(ErrorCategory::TypeAndSpan),
            spurious: m.count(ErrorCategory::Spurious),
            missed: m.missed.len(),
            gold_consumed_by_errors: m.gold_consumed_by_errors(),
        };
    }

    pub fn add_histogram(&mut self, hist: &BTreeMap<usize, usize>) {
        for (k, v) in hist {
            *self.deviation.entry(*k).or_insert(0) += v;
        }
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.overall += other.overall;
        for (k, v) in other.per_type {
            *self.per_type.entry(k).or_default() += v;
        }
        self.errors += other.errors;
        self.add_histogram(&other.deviation);
    }

    pub fn report(&self) -> EvalReport {
        let (precision, recall, f1) = self.overall.prf();
        EvalReport {
            counts: self.overall,
            precision,
            recall,
            f1,
            per_type: self
                .per_type
                .iter()
                .map(|(k, c)| {
                    let (precision, recall, f1) = c.prf();
                    (k.clone(), TypeScore { counts: *c, precision, recall, f1 })
                })
                .collect(),
            errors: self.errors,
            deviation: self.deviation.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeScore {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, TypeScore>,
    pub errors: ErrorCounts,
    pub deviation: BTreeMap<usize, usize>,
}

impl Default for EvalReport {
    fn default() -> Self {
        EvalAccumulator::default().report()
    }
}

impl EvalReport {
    /// `|pred| = |TP| + Σ errors` and `|gold| = |TP| + |missed| + |gold consumed by errors|`.
    pub fn conservation_holds(&self) -> bool {
        self.counts.predictions == self.counts.true_positives + self.errors.total_prediction_errors()
            && self.counts.gold == self.counts.true_positives + self.errors.missed + self.errors.gold_consumed_by_errors
    }
}

pub fn compute_metrics(m: &MatchResult) -> EvalReport {
    let mut acc = EvalAccumulator::default();
    acc.add_match(m);
    acc.report()
}

/// Gold sentence paired with the predicted entity set for it.
#[derive(Debug, Clone)]
pub struct Prediction<'a> {
    pub gold: &'a Sentence,
    pub entities: &'a [EntitySpan],
}

pub fn evaluate_sentence(p: &Prediction<'_>, measure: DeviationMeasure) -> Result<EvalAccumulator, EvalError> {
    let m = match_entities(p.entities, &p.gold.entities)?;
    let mut acc = EvalAccumulator::default();
    acc.add_match(&m);
    if m.errors.iter().any(|e| matches!(e.category, ErrorCategory::Span | ErrorCategory::TypeAndSpan)) {
        acc.add_histogram(&boundary_deviation_histogram(&m, &p.gold.tokens(), measure));
    }
    Ok(acc)
}

/// Scores a whole corpus; sentences are evaluated independently.
pub fn evaluate_corpus(preds: &[Prediction<'_>], measure: DeviationMeasure, mode: ExecMode) -> Result<EvalReport, EvalError> {
    let parts = exec::map(mode, preds, |p| evaluate_sentence(p, measure));
    let mut acc = EvalAccumulator::default();
    for part in parts {
        acc.merge(part?);
    }
    Ok(acc.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    /// One JSON object per line, fixed key order.
    Machine,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    kind: &'a str,
    #[serde(flatten)]
    counts: Counts,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct TypeLine<'a> {
    kind: &'a str,
    #[serde(rename = "type")]
    etype: &'a str,
    #[serde(flatten)]
    score: TypeScore,
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    kind: &'a str,
    #[serde(flatten)]
    errors: ErrorCounts,
}

#[derive(Serialize)]
struct DeviationLine<'a> {
    kind: &'a str,
    tokens: usize,
    count: usize,
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => render_machine(report),
        ReportFormat::Text => render_text(report),
    }
}

fn render_machine(r: &EvalReport) -> String {
    let mut lines = vec![serde_json::to_string(&SummaryLine {
        kind: "summary",
        counts: r.counts,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
    })];
    for (t, s) in &r.per_type {
        lines.push(serde_json::to_string(&TypeLine { kind: "type", etype: t, score: *s }));
    }
    lines.push(serde_json::to_string(&ErrorLine { kind: "errors", errors: r.errors }));
    for (k, v) in &r.deviation {
        lines.push(serde_json::to_string(&DeviationLine { kind: "deviation", tokens: *k, count: *v }));
    }
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.expect("report lines always serialize"));
        out.push('\n');
    }
    out
}

fn render_text(r: &EvalReport) -> String {
    let mut out = String::new();
    let row = |out: &mut String, name: &str, c: &Counts, p: f64, rc: f64, f: f64| {
        let _ = writeln!(
            out,
            "{name:<20} {:>7} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}",
            c.predictions, c.gold, c.true_positives, p, rc, f
        );
    };
    let _ = writeln!(out, "{:<20} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}", "type", "pred", "gold", "tp", "precision", "recall", "f1");
    for (t, s) in &r.per_type {
        row(&mut out, t, &s.counts, s.precision, s.recall, s.f1);
    }
    row(&mut out, "overall", &r.counts, r.precision, r.recall, r.f1);
    let _ = writeln!(out);
    let _ = writeln!(out, "errors");
    let e = &r.errors;
    for (name, v) in [
        ("type", e.type_error),
        ("span", e.span_error),
        ("type+span", e.type_and_span_error),
        ("spurious", e.spurious),
        ("missed", e.missed),
    ] {
        let _ = writeln!(out, "  {name:<12} {v:>7}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "boundary deviation (tokens)");
    if r.deviation.is_empty() {
        let _ = writeln!(out, "  (none)");
    }
    for (k, v) in &r.deviation {
        let _ = writeln!(out, "  {k:>3} {v:>7}");
    }
    out
}
