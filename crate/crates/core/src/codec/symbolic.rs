use std::collections::HashSet;

use super::align::edit_distance;
use super::{
    align_to_source, find_crossing, finish, nesting_events, CodecError, DecodeOptions, DecodeOutcome, Diagnostic,
    Strategy, TaggedText,
};
use crate::model::{DatasetSchema, EntitySpan, Sentence};

fn push_escaped(out: &mut String, c: char) {
    match c {
        '[' | ']' | '\\' => {
            out.push('\\');
            out.push(c);
        }
        '\n' => out.push_str("\\n"),
        '\r' => out.push_str("\\r"),
        c => out.push(c),
    }
}

/// One `"<type>: <sentence>"` line per schema type, brackets around the
/// entities of that type.
pub fn encode_symbolic(sentence: &Sentence, schema: &DatasetSchema) -> Result<TaggedText, CodecError> {
    if let Some(e) = sentence.entities.iter().find(|e| !schema.has_type(&e.etype)) {
        return Err(CodecError::UnknownType(e.etype.clone()));
    }
    let chars: Vec<char> = sentence.text.chars().collect();
    let mut lines = Vec::with_capacity(schema.types.len());
    for etype in schema.type_names() {
        let of_type: Vec<&EntitySpan> = sentence.entities.iter().filter(|e| e.etype == etype).collect();
        find_crossing(Strategy::Symbolic, &of_type)?;
        let (opens, closes) = nesting_events(&of_type, chars.len());
        let mut line = String::with_capacity(etype.len() + 2 + sentence.text.len() + 2 * of_type.len());
        line.push_str(etype);
        line.push_str(": ");
        for pos in 0..=chars.len() {
            line.extend(std::iter::repeat_n(']', closes[pos].len()));
            line.extend(std::iter::repeat_n('[', opens[pos].len()));
            if let Some(&c) = chars.get(pos) {
                push_escaped(&mut line, c);
            }
        }
        lines.push(line);
    }
    Ok(TaggedText { strategy: Strategy::Symbolic, payload: lines.join("\n"), dataset: sentence.dataset.clone() })
}

/// Splits a line into its type label and body.
fn split_line(line: &str) -> Option<(&str, &str)> {
    if let Some((label, body)) = line.split_once(": ") {
        return Some((label.trim(), body));
    }
    let t = line.trim_end();
    t.strip_suffix(':').map(|label| (label.trim(), ""))
}

/// Resolves a line label to a schema type: exact, then case-insensitive,
/// then a unique type within edit distance 1.
fn resolve_label<'a>(label: &str, schema: &'a DatasetSchema, used: &HashSet<&str>) -> Option<(&'a str, bool)> {
    if let Some(t) = schema.type_names().find(|t| *t == label) {
        return Some((t, false));
    }
    if let Some(t) = schema.type_names().find(|t| t.eq_ignore_ascii_case(label)) {
        return Some((t, true));
    }
    let near: Vec<&str> =
        schema.type_names().filter(|t| !used.contains(t) && edit_distance(t, label) <= 1).collect();
    match near.as_slice() {
        [t] if !label.is_empty() => Some((t, true)),
        _ => None,
    }
}

/// Bracket-stripped body and the `[start, end)` spans (in stripped
/// coordinates) of matched bracket pairs.
fn parse_body(body: &str, etype: &str, diags: &mut Vec<Diagnostic>) -> (String, Vec<(usize, usize)>) {
    let mut plain = String::with_capacity(body.len());
    let mut len = 0usize;
    let mut stack = Vec::new();
    let mut spans = Vec::new();
    let mut it = body.chars().peekable();
    while let Some(c) = it.next() {
        match c {
            '\\' => match it.peek().copied() {
                Some(n @ ('[' | ']' | '\\')) => {
                    it.next();
                    plain.push(n);
                    len += 1;
                }
                Some('n') => {
                    it.next();
                    plain.push('\n');
                    len += 1;
                }
                Some('r') => {
                    it.next();
                    plain.push('\r');
                    len += 1;
                }
                _ => {
                    plain.push('\\');
                    len += 1;
                }
            },
            '[' => stack.push(len),
            ']' => match stack.pop() {
                Some(start) => spans.push((start, len)),
                None => diags.push(Diagnostic::repair(format!("{etype}: discarded unmatched ']' at {len}"))),
            },
            c => {
                plain.push(c);
                len += 1;
            }
        }
    }
    for start in stack {
        diags.push(Diagnostic::repair(format!("{etype}: discarded unmatched '[' at {start}")));
    }
    (plain, spans)
}

/// Decodes a symbolic payload: one labelled line per type, brackets matched
/// by a stack, and each stripped line aligned to the source sentence.
pub fn decode_symbolic(
    payload: &str,
    schema: &DatasetSchema,
    source: &Sentence,
    opts: &DecodeOptions,
) -> DecodeOutcome {
    let src: Vec<char> = source.text.chars().collect();
    let mut used: HashSet<&str> = HashSet::new();
    let mut entities = Vec::new();
    let mut diags = Vec::new();
    let mut recognized = 0usize;
    let mut rejected = 0usize;

    for raw in payload.split('\n') {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = split_line(line) else {
            diags.push(Diagnostic::dropped(format!("line without a type label: {line:?}")));
            continue;
        };
        let Some((etype, fuzzy)) = resolve_label(label, schema, &used) else {
            diags.push(Diagnostic::dropped(format!("unknown type label {label:?}")));
            continue;
        };
        if !used.insert(etype) {
            diags.push(Diagnostic::dropped(format!("duplicate line for type {etype:?}")));
            continue;
        }
        if fuzzy {
            diags.push(Diagnostic::repair(format!("label {label:?} read as {etype:?}")));
        }
        recognized += 1;

        let (plain, spans) = parse_body(body, etype, &mut diags);
        let alignment = match align_to_source(&plain, &source.text, opts.max_edit_ratio) {
            Ok(a) => a,
            Err(e) => {
                rejected += 1;
                diags.push(Diagnostic::rejected(format!("{etype}: {e}")));
                if !spans.is_empty() {
                    diags.push(Diagnostic::dropped(format!("{etype}: {} entities lost with the line", spans.len())));
                }
                continue;
            }
        };
        for (gs, ge) in spans {
            match alignment.map_span(gs, ge) {
                Some((s, e)) => {
                    let text: String = src[s..e].iter().collect();
                    entities.push(EntitySpan::new(s, e, etype, text));
                }
                None => diags.push(Diagnostic::dropped(format!("{etype}: empty span at {gs}"))),
            }
        }
    }

    if recognized == 0 {
        diags.push(Diagnostic::unparseable("no line starts with a known \"type: \" label"));
        return finish(Vec::new(), diags, true);
    }
    finish(entities, diags, rejected == recognized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DiagnosticKind;
    use crate::model::Language;

    fn schema() -> DatasetSchema {
        DatasetSchema::new(
            "GENIA",
            Language::En,
            &[("DNA", ""), ("Protein", ""), ("RNA", ""), ("Cell_line", ""), ("Cell_type", "")],
        )
    }

    const TEXT: &str = "IL-5 promoter/enhancer-luciferase gene construct";

    fn nested_example() -> Sentence {
        Sentence::new("g1", "GENIA", Language::En, TEXT)
            .with_entity(0, 48, "DNA")
            .with_entity(0, 4, "Protein")
            .with_entity(23, 33, "Protein")
    }

    #[test]
    fn nested_encoding() {
        let t = encode_symbolic(&nested_example(), &schema()).unwrap();
        let expected = [
            format!("DNA: [{TEXT}]"),
            "Protein: [IL-5] promoter/enhancer-[luciferase] gene construct".to_string(),
            format!("RNA: {TEXT}"),
            format!("Cell_line: {TEXT}"),
            format!("Cell_type: {TEXT}"),
        ]
        .join("\n");
        assert_eq!(t.payload, expected);
        let out = decode_symbolic(&t.payload, &schema(), &nested_example(), &DecodeOptions::default());
        assert_eq!(out.entities, nested_example().sorted_entities());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn empty_sentence_has_one_line_per_type() {
        let s = Sentence::new("x", "GENIA", Language::En, "a [b] \\c");
        let t = encode_symbolic(&s, &schema()).unwrap();
        assert_eq!(t.payload.lines().count(), 5);
        assert!(t.payload.lines().all(|l| l.ends_with(": a \\[b\\] \\\\c")));
    }

    #[test]
    fn same_type_nesting_uses_nested_brackets() {
        let s = Sentence::new("x", "GENIA", Language::En, "ABCDEFGHIJ KL")
            .with_entity(0, 10, "Protein")
            .with_entity(0, 4, "Protein");
        let t = encode_symbolic(&s, &schema()).unwrap();
        assert!(t.payload.contains("Protein: [[ABCD]EFGHIJ] KL"));
        let out = decode_symbolic(&t.payload, &schema(), &s, &DecodeOptions::default());
        assert_eq!(out.entities, s.sorted_entities());
    }

    #[test]
    fn crossing_same_type_is_unserializable_but_other_types_are_fine() {
        let crossing = Sentence::new("x", "GENIA", Language::En, "abcdefghij")
            .with_entity(0, 5, "DNA")
            .with_entity(3, 8, "DNA");
        assert!(matches!(encode_symbolic(&crossing, &schema()), Err(CodecError::OverlapUnserializable { .. })));
        let mixed = Sentence::new("x", "GENIA", Language::En, "abcdefghij")
            .with_entity(0, 5, "DNA")
            .with_entity(3, 8, "RNA");
        let t = encode_symbolic(&mixed, &schema()).unwrap();
        let out = decode_symbolic(&t.payload, &schema(), &mixed, &DecodeOptions::default());
        assert_eq!(out.entities, mixed.sorted_entities());
    }

    #[test]
    fn unmatched_opener_is_discarded() {
        let payload = "Protein: [IL-5] promoter/[enhancer-[luciferase] gene construct";
        let out = decode_symbolic(payload, &schema(), &nested_example(), &DecodeOptions::default());
        assert_eq!(
            out.entities,
            vec![EntitySpan::new(0, 4, "Protein", "IL-5"), EntitySpan::new(23, 33, "Protein", "luciferase")]
        );
        assert_eq!(out.count(DiagnosticKind::Repair), 1);
    }

    #[test]
    fn deleted_word_keeps_other_offsets() {
        let payload = "DNA: IL-5 promoter/enhancer-luciferase construct\n\
                       Protein: [IL-5] promoter/enhancer-[luciferase] construct";
        let out = decode_symbolic(payload, &schema(), &nested_example(), &DecodeOptions::default());
        assert_eq!(
            out.entities,
            vec![EntitySpan::new(0, 4, "Protein", "IL-5"), EntitySpan::new(23, 33, "Protein", "luciferase")]
        );
    }

    #[test]
    fn labels_and_structure_problems() {
        let opts = DecodeOptions::default();
        assert!(decode_symbolic("no labels here", &schema(), &nested_example(), &opts).failed);
        let payload = format!("Gene: [{TEXT}]\nProtei: [IL-5]{}\nProtein: [{TEXT}]", &TEXT[4..]);
        let out = decode_symbolic(&payload, &schema(), &nested_example(), &opts);
        // "Protei" resolves to Protein; the later Protein line is a duplicate
        assert_eq!(out.entities, vec![EntitySpan::new(0, 4, "Protein", "IL-5")]);
        assert_eq!(out.count(DiagnosticKind::Dropped), 2);
        assert_eq!(out.count(DiagnosticKind::Repair), 1);
    }

    #[test]
    fn hallucinated_lines_fail() {
        let out = decode_symbolic("Protein: [something] completely different here!!", &schema(), &nested_example(), &DecodeOptions::default());
        assert!(out.failed);
        assert!(out.entities.is_empty());
        assert_eq!(out.count(DiagnosticKind::AlignmentRejected), 1);
    }

    #[test]
    fn newlines_in_text_are_escaped() {
        let s = Sentence::new("x", "GENIA", Language::En, "IL-5\nbinds").with_entity(5, 10, "Protein");
        let t = encode_symbolic(&s, &schema()).unwrap();
        assert_eq!(t.payload.lines().count(), 5);
        let out = decode_symbolic(&t.payload, &schema(), &s, &DecodeOptions::default());
        assert_eq!(out.entities, s.sorted_entities());
    }
}
