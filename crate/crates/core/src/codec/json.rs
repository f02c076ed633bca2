use serde::Serialize;
use serde_json::Value;

use super::{finish, nearest_occurrence, DecodeOutcome, Diagnostic, Strategy, TaggedText};
use crate::model::{DatasetSchema, EntitySpan, Sentence};

#[derive(Serialize)]
struct JsonEntity<'a> {
    start_idx: usize,
    end_idx: usize,
    #[serde(rename = "type")]
    etype: &'a str,
    entity: &'a str,
}

/// Records sorted by `(start, end, type)`.
pub fn encode_json(sentence: &Sentence) -> TaggedText {
    let sorted = sentence.sorted_entities();
    let records: Vec<JsonEntity> = sorted
        .iter()
        .map(|e| JsonEntity { start_idx: e.start, end_idx: e.end, etype: &e.etype, entity: &e.text })
        .collect();
    TaggedText {
        strategy: Strategy::Json,
        payload: serde_json::to_string(&records).expect("entity records always serialize"),
        dataset: sentence.dataset.clone(),
    }
}

/// Parses the payload, tolerating prose or code fences around the array.
fn parse_payload(payload: &str) -> Option<Value> {
    let trimmed = payload.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    let (open, close) = (trimmed.find('[')?, trimmed.rfind(']')?);
    if open >= close {
        return None;
    }
    serde_json::from_str(&trimmed[open..=close]).ok()
}

fn index_field(obj: &serde_json::Map<String, Value>, key: &str) -> Option<usize> {
    match obj.get(key)? {
        Value::Number(n) => n.as_u64().map(|v| v as usize),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Decodes a JSON payload against its source sentence.
///
/// A record is accepted as-is when its indices are in range and select its
/// `entity` text. Otherwise the entity text wins: the occurrence of it in the
/// source closest to the claimed start is used.
pub fn decode_json(payload: &str, schema: &DatasetSchema, source: &Sentence) -> DecodeOutcome {
    let Some(value) = parse_payload(payload) else {
        return DecodeOutcome::failure(Diagnostic::unparseable("payload is not valid JSON"));
    };
    let Value::Array(items) = value else {
        return DecodeOutcome::failure(Diagnostic::unparseable("payload is not a JSON array"));
    };
    let chars: Vec<char> = source.text.chars().collect();
    let mut entities = Vec::new();
    let mut diags = Vec::new();
    for (k, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else {
            diags.push(Diagnostic::dropped(format!("record {k}: not an object")));
            continue;
        };
        let (Some(etype), Some(entity)) =
            (obj.get("type").and_then(Value::as_str), obj.get("entity").and_then(Value::as_str))
        else {
            diags.push(Diagnostic::dropped(format!("record {k}: missing type or entity field")));
            continue;
        };
        if !schema.has_type(etype) {
            diags.push(Diagnostic::dropped(format!("record {k}: unknown type {etype:?}")));
            continue;
        }
        let start = index_field(obj, "start_idx");
        let end = index_field(obj, "end_idx");
        let needle: Vec<char> = entity.chars().collect();
        if let (Some(s), Some(e)) = (start, end) {
            if s < e && e <= chars.len() && chars[s..e] == needle[..] {
                entities.push(EntitySpan::new(s, e, etype, entity));
                continue;
            }
        }
        match nearest_occurrence(&chars, &needle, start.unwrap_or(0)) {
            Some(s) => {
                let e = s + needle.len();
                diags.push(Diagnostic::repair(format!(
                    "record {k}: {entity:?} moved from ({}, {}) to ({s}, {e})",
                    fmt_idx(start),
                    fmt_idx(end)
                )));
                entities.push(EntitySpan::new(s, e, etype, entity));
            }
            None => diags.push(Diagnostic::dropped(format!("record {k}: {entity:?} does not occur in the source"))),
        }
    }
    finish(entities, diags, false)
}

fn fmt_idx(v: Option<usize>) -> String {
    v.map_or_else(|| "?".to_string(), |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::DiagnosticKind;
    use crate::model::Language;

    fn schema() -> DatasetSchema {
        DatasetSchema::new("GENIA", Language::En, &[("DNA", ""), ("Protein", ""), ("RNA", "")])
    }

    fn nested_example() -> Sentence {
        Sentence::new("g1", "GENIA", Language::En, "IL-5 promoter/enhancer-luciferase gene construct")
            .with_entity(23, 33, "Protein")
            .with_entity(0, 48, "DNA")
            .with_entity(0, 4, "Protein")
    }

    #[test]
    fn empty_sentence_encodes_to_empty_array() {
        let s = Sentence::new("x", "GENIA", Language::En, "nothing here");
        assert_eq!(encode_json(&s).payload, "[]");
    }

    #[test]
    fn nested_example_records_are_sorted() {
        let t = encode_json(&nested_example());
        assert_eq!(
            t.payload,
            concat!(
                r#"[{"start_idx":0,"end_idx":4,"type":"Protein","entity":"IL-5"},"#,
                r#"{"start_idx":0,"end_idx":48,"type":"DNA","entity":"IL-5 promoter/enhancer-luciferase gene construct"},"#,
                r#"{"start_idx":23,"end_idx":33,"type":"Protein","entity":"luciferase"}]"#
            )
        );
        let out = decode_json(&t.payload, &schema(), &nested_example());
        assert_eq!(out.entities, nested_example().sorted_entities());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn wrong_indices_are_repaired_from_entity_text() {
        let payload = r#"[{"start_idx":22,"end_idx":33,"type":"Protein","entity":"luciferase"}]"#;
        let out = decode_json(payload, &schema(), &nested_example());
        assert_eq!(out.entities, vec![EntitySpan::new(23, 33, "Protein", "luciferase")]);
        assert_eq!(out.count(DiagnosticKind::Repair), 1);
    }

    #[test]
    fn garbage_payloads_fail() {
        assert!(decode_json("not an array", &schema(), &nested_example()).failed);
        assert!(decode_json(r#"{"a":1}"#, &schema(), &nested_example()).failed);
    }

    #[test]
    fn tolerates_prose_around_array() {
        let payload = "Sure:\n```json\n[{\"start_idx\":0,\"end_idx\":4,\"type\":\"Protein\",\"entity\":\"IL-5\"}]\n```";
        let out = decode_json(payload, &schema(), &nested_example());
        assert_eq!(out.entities.len(), 1);
        assert!(!out.failed);
    }

    #[test]
    fn unknown_types_missing_text_and_duplicates_are_dropped() {
        let payload = r#"[
            {"start_idx":0,"end_idx":4,"type":"Gene","entity":"IL-5"},
            {"start_idx":0,"end_idx":4,"type":"Protein","entity":"IL-9"},
            {"start_idx":0,"end_idx":4,"type":"Protein"},
            {"start_idx":0,"end_idx":4,"type":"Protein","entity":"IL-5"},
            {"start_idx":9,"end_idx":2,"type":"Protein","entity":"IL-5"},
            7
        ]"#;
        let out = decode_json(payload, &schema(), &nested_example());
        assert_eq!(out.entities, vec![EntitySpan::new(0, 4, "Protein", "IL-5")]);
        // Gene, IL-9, missing entity, duplicate, non-object
        assert_eq!(out.count(DiagnosticKind::Dropped), 5);
        assert_eq!(out.count(DiagnosticKind::Repair), 1);
    }
}
