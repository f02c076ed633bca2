use super::{
    align_to_source, find_crossing, finish, nearest_occurrence, nesting_events, CodecError, DecodeOptions,
    DecodeOutcome, Diagnostic, Strategy, TaggedText,
};
use crate::model::{DatasetSchema, EntitySpan, Sentence};

fn push_escaped(out: &mut String, c: char) {
    if matches!(c, '<' | '>' | '\\') {
        out.push('\\');
    }
    out.push(c);
}

fn push_escaped_str(out: &mut String, s: &str) {
    for c in s.chars() {
        push_escaped(out, c);
    }
}

/// Wraps every entity in `<type:entity>` … `</type:entity>` tags.
pub fn encode_html(sentence: &Sentence) -> Result<TaggedText, CodecError> {
    let refs: Vec<&EntitySpan> = sentence.entities.iter().collect();
    find_crossing(Strategy::Html, &refs)?;
    let chars: Vec<char> = sentence.text.chars().collect();
    let (opens, closes) = nesting_events(&refs, chars.len());
    let mut out = String::with_capacity(sentence.text.len() * 2);
    for pos in 0..=chars.len() {
        for e in &closes[pos] {
            out.push_str("</");
            out.push_str(&e.etype);
            out.push(':');
            push_escaped_str(&mut out, &e.text);
            out.push('>');
        }
        for e in &opens[pos] {
            out.push('<');
            out.push_str(&e.etype);
            out.push(':');
            push_escaped_str(&mut out, &e.text);
            out.push('>');
        }
        if let Some(&c) = chars.get(pos) {
            push_escaped(&mut out, c);
        }
    }
    Ok(TaggedText { strategy: Strategy::Html, payload: out, dataset: sentence.dataset.clone() })
}

#[derive(Debug)]
struct Tag {
    closing: bool,
    etype: String,
    entity: String,
}

/// Tries to read a tag starting at `chars[at] == '<'`. Returns the tag and
/// the index just past its closing `>`.
fn read_tag(chars: &[char], at: usize) -> Option<(Tag, usize)> {
    let mut i = at + 1;
    let closing = chars.get(i) == Some(&'/');
    if closing {
        i += 1;
    }
    let mut content = String::new();
    while i < chars.len() {
        match chars[i] {
            '\\' if i + 1 < chars.len() => {
                content.push(chars[i + 1]);
                i += 2;
            }
            '>' => {
                let (etype, entity) = content.split_once(':')?;
                let etype = etype.trim();
                if etype.is_empty() {
                    return None;
                }
                return Some((Tag { closing, etype: etype.to_string(), entity: entity.to_string() }, i + 1));
            }
            '<' | '\n' => return None,
            c => {
                content.push(c);
                i += 1;
            }
        }
    }
    None
}

struct Open {
    etype: String,
    entity: String,
    pos: usize,
}

struct Pair {
    etype: String,
    entity: String,
    start: usize,
    end: usize,
}

/// Decodes an HTML-tagged payload.
///
/// Tags are matched with a stack keyed on `(type, entity)`. The tag-stripped
/// text is aligned to the source to recover offsets; when the aligned slice
/// disagrees with the tag's embedded entity text, the entity text is searched
/// for near the aligned position.
pub fn decode_html(payload: &str, schema: &DatasetSchema, source: &Sentence, opts: &DecodeOptions) -> DecodeOutcome {
    let chars: Vec<char> = payload.chars().collect();
    let mut plain = String::with_capacity(payload.len());
    let mut plain_len = 0usize;
    let mut stack: Vec<Open> = Vec::new();
    let mut pairs: Vec<Pair> = Vec::new();
    let mut diags = Vec::new();

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\\' && i + 1 < chars.len() {
            plain.push(chars[i + 1]);
            plain_len += 1;
            i += 2;
            continue;
        }
        if c == '<' {
            if let Some((tag, next)) = read_tag(&chars, i) {
                i = next;
                if !tag.closing {
                    stack.push(Open { etype: tag.etype, entity: tag.entity, pos: plain_len });
                    continue;
                }
                let exact = stack.iter().rposition(|o| o.etype == tag.etype && o.entity == tag.entity);
                let found = exact.or_else(|| stack.iter().rposition(|o| o.etype == tag.etype));
                let Some(k) = found else {
                    diags.push(Diagnostic::dropped(format!(
                        "closing tag </{}:{}> has no opening tag",
                        tag.etype, tag.entity
                    )));
                    continue;
                };
                for o in stack.drain(k + 1..).rev() {
                    diags.push(Diagnostic::dropped(format!("tag <{}:{}> is never closed", o.etype, o.entity)));
                }
                let open = stack.pop().expect("index k is in the stack");
                if exact.is_none() {
                    diags.push(Diagnostic::repair(format!(
                        "closing tag </{}:{}> matched to <{}:{}>",
                        tag.etype, tag.entity, open.etype, open.entity
                    )));
                }
                pairs.push(Pair { etype: open.etype, entity: open.entity, start: open.pos, end: plain_len });
                continue;
            }
        }
        plain.push(c);
        plain_len += 1;
        i += 1;
    }
    for o in stack {
        diags.push(Diagnostic::dropped(format!("tag <{}:{}> is never closed", o.etype, o.entity)));
    }

    let alignment = match align_to_source(&plain, &source.text, opts.max_edit_ratio) {
        Ok(a) => a,
        Err(e) => {
            diags.push(Diagnostic::rejected(e.to_string()));
            return finish(Vec::new(), diags, true);
        }
    };
    let src: Vec<char> = source.text.chars().collect();
    let plain: Vec<char> = plain.chars().collect();
    let mut entities = Vec::new();
    for p in pairs {
        if !schema.has_type(&p.etype) {
            diags.push(Diagnostic::dropped(format!("unknown type {:?} for {:?}", p.etype, p.entity)));
            continue;
        }
        let inner: String = plain[p.start..p.end].iter().collect();
        if inner != p.entity {
            diags.push(Diagnostic::repair(format!("tagged text {inner:?} differs from tag entity {:?}", p.entity)));
        }
        let mapped = alignment.map_span(p.start, p.end);
        let needle: Vec<char> = p.entity.chars().collect();
        if let Some((s, e)) = mapped {
            if src[s..e] == needle[..] {
                entities.push(EntitySpan::new(s, e, p.etype, p.entity));
                continue;
            }
        }
        let anchor = mapped.map(|(s, _)| s).unwrap_or_else(|| {
            alignment.source_offsets.get(p.start).copied().unwrap_or(src.len())
        });
        if let Some(s) = nearest_occurrence(&src, &needle, anchor) {
            let e = s + needle.len();
            diags.push(Diagnostic::repair(format!("{:?} located by its tag text at ({s}, {e})", p.entity)));
            entities.push(EntitySpan::new(s, e, p.etype, p.entity));
        } else if let Some((s, e)) = mapped {
            let text: String = src[s..e].iter().collect();
            diags.push(Diagnostic::repair(format!(
                "tag text {:?} not in source; kept aligned span {text:?}",
                p.entity
            )));
            entities.push(EntitySpan::new(s, e, p.etype, text));
        } else {
            diags.push(Diagnostic::dropped(format!("{:?} could not be located in the source", p.entity)));
        }
    }
    finish(entities, diags, false)
}
