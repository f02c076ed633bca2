//! Instruction prompts, supervised targets, and the mixed bilingual
//! fine-tuning corpus.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError, DecodeOptions, Strategy};
use crate::corpus::{read_json_lines, write_lines, CorpusError, SchemaRegistry};
use crate::exec::{self, ExecMode};
use crate::model::{DatasetSchema, Language, Sentence};

pub const DATASET_NAME: &str = "<Dataset-Name>";
pub const TYPE_DEFINITIONS: &str = "<Type-Definitions>";
pub const SENTENCE: &str = "<Sentence>";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template must contain {placeholder} exactly once (found {found})")]
    MissingPlaceholder { placeholder: &'static str, found: usize },
    #[error("sentence {id} belongs to dataset {sentence:?}, not {schema:?}")]
    DatasetMismatch { id: String, sentence: String, schema: String },
    #[error("no schema for dataset {0:?}")]
    SchemaNotFound(String),
    #[error("sentence {id}: {source}")]
    Codec {
        id: String,
        #[source]
        source: CodecError,
    },
    #[error("sentence {id}: encoded target does not decode back to the gold entities")]
    RoundTrip { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    DatasetName,
    TypeDefinitions,
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// An instruction scaffold with the three placeholders
/// `<Dataset-Name>`, `<Type-Definitions>` and `<Sentence>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub strategy: Strategy,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn parse(text: &str, strategy: Strategy) -> Result<Self, PromptError> {
        let slots = [(DATASET_NAME, Slot::DatasetName), (TYPE_DEFINITIONS, Slot::TypeDefinitions), (SENTENCE, Slot::Sentence)];
        let mut found: Vec<(usize, &str, Slot)> = Vec::new();
        for (name, slot) in slots {
            let hits: Vec<usize> = text.match_indices(name).map(|(i, _)| i).collect();
            if hits.len() != 1 {
                return Err(PromptError::MissingPlaceholder { placeholder: name, found: hits.len() });
            }
            found.push((hits[0], name, slot));
        }
        found.sort_by_key(|f| f.0);
        let mut pieces = Vec::new();
        let mut cursor = 0;
        for (at, name, slot) in found {
            if at > cursor {
                pieces.push(Piece::Text(text[cursor..at].to_string()));
            }
            pieces.push(Piece::Slot(slot));
            cursor = at + name.len();
        }
        if cursor < text.len() {
            pieces.push(Piece::Text(text[cursor..].to_string()));
        }
        Ok(PromptTemplate { strategy, pieces })
    }

    /// The built-in template for `strategy`.
    pub fn builtin(strategy: Strategy) -> Self {
        let text = match strategy {
            Strategy::Json => include_str!("../templates/json.txt"),
            Strategy::Html => include_str!("../templates/html.txt"),
            Strategy::Symbolic => include_str!("../templates/symbolic.txt"),
        };
        Self::parse(text, strategy).expect("built-in templates are well formed")
    }

    pub fn from_file(path: impl AsRef<Path>, strategy: Strategy) -> Result<Self, PromptTemplateFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptTemplateFileError { path: path.display().to_string(), reason: e.to_string() })?;
        Self::parse(&text, strategy)
            .map_err(|e| PromptTemplateFileError { path: path.display().to_string(), reason: e.to_string() })
    }

    fn render_pieces(&self, pieces: &[Piece], schema: &DatasetSchema, sentence: &str, out: &mut String) {
        for p in pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::DatasetName) => out.push_str(&schema.name),
                Piece::Slot(Slot::TypeDefinitions) => out.push_str(&type_definitions(schema)),
                Piece::Slot(Slot::Sentence) => out.push_str(sentence),
            }
        }
    }

    fn sentence_slot(&self) -> usize {
        self.pieces.iter().position(|p| *p == Piece::Slot(Slot::Sentence)).expect("parsed templates hold every slot")
    }

    /// Recovers the sentence embedded in a prompt rendered from this
    /// template with `schema`.
    pub fn extract_sentence<'p>(&self, prompt: &'p str, schema: &DatasetSchema) -> Option<&'p str> {
        let k = self.sentence_slot();
        let mut prefix = String::new();
        self.render_pieces(&self.pieces[..k], schema, "", &mut prefix);
        let mut suffix = String::new();
        self.render_pieces(&self.pieces[k + 1..], schema, "", &mut suffix);
        if prompt.len() < prefix.len() + suffix.len() {
            return None;
        }
        prompt.strip_prefix(prefix.as_str())?.strip_suffix(suffix.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("template {path}: {reason}")]
pub struct PromptTemplateFileError {
    pub path: String,
    pub reason: String,
}

/// `name: definition` lines in schema order.
pub fn type_definitions(schema: &DatasetSchema) -> String {
    schema.types.iter().map(|t| format!("{}: {}", t.name, t.definition)).collect::<Vec<_>>().join("\n")
}

/// Fills the template for one sentence. Also the zero-shot path: pass the
/// schema of a dataset never seen in training.
pub fn render_prompt(s: &Sentence, schema: &DatasetSchema, tmpl: &PromptTemplate) -> Result<String, PromptError> {
    if s.dataset != schema.name {
        return Err(PromptError::DatasetMismatch {
            id: s.id.clone(),
            sentence: s.dataset.clone(),
            schema: schema.name.clone(),
        });
    }
    let mut out = String::new();
    tmpl.render_pieces(&tmpl.pieces, schema, &s.text, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub dataset: String,
    pub language: Language,
    pub id: String,
    pub strategy: Strategy,
}

/// One supervised example: `{"instruction", "output", "meta"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub instruction: String,
    pub output: String,
    pub meta: RecordMeta,
}

pub fn build_training_record(
    s: &Sentence,
    schema: &DatasetSchema,
    tmpl: &PromptTemplate,
) -> Result<TrainingRecord, PromptError> {
    let instruction = render_prompt(s, schema, tmpl)?;
    let tagged = codec::encode(tmpl.strategy, s, schema).map_err(|source| PromptError::Codec { id: s.id.clone(), source })?;
    let back = codec::decode(tmpl.strategy, &tagged.payload, schema, s, &DecodeOptions::default());
    if back.failed || back.entities != s.sorted_entities() {
        return Err(PromptError::RoundTrip { id: s.id.clone() });
    }
    Ok(TrainingRecord {
        instruction,
        output: tagged.payload,
        meta: RecordMeta { dataset: s.dataset.clone(), language: s.language, id: s.id.clone(), strategy: tmpl.strategy },
    })
}

#[derive(Debug, Default)]
pub struct TrainingSet {
    pub records: Vec<TrainingRecord>,
    /// Sentences that could not be turned into records, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Builds records for every sentence, preserving input order.
pub fn build_training_set(
    sentences: &[Sentence],
    schemas: &SchemaRegistry,
    tmpl: &PromptTemplate,
    mode: ExecMode,
) -> TrainingSet {
    let results = exec::map(mode, sentences, |s| {
        let schema = schemas.get(&s.dataset).ok_or_else(|| PromptError::SchemaNotFound(s.dataset.clone()))?;
        build_training_record(s, schema, tmpl)
    });
    let mut set = TrainingSet::default();
    for (s, r) in sentences.iter().zip(results) {
        match r {
            Ok(rec) => set.records.push(rec),
            Err(e) => {
                log::warn!("skipping {}: {e}", s.id);
                set.skipped.push((s.id.clone(), e.to_string()));
            }
        }
    }
    set
}

/// Pools sentences by language, shuffles each pool with `seed`, then
/// alternates zh, en, zh, … until one pool runs out and appends the rest.
pub fn mix_datasets(corpora: &BTreeMap<String, Vec<Sentence>>, seed: u64) -> Vec<Sentence> {
    let mut zh = Vec::new();
    let mut en = Vec::new();
    for s in corpora.values().flatten() {
        match s.language {
            Language::Zh => zh.push(s.clone()),
            Language::En => en.push(s.clone()),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    zh.shuffle(&mut rng);
    en.shuffle(&mut rng);
    let mut out = Vec::with_capacity(zh.len() + en.len());
    let mut zh = zh.into_iter();
    let mut en = en.into_iter();
    loop {
        match (zh.next(), en.next()) {
            (None, None) => break,
            (a, b) => out.extend(a.into_iter().chain(b)),
        }
    }
    out
}

pub fn emit_finetune_file(records: &[TrainingRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_lines(
        path.as_ref(),
        records.iter().map(|r| serde_json::to_string(r).expect("training records always serialize")),
    )
}

pub fn load_finetune_file(path: impl AsRef<Path>) -> Result<Vec<TrainingRecord>, CorpusError> {
    read_json_lines(path.as_ref())
}
