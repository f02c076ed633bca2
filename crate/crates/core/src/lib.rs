//! Toolkit for generative biomedical named-entity recognition.
//!
//! The pipeline turns annotated sentences into instruction-tuning records
//! ([`promptgen`]), runs a generation backend over the prompts
//! ([`inference`]), decodes the generated tagging formats back into
//! character-exact spans ([`codec`]), scores them ([`eval`]) and optionally
//! filters them with a span-validity scorer ([`selector`]).

pub mod codec;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod inference;
pub mod model;
pub mod promptgen;
pub mod selector;

pub use codec::{DecodeOptions, DecodeOutcome, Strategy, TaggedText};
pub use corpus::SchemaRegistry;
pub use exec::ExecMode;
pub use model::{DatasetSchema, EntitySpan, EntityType, Language, Sentence, Token};
