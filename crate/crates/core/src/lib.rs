//! Allocation-only core of the bundle-generation distillation toolkit.
//!
//! Everything here is pure: data model and validation, category-level
//! Apriori mining, stratified sampling, the subset-hit metrics, embedding
//! retrieval, prompt rendering and reply parsing, the teacher prompt chains,
//! knowledge accumulation and fine-tuning sample construction. File IO,
//! HTTP and the CLI live in the `bundlekd` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod chat;
pub mod corpus;
pub mod digest;
pub mod distiller;
pub mod evaluator;
pub mod knowledge;
pub mod pattern;
pub mod prompting;
pub mod retrieval;
pub mod sampler;
pub mod sft;

pub use chat::{ChatMessage, Role};
pub use distiller::{ChatModel, DistillationTrace, Distilled};
pub use corpus::{Bundle, Dataset, DatasetStats, Domain, Item, Session, SplitSpec};
pub use evaluator::{Aggregation, HitAssignment, Report, SessionEval};
pub use knowledge::{
    CompositeKnowledge, KnowledgeBase, KnowledgeEntry, KnowledgeFormat, KnowledgeKey,
    RuleKnowledge, ThoughtKnowledge,
};
pub use pattern::{Pattern, Transaction};
pub use retrieval::{EmbeddingVector, SessionIndex, TextEmbedder};
pub use sampler::{SampleResult, SamplingSpec, Strategy};
