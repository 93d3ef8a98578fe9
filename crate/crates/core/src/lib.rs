//! Hallucination-span detection for LLM answers.
//!
//! One model extracts candidate spans, the others score each span, and the
//! mean score decides the label. Every model takes the extractor role once.
//! Extracted text is mapped back to answer offsets with Levenshtein-based
//! fuzzy matching, and predictions are scored with character-level IoU and
//! Spearman correlation of per-character probabilities.
//!
//! - [`spans`]: code-point spans, labels and samples
//! - [`fuzzy`]: edit distance, similarity, partial ratio, span localization
//! - [`prompting`]: prompt templates and response parsing
//! - [`backends`]: chat-completion client, disk cache, deterministic mock
//! - [`ensemble`]: rotation, adjudication, consensus and cross-run merging
//! - [`metrics`]: IoU, correlation and per-language scoring
//! - [`ingest`]: JSONL datasets and planted corpora
//! - [`cli`]: the `halspan` command line

pub mod backends;
pub mod cli;
pub mod ensemble;
pub mod fuzzy;
pub mod ingest;
pub mod metrics;
pub mod prompting;
pub mod spans;
