//! Batch UNSPSC classification with chat-completion LLMs, scored per
//! hierarchy level.
//!
//! The pipeline is: [`ingest`] purchase records, [`prompt`] them with one of
//! the built-in templates, send them through an [`llm_client`] backend (with
//! responses kept in the [`cache_store`]), [`response_parse`] the replies and
//! aggregate accuracy matrices in [`eval_report`].

pub mod cache_store;
pub mod cli;
pub mod eval_report;
pub mod ingest;
pub mod llm_client;
pub mod par;
pub mod prompt;
pub mod response_parse;
pub mod taxonomy;

pub use taxonomy::{HierarchyLevel, UnspscCode};
