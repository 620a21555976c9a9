//! Construction, derivation and evaluation of an analogy knowledge base built
//! from ConceptNet and Wikidata.

pub mod curation;
pub mod dataset;
pub mod embed;
pub mod eval;
pub mod error;
pub mod filter;
pub mod ingest;
pub mod jsonl;
pub mod kb;
pub mod linker;
pub mod llm;

pub use error::{Error, Result};
