//! Layout-aware transformer encoder: 2-D page embeddings injected into the
//! input embeddings, positional-embedding suppression, and an end-to-end
//! key-information-extraction pipeline over synthetic documents.

pub mod error;
pub mod layout;
pub mod alt_layout;
pub mod doc_model;
pub mod encoder;
pub mod numerics;
pub mod tokenizer;
pub mod parallel;
pub mod extraction;
pub mod synthcorpus;
pub mod pipeline;
pub mod runconfig;
pub mod viz;

pub use error::{Error, Result};
