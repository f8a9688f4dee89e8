//! Semantic-graph based model labeling, selection and reuse for
//! vision-language models.

pub mod cli;
pub mod error;
pub mod fsio;
pub mod graph;
pub mod harness;
pub mod labeling;
pub mod reuse;
pub mod selection;
pub mod store;
pub mod workspace;

pub use error::{MllError, Result};
