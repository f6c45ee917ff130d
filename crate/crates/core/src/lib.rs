//! Late-interaction retrieval with whole-word (bag of unique words) reduction.
//!
//! The pipeline runs text through [`tokenizer`] and an [`encoder`], reduces the
//! encoder output to one CLS vector plus one gated vector per unique stemmed
//! word ([`reduce`]), scores query/passage pairs ([`score`]), and serves them
//! from a dense CLS index, a per-document word store and an inverted index over
//! word hashes ([`index`], [`retrieve`]). [`train`] fits the reduction heads
//! with analytic gradients and [`evaluation`] holds the TREC metrics and the
//! random-effects meta-analysis.

mod binio;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod linalg;
pub mod reduce;
pub mod retrieve;
pub mod score;
pub mod synthetic;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
