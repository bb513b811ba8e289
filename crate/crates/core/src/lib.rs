//! Retrieval-augmented real/fake image classification.
//!
//! Corpus embeddings are kept in an exact cosine index. For each query the
//! closest labeled examples are laid out as an in-context prompt and handed
//! to a responder: either an in-process nearest-neighbour vote or an
//! external vision-language model reached over a line-delimited JSON
//! bridge. The evaluation harness drives that loop over labeled manifests;
//! an adapter trainer for embedding alignment sits alongside it.

pub mod align;
pub mod bridge;
pub mod context;
pub mod degrade;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod index;
pub mod label;
pub mod responder;
pub mod synthetic;

pub use embedding::{cosine_similarity, l2_normalize, EmbeddingVector};
pub use error::{Error, Result};
pub use index::{Hit, RetrievalResult, VectorIndex};
pub use label::Label;
