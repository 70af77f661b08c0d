//! Episodic-memory augmentation for causal language models.
//!
//! A TF-IDF index over timestamped news serves as the memory. For each query
//! document the first `k` sentences retrieve candidates, a filter picks one
//! context document, and the document is scored with that context inserted
//! after its first `k` sentences. Perplexity is normalized by word count.

pub mod corpus;
pub mod index;
pub mod lm;
pub mod protocol;
pub mod retrieval;
pub mod reference;
pub mod scoring;

/// Single-precision toy model, the default for training and scoring.
pub type Lm32 = lm::TransformerLm<f32>;
/// Double-precision toy model, used for gradient checks.
pub type Lm64 = lm::TransformerLm<f64>;
pub type ModelScorer32 = protocol::ModelScorer<f32>;
pub type ModelScorer64 = protocol::ModelScorer<f64>;
