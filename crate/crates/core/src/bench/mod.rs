//! Synthetic benchmark: data generation, metrics and sweeps.

pub mod metrics;
pub mod world;

pub use metrics::{evaluate, grounding_score_topk, iou, recall_at_k, MetricsReport, PhraseScore, RunMetadata};
pub use world::{answer_vocab, generate_world, word_vocab, Dataset, QuestionType, SynthInstance, WorldConfig};
