//! Grounding-based attention priors for attention VQA models.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod exec;
pub mod grounder;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod priors;
pub mod refine;
pub mod treebank;
pub mod vocab;

pub use error::{GapError, Result};
