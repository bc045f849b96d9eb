//! Step-by-step recipe runner: configuration, synthetic QA suites,
//! training, evaluation and ablation grids.

pub mod config;
pub mod eval;
pub mod grid;
pub mod report;
pub mod run;
pub mod tasks;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] tempora_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
