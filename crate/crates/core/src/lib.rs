//! Conversational memory indexing: extraction, flat and graph indexes,
//! maintenance, retrieval and evaluation.

pub mod backend;
pub mod cli;
pub mod engine;
pub mod error;
pub mod eval;
pub mod extraction;
pub mod flat;
pub mod graph;
pub mod maintenance;
pub mod model;
pub mod synthetic;
pub mod text;

pub use error::{Error, Result};
