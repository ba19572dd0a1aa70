//! Referential-game simulator: a speaker learns to describe a target image
//! among distractors for a frozen listener, optionally reranking its own
//! samples with a learned internal model of that listener.

pub mod agents;
pub mod config;
pub mod distractors;
pub mod error;
pub mod evalkit;
pub mod seed;
pub mod tom;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
