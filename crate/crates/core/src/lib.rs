//! Privacy-aware conversational memory gateway.
//!
//! Stores dialogues and extracted memories as append-only event logs, runs
//! privacy inference over them, and applies user edits atomically so the
//! next prompt only sees what the user chose to keep.

pub mod api;
pub mod config;
pub mod conversation;
pub mod edits;
pub mod engine;
pub mod error;
pub mod ids;
pub mod inference;
pub mod llm;
pub mod memory;
pub mod metrics;
pub mod persistence;
pub mod sensitivity;

pub use engine::{ChatResponse, Engine, EngineOptions, SchedulerMode, Strategy};
pub use error::{Error, Result};
