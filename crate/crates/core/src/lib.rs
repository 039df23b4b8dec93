//! Situated prompting toolkit for agents that learn tasks from a completion
//! model: scene description, prompt rendering, a cached completion gateway,
//! lexicon-guided iterative decoding, restricted-grammar step parsing,
//! experiment sweeps with rating aggregation, and instructor sessions.

mod lines;

pub mod decoder;
pub mod defaults;
pub mod eval;
pub mod gateway;
pub mod prompt;
pub mod scene;
pub mod session;
pub mod steps;
