//! Few-shot prompt construction for a completion model.
//!
//! A prompt is a block of developer-authored examples followed by a partial
//! task that the model completes with numbered steps:
//!
//! ```text
//! (EXAMPLES) (TASK) Goal: ... Task context: ... Steps:
//! 1. ...
//! (END TASK)
//!
//! (END EXAMPLES)
//! (TASK) Goal: ... Task context: ... Steps: 1.
//! ```
//!
//! Every axis is set through [`PromptConfig`]: phrasing style, paired
//! delimiters, example count, how much of the scene is described, whether
//! object features are listed, and whether a goal statement is elicited
//! ahead of the steps.

mod library;
mod render;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::scene::ContextScope;
pub use library::{load_library, ExampleLibrary, LibraryError, PromptExample};
pub use render::{
    render_feature_clauses, render_goal_eliciting_prompt, render_prompt, render_prompt_with_steps,
    END_TASK, RESULT_CLOSE, RESULT_OPEN,
};

use crate::scene::SceneError;

pub const MAX_EXAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Terse,
    Colloquial,
    Predicate,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Terse, Style::Colloquial, Style::Predicate];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Terse => "terse",
            Style::Colloquial => "colloquial",
            Style::Predicate => "predicate",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "terse" => Ok(Style::Terse),
            "colloquial" => Ok(Style::Colloquial),
            "predicate" => Ok(Style::Predicate),
            other => Err(format!("unknown style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScope {
    NameOnly,
    Full,
}

impl FeatureScope {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureScope::NameOnly => "name-only",
            FeatureScope::Full => "full",
        }
    }
}

impl fmt::Display for FeatureScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "name-only" | "nameonly" | "none" => Ok(FeatureScope::NameOnly),
            "full" => Ok(FeatureScope::Full),
            other => Err(format!("unknown feature scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub style: Style,
    pub delimiters: bool,
    pub n_examples: usize,
    pub context_scope: ContextScope,
    pub feature_scope: FeatureScope,
    pub elicit_goal: bool,
}

impl Default for PromptConfig {
    /// Terse, delimited, one example, partial context, full features.
    fn default() -> Self {
        Self {
            style: Style::Terse,
            delimiters: true,
            n_examples: 1,
            context_scope: ContextScope::Partial,
            feature_scope: FeatureScope::Full,
            elicit_goal: false,
        }
    }
}

/// Template slot bindings used while rendering the partial task.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptSlots {
    pub object: String,
    pub feature_clauses: Vec<String>,
    pub object_location: String,
    pub named_location: String,
    pub agent_location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub stop_sequences: Vec<String>,
    pub slots: PromptSlots,
}

impl RenderedPrompt {
    /// Number of the step the model is expected to write next, when the text
    /// ends right after a `"<k>. "` marker.
    pub fn open_step_number(&self) -> Option<usize> {
        let body = self.text.strip_suffix(". ")?;
        let digits = body.len() - body.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        if digits == 0 {
            return None;
        }
        body[body.len() - digits..].parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("requested {requested} examples but the library holds {available}")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error("at most {MAX_EXAMPLES} examples may be used, got {0}")]
    TooManyExamples(usize),
    #[error("example `{0}` has no result clause")]
    ExampleMissingResult(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}
