use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lines::{self, Line};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub name: String,
    pub goal: String,
    pub context_clauses: Vec<String>,
    /// Step texts without numbers; numbering is applied when rendering.
    pub steps: Vec<String>,
    pub result_clause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExampleLibrary {
    pub examples: Vec<PromptExample>,
}

impl ExampleLibrary {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&PromptExample> {
        self.examples.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LibraryError {
    #[error("line {0}: malformed example line")]
    MalformedLine(usize),
    #[error("line {0}: field appears before any `example:` line")]
    OrphanField(usize),
    #[error("example `{0}` is missing its goal")]
    MissingGoal(String),
    #[error("example `{0}` has no steps")]
    NoSteps(String),
    #[error("example `{name}` step {step} starts with a step number")]
    NumberedStep { name: String, step: usize },
}

fn finish(example: PromptExample) -> Result<PromptExample, LibraryError> {
    if example.goal.is_empty() {
        return Err(LibraryError::MissingGoal(example.name));
    }
    if example.steps.is_empty() {
        return Err(LibraryError::NoSteps(example.name));
    }
    for (i, step) in example.steps.iter().enumerate() {
        let digits = step.len() - step.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        if digits > 0 && step[digits..].starts_with('.') {
            return Err(LibraryError::NumberedStep {
                name: example.name,
                step: i + 1,
            });
        }
    }
    Ok(example)
}

/// Parses an example-library file (`example:`, `goal:`, repeated
/// `context:`/`step:`, optional `result:`).
pub fn load_library(text: &str) -> Result<ExampleLibrary, LibraryError> {
    let mut examples = Vec::new();
    let mut current: Option<PromptExample> = None;
    for line in lines::keyed_lines(text) {
        let Line { number, key, value } = line.map_err(LibraryError::MalformedLine)?;
        let value = lines::collapse_ws(value);
        if key == "example" {
            if let Some(done) = current.take() {
                examples.push(finish(done)?);
            }
            current = Some(PromptExample {
                name: value,
                goal: String::new(),
                context_clauses: Vec::new(),
                steps: Vec::new(),
                result_clause: None,
            });
            continue;
        }
        let example = current.as_mut().ok_or(LibraryError::OrphanField(number))?;
        match key {
            "goal" if example.goal.is_empty() => example.goal = value,
            "context" => example.context_clauses.push(value),
            "step" => example.steps.push(value),
            "result" if example.result_clause.is_none() => example.result_clause = Some(value),
            _ => return Err(LibraryError::MalformedLine(number)),
        }
    }
    if let Some(done) = current {
        examples.push(finish(done)?);
    }
    Ok(ExampleLibrary { examples })
}
