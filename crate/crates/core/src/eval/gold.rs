use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lines;
use crate::steps::DETERMINERS;

/// Preferred step sequences for one target object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub task: String,
    pub object_index: usize,
    /// Alternatives; each is a list of normalized steps.
    pub sequences: Vec<Vec<String>>,
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GoldStandard {
    entries: BTreeMap<(String, usize), GoldEntry>,
}

impl GoldStandard {
    pub fn get(&self, task: &str, object_index: usize) -> Option<&GoldEntry> {
        self.entries.get(&(task.to_string(), object_index))
    }

    pub fn insert(&mut self, entry: GoldEntry) {
        self.entries.insert((entry.task.clone(), entry.object_index), entry);
    }

    /// Adds every entry of `other`, replacing duplicates.
    pub fn merge(&mut self, other: GoldStandard) {
        self.entries.extend(other.entries);
    }

    pub fn entries(&self) -> impl Iterator<Item = &GoldEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GoldError {
    #[error("line {0}: malformed gold line")]
    MalformedLine(usize),
    #[error("line {0}: expected `gold: <task> / <object-index>`")]
    BadHeader(usize),
    #[error("line {0}: field appears before any `gold:` line")]
    OrphanField(usize),
    #[error("gold entry `{0} / {1}` has an empty sequence")]
    EmptySequence(String, usize),
    #[error("line {0}: unknown field `{1}`")]
    UnknownField(usize, String),
}

/// Lowercases, strips a leading step number, trailing punctuation and
/// determiners, and collapses whitespace.
pub fn normalize_step(step: &str) -> String {
    let s = step.trim();
    let s = match s.split_once(". ") {
        Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => rest,
        _ => s,
    };
    let s = s.trim_end_matches(['.', '!', '?', ';', ',']);
    s.split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| !DETERMINERS.contains(&w.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn finish(entry: Option<GoldEntry>, out: &mut GoldStandard) -> Result<(), GoldError> {
    if let Some(e) = entry {
        if e.sequences.iter().any(Vec::is_empty) {
            return Err(GoldError::EmptySequence(e.task, e.object_index));
        }
        out.insert(e);
    }
    Ok(())
}

/// Reads `gold: <task> / <index>` blocks of `step:` lines; `alt:` starts
/// another acceptable sequence and `summary:` names the intended outcome.
pub fn load_gold(text: &str) -> Result<GoldStandard, GoldError> {
    let mut out = GoldStandard::default();
    let mut current: Option<GoldEntry> = None;
    for line in lines::keyed_lines(text) {
        let line = line.map_err(GoldError::MalformedLine)?;
        if line.key == "gold" {
            finish(current.take(), &mut out)?;
            let (task, index) = line.value.rsplit_once('/').ok_or(GoldError::BadHeader(line.number))?;
            let object_index = index.trim().parse().map_err(|_| GoldError::BadHeader(line.number))?;
            current = Some(GoldEntry {
                task: lines::collapse_ws(task),
                object_index,
                sequences: vec![Vec::new()],
                summary: None,
            });
            continue;
        }
        let entry = current.as_mut().ok_or(GoldError::OrphanField(line.number))?;
        match line.key {
            "step" => entry.sequences.last_mut().unwrap().push(normalize_step(line.value)),
            "alt" => entry.sequences.push(Vec::new()),
            "summary" => entry.summary = Some(line.value.to_string()),
            other => return Err(GoldError::UnknownField(line.number, other.to_string())),
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}
