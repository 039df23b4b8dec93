//! Reading model responses under the agent's restricted grammar.
//!
//! A response is an enumerated step list. Each step must fit
//! `Verb [Particle] ObjectNP [Prep DestNP]`, with the verb drawn from the
//! agent's vocabulary, and every noun phrase must name something the agent
//! can perceive or a location it knows.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::ActionLexicon;
use crate::lines;
use crate::prompt::END_TASK;
use crate::scene::Scene;

pub const DETERMINERS: [&str; 4] = ["a", "an", "the", "all"];
const CONJUNCTIONS: [&str; 3] = ["and", "or", "then"];
const GOAL_PREFIX: &str = "the goal is that ";

static STEP_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^[ \t]*(\d+)\.[ \t]+").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("line {0}: entry outside any section")]
    NoSection(usize),
    #[error("line {0}: unknown section `{1}`")]
    UnknownSection(usize, String),
    #[error("line {0}: verb-particle entry needs exactly two words")]
    BadParticle(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentGrammar {
    pub verbs: ActionLexicon,
    /// verb → particles it combines with (`pick` → {`up`}).
    pub particles: BTreeMap<String, BTreeSet<String>>,
    pub prepositions: BTreeSet<String>,
    /// Locations the agent knows beyond those in the current scene.
    pub known_locations: BTreeSet<String>,
}

impl AgentGrammar {
    pub fn add_verb(&mut self, verb: &str) {
        self.verbs.insert(verb);
    }

    pub fn add_particle_verb(&mut self, verb: &str, particle: &str) {
        self.particles
            .entry(verb.to_lowercase())
            .or_default()
            .insert(particle.to_lowercase());
    }

    pub fn add_location(&mut self, location: &str) {
        self.known_locations.insert(normalize_phrase(location));
    }

    fn is_preposition(&self, word: &str) -> bool {
        self.prepositions.contains(word)
    }
}

/// Parses a grammar file with `verb:`, `verb-particle:`, `preposition:` and
/// `location:` sections, one entry per line.
pub fn load_grammar(text: &str) -> Result<AgentGrammar, GrammarError> {
    let mut grammar = AgentGrammar::default();
    let mut section: Option<String> = None;
    for (number, line) in lines::content_lines(text) {
        let entry = match line.strip_suffix(':') {
            Some(header) => {
                section = Some(header.trim().to_string());
                continue;
            }
            None => match line.split_once(':') {
                Some((header, value)) => {
                    section = Some(header.trim().to_string());
                    value.trim()
                }
                None => line,
            },
        };
        let entry = entry.to_lowercase();
        match section.as_deref() {
            None => return Err(GrammarError::NoSection(number)),
            Some("verb") => grammar.add_verb(&entry),
            Some("verb-particle") => {
                let words: Vec<_> = entry.split_whitespace().collect();
                let [verb, particle] = words[..] else {
                    return Err(GrammarError::BadParticle(number));
                };
                grammar.add_particle_verb(verb, particle);
            }
            Some("preposition") => {
                grammar.prepositions.insert(entry);
            }
            Some("location") => grammar.add_location(&entry),
            Some(other) => return Err(GrammarError::UnknownSection(number, other.to_string())),
        }
    }
    Ok(grammar)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStep {
    pub index: usize,
    /// Step text without its number.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitResponse {
    pub steps: Vec<RawStep>,
    pub terminated_by_delimiter: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("response is empty")]
    EmptyResponse,
    #[error("goal does not match `The goal is that <object> is <preposition> <target>`")]
    GoalPatternMismatch,
}

/// Splits a response into numbered steps. Text before the first marker is
/// step 1, since the prompt already ends with `1.`; a trailing
/// `(END TASK)` is cut off and reported.
pub fn split_steps(response: &str) -> Result<SplitResponse, ParseError> {
    let (body, terminated_by_delimiter) = match response.find(END_TASK) {
        Some(i) => (&response[..i], true),
        None => (response, false),
    };
    let mut steps = Vec::new();
    let mut push = |index: usize, text: &str| {
        let text = text.trim();
        if !text.is_empty() {
            steps.push(RawStep {
                index,
                text: text.to_string(),
            });
        }
    };
    let markers: Vec<_> = STEP_MARKER.captures_iter(body).collect();
    let lead_end = markers.first().map_or(body.len(), |m| m.get(0).unwrap().start());
    push(1, &body[..lead_end]);
    for (i, m) in markers.iter().enumerate() {
        let start = m.get(0).unwrap().end();
        let end = markers.get(i + 1).map_or(body.len(), |n| n.get(0).unwrap().start());
        let index = m[1].parse().unwrap_or(usize::MAX);
        push(index, &body[start..end]);
    }
    if steps.is_empty() {
        return Err(ParseError::EmptyResponse);
    }
    Ok(SplitResponse {
        steps,
        terminated_by_delimiter,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    pub preposition: String,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedStep {
    pub index: usize,
    /// Lowercase, particle folded in: `"pick up"`.
    pub verb: String,
    pub object_phrase: String,
    pub destination: Option<Destination>,
    pub raw: String,
}

impl ParsedStep {
    /// `"<index>. <raw>"`.
    pub fn numbered(&self) -> String {
        format!("{}. {}", self.index, self.raw)
    }

    pub fn noun_phrases(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.object_phrase.as_str()).chain(self.destination.as_ref().map(|d| d.phrase.as_str()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnparsableReason {
    UnknownVerb,
    NoObject,
    TrailingGarbage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnparsableStep {
    pub index: usize,
    pub raw: String,
    pub reason: UnparsableReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepEntry {
    Parsed(ParsedStep),
    Unparsable(UnparsableStep),
}

impl StepEntry {
    pub fn index(&self) -> usize {
        match self {
            StepEntry::Parsed(p) => p.index,
            StepEntry::Unparsable(u) => u.index,
        }
    }

    pub fn raw(&self) -> &str {
        match self {
            StepEntry::Parsed(p) => &p.raw,
            StepEntry::Unparsable(u) => &u.raw,
        }
    }

    pub fn parsed(&self) -> Option<&ParsedStep> {
        match self {
            StepEntry::Parsed(p) => Some(p),
            StepEntry::Unparsable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepList {
    pub steps: Vec<StepEntry>,
    pub terminated_by_delimiter: bool,
}

impl StepList {
    pub fn all_parsed(&self) -> bool {
        self.steps.iter().all(|s| s.parsed().is_some())
    }
}

fn strip_trailing_punctuation(s: &str) -> &str {
    s.trim().trim_end_matches(['.', '!', '?', ';', ',', ':']).trim_end()
}

fn is_determiner(word: &str) -> bool {
    DETERMINERS.contains(&word)
}

/// Lowercases, drops determiners, and collapses whitespace.
pub fn normalize_phrase(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| !is_determiner(w))
        .collect::<Vec<_>>()
        .join(" ")
}

fn noun_phrase(words: &[String]) -> String {
    normalize_phrase(&words.join(" "))
}

/// Parses one step. Never fails: ill-formed input becomes an
/// [`UnparsableStep`] carrying the reason.
pub fn parse_step(index: usize, raw: &str, grammar: &AgentGrammar) -> StepEntry {
    let unparsable = |reason| {
        StepEntry::Unparsable(UnparsableStep {
            index,
            raw: raw.trim().to_string(),
            reason,
        })
    };
    let words: Vec<String> = strip_trailing_punctuation(raw)
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    let Some(first) = words.first() else {
        return unparsable(UnparsableReason::UnknownVerb);
    };
    let (verb, rest) = match words.get(1) {
        Some(second) if grammar.particles.get(first).is_some_and(|p| p.contains(second)) => {
            (format!("{first} {second}"), &words[2..])
        }
        _ if grammar.verbs.contains(first) => (first.clone(), &words[1..]),
        _ => return unparsable(UnparsableReason::UnknownVerb),
    };
    let garbage = rest.iter().any(|w| {
        CONJUNCTIONS.contains(&w.as_str()) || !w.chars().all(|c| c.is_alphanumeric() || c == '\'' || c == '-')
    });
    if garbage {
        return unparsable(UnparsableReason::TrailingGarbage);
    }
    let split = rest.iter().position(|w| grammar.is_preposition(w));
    let (object_words, destination) = match split {
        Some(at) => (&rest[..at], Some((&rest[at], &rest[at + 1..]))),
        None => (rest, None),
    };
    let object_phrase = noun_phrase(object_words);
    if object_phrase.is_empty() {
        return unparsable(UnparsableReason::NoObject);
    }
    let destination = match destination {
        Some((prep, words)) => {
            let phrase = noun_phrase(words);
            if phrase.is_empty() {
                return unparsable(UnparsableReason::TrailingGarbage);
            }
            Some(Destination {
                preposition: prep.clone(),
                phrase,
            })
        }
        None => None,
    };
    StepEntry::Parsed(ParsedStep {
        index,
        verb,
        object_phrase,
        destination,
        raw: raw.trim().to_string(),
    })
}

pub fn parse_steps(split: &SplitResponse, grammar: &AgentGrammar) -> StepList {
    StepList {
        steps: split.steps.iter().map(|s| parse_step(s.index, &s.text, grammar)).collect(),
        terminated_by_delimiter: split.terminated_by_delimiter,
    }
}

pub fn parse_response(response: &str, grammar: &AgentGrammar) -> Result<StepList, ParseError> {
    split_steps(response).map(|split| parse_steps(&split, grammar))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGoal {
    pub object_phrase: String,
    pub relation: String,
    pub target_phrase: String,
    pub raw: String,
}

/// Reads `The goal is that <NP> is <prep> <NP>`.
pub fn parse_goal(response: &str, grammar: &AgentGrammar) -> Result<TaskGoal, ParseError> {
    let raw = response.trim();
    let body = raw.split(crate::prompt::RESULT_CLOSE).next().unwrap_or_default();
    let body = strip_trailing_punctuation(body);
    let lower = body.to_lowercase();
    let rest = lower.strip_prefix(GOAL_PREFIX).ok_or(ParseError::GoalPatternMismatch)?;
    let words: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
    let at = words
        .windows(2)
        .position(|w| w[0] == "is" && grammar.is_preposition(&w[1]))
        .ok_or(ParseError::GoalPatternMismatch)?;
    let object_phrase = noun_phrase(&words[..at]);
    let target_phrase = noun_phrase(&words[at + 2..]);
    if object_phrase.is_empty() || target_phrase.is_empty() {
        return Err(ParseError::GoalPatternMismatch);
    }
    Ok(TaskGoal {
        object_phrase,
        relation: words[at + 1].clone(),
        target_phrase,
        raw: raw.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpretabilityVerdict {
    pub interpretable: bool,
    pub ungrounded_phrases: Vec<String>,
    pub unparsable_steps: usize,
}

/// Interpretable iff every step parsed and every noun phrase names a scene
/// object, a scene location, or a location the grammar knows.
pub fn judge_interpretable(list: &StepList, grammar: &AgentGrammar, scene: &Scene) -> InterpretabilityVerdict {
    let mut known: BTreeSet<String> = scene.objects.iter().map(|o| normalize_phrase(&o.name)).collect();
    known.extend(scene.location_names().into_iter().map(normalize_phrase));
    known.extend(grammar.known_locations.iter().cloned());

    let mut ungrounded: Vec<String> = Vec::new();
    let mut unparsable_steps = 0;
    for step in &list.steps {
        match step.parsed() {
            Some(p) => {
                for np in p.noun_phrases() {
                    if !known.contains(np) && !ungrounded.iter().any(|u| u == np) {
                        ungrounded.push(np.to_string());
                    }
                }
            }
            None => unparsable_steps += 1,
        }
    }
    InterpretabilityVerdict {
        interpretable: !list.steps.is_empty() && unparsable_steps == 0 && ungrounded.is_empty(),
        ungrounded_phrases: ungrounded,
        unparsable_steps,
    }
}
