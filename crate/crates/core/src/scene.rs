//! The agent's perceptual situation: a task phrase, where the agent is, and
//! the objects it can see together with their attribute/value features.
//!
//! Scenes are read from a line-oriented text format:
//!
//! ```text
//! # comment
//! task: tidy conference room
//! agent: conference room
//! object: can @ conference room ; contents = empty ; material = metal
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lines::{self, Line};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneError {
    #[error("line {0}: malformed scene line")]
    MalformedLine(usize),
    #[error("scene has no `task:` line")]
    MissingTask,
    #[error("scene has no `agent:` line")]
    MissingAgentLocation,
    #[error("object {0} repeats a feature attribute")]
    DuplicateAttribute(usize),
    #[error("scene lists no objects")]
    NoObjects,
    #[error("object index {index} out of range for {len} objects")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub attribute: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDescriptor {
    pub name: String,
    pub location: String,
    /// Rendering order follows this list exactly.
    pub features: Vec<Feature>,
}

impl ObjectDescriptor {
    pub fn new(name: impl Into<String>, location: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            location: location.into(),
            features: Vec::new(),
        }
    }

    pub fn with_feature(mut self, attribute: impl Into<String>, value: impl Into<String>) -> Self {
        self.features.push(Feature {
            attribute: attribute.into(),
            value: value.into(),
        });
        self
    }

    pub fn feature(&self, attribute: &str) -> Option<&str> {
        self.features
            .iter()
            .find(|f| f.attribute == attribute)
            .map(|f| f.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub task_phrase: String,
    pub agent_location: String,
    /// Objects are identified by their index in this list; names may repeat.
    pub objects: Vec<ObjectDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextScope {
    None,
    Partial,
    Full,
}

impl ContextScope {
    pub const ALL: [ContextScope; 3] = [ContextScope::None, ContextScope::Partial, ContextScope::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextScope::None => "none",
            ContextScope::Partial => "partial",
            ContextScope::Full => "full",
        }
    }
}

impl fmt::Display for ContextScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ContextScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ContextScope::None),
            "partial" => Ok(ContextScope::Partial),
            "full" => Ok(ContextScope::Full),
            other => Err(format!("unknown context scope `{other}`")),
        }
    }
}

/// The slice of a scene that a prompt is allowed to mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextView<'a> {
    pub agent_location: Option<&'a str>,
    /// Target object first when present.
    pub objects: Vec<&'a ObjectDescriptor>,
}

impl ContextView<'_> {
    pub fn is_empty(&self) -> bool {
        self.agent_location.is_none() && self.objects.is_empty()
    }
}

fn valid_phrase(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\n', '\r', '@', ';', '='])
}

fn valid_word(s: &str) -> bool {
    valid_phrase(s) && !s.contains(char::is_whitespace)
}

fn parse_object(body: &str, line_no: usize, index: usize) -> Result<ObjectDescriptor, SceneError> {
    let mut parts = body.split(';');
    let head = parts.next().unwrap_or_default();
    let (name, location) = head
        .split_once('@')
        .ok_or(SceneError::MalformedLine(line_no))?;
    let name = lines::collapse_ws(name);
    let location = lines::collapse_ws(location);
    if !valid_phrase(&name) || !valid_phrase(&location) || name != name.to_lowercase() {
        return Err(SceneError::MalformedLine(line_no));
    }
    let mut object = ObjectDescriptor::new(name, location);
    for part in parts {
        let (attr, value) = part
            .split_once('=')
            .ok_or(SceneError::MalformedLine(line_no))?;
        let (attr, value) = (attr.trim(), value.trim());
        if !valid_word(attr) || !valid_word(value) {
            return Err(SceneError::MalformedLine(line_no));
        }
        if object.feature(attr).is_some() {
            return Err(SceneError::DuplicateAttribute(index));
        }
        object = object.with_feature(attr, value);
    }
    Ok(object)
}

/// Parses scene-file text. Objects and their features keep file order.
pub fn load_scene(text: &str) -> Result<Scene, SceneError> {
    let mut task = None;
    let mut agent = None;
    let mut objects = Vec::new();
    for line in lines::keyed_lines(text) {
        let Line { number, key, value } = line.map_err(|n| SceneError::MalformedLine(n))?;
        match key {
            "task" if task.is_none() && valid_phrase(&lines::collapse_ws(value)) => {
                task = Some(lines::collapse_ws(value))
            }
            "agent" if agent.is_none() && valid_phrase(&lines::collapse_ws(value)) => {
                agent = Some(lines::collapse_ws(value))
            }
            "object" => objects.push(parse_object(value, number, objects.len())?),
            _ => return Err(SceneError::MalformedLine(number)),
        }
    }
    let task_phrase = task.ok_or(SceneError::MissingTask)?;
    let agent_location = agent.ok_or(SceneError::MissingAgentLocation)?;
    if objects.is_empty() {
        return Err(SceneError::NoObjects);
    }
    Ok(Scene {
        task_phrase,
        agent_location,
        objects,
    })
}

impl Scene {
    /// Canonical scene-file text; `load_scene` of the result reproduces `self`.
    pub fn to_scene_text(&self) -> String {
        let mut out = format!("task: {}\nagent: {}\n", self.task_phrase, self.agent_location);
        for object in &self.objects {
            out.push_str(&format!("object: {} @ {}", object.name, object.location));
            for f in &object.features {
                out.push_str(&format!(" ; {} = {}", f.attribute, f.value));
            }
            out.push('\n');
        }
        out
    }

    pub fn object(&self, index: usize) -> Result<&ObjectDescriptor, SceneError> {
        self.objects.get(index).ok_or(SceneError::IndexOutOfRange {
            index,
            len: self.objects.len(),
        })
    }

    /// Every location name the scene mentions: the agent's and each object's.
    pub fn location_names(&self) -> Vec<&str> {
        let mut names = vec![self.agent_location.as_str()];
        for o in &self.objects {
            if !names.contains(&o.location.as_str()) {
                names.push(&o.location);
            }
        }
        names
    }
}

pub fn select_context(scene: &Scene, target_index: usize, scope: ContextScope) -> Result<ContextView<'_>, SceneError> {
    let target = scene.object(target_index)?;
    Ok(match scope {
        ContextScope::None => ContextView {
            agent_location: None,
            objects: Vec::new(),
        },
        ContextScope::Partial => ContextView {
            agent_location: Some(&scene.agent_location),
            objects: vec![target],
        },
        ContextScope::Full => {
            let mut objects = vec![target];
            objects.extend(
                scene
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != target_index)
                    .map(|(_, o)| o),
            );
            ContextView {
                agent_location: Some(&scene.agent_location),
                objects,
            }
        }
    })
}
