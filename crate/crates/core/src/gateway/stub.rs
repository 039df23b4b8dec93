//! Offline transports: a rule-driven script for fixtures, and a small
//! deterministic "model" that writes plausible step lists for any rendered
//! prompt. Both emit the same reply JSON a live backend would, applying
//! stop sequences and `max_tokens` the way a server does.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CompletionRequest, GatewayError, Transport};

const DEFAULT_LOGPROB: f64 = -0.1;

/// Splits text into word-ish tokens that carry their leading spaces:
/// `"Pick up can\n2."` → `["Pick", " up", " can", "\n", "2", "."]`.
pub(crate) fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    while chars.peek().is_some() {
        let mut token = String::new();
        while chars.peek() == Some(&' ') {
            token.push(' ');
            chars.next();
        }
        match chars.next() {
            Some(c) if c.is_alphanumeric() || c == '\'' => {
                token.push(c);
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '\'' {
                        token.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
            }
            Some(c) => token.push(c),
            None => {}
        }
        tokens.push(token);
    }
    tokens
}

#[derive(Debug, Clone)]
struct Generated {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    top: Vec<Vec<(String, f64)>>,
}

/// Server-side emulation: stop at the first stop sequence, else at
/// `max_tokens`; only the requested number of alternatives is reported.
fn emit_choice(index: usize, generated: &Generated, request: &CompletionRequest) -> Value {
    let full: String = generated.tokens.concat();
    let stop_at = request
        .stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| full.find(s.as_str()))
        .min();
    let mut limit = generated.tokens.len();
    let mut text_end = full.len();
    let mut finish = "stop";
    if let Some(cut) = stop_at {
        let mut offset = 0;
        limit = generated
            .tokens
            .iter()
            .take_while(|t| {
                let start = offset;
                offset += t.len();
                start < cut
            })
            .count();
        text_end = cut;
    }
    if limit > request.max_tokens as usize {
        limit = request.max_tokens as usize;
        text_end = generated.tokens[..limit].iter().map(String::len).sum();
        finish = "length";
    }
    let n_top = request.logprobs.unwrap_or(0) as usize;
    let top: Vec<Value> = (0..limit)
        .map(|i| {
            let alts = generated
                .top
                .get(i)
                .cloned()
                .unwrap_or_else(|| vec![(generated.tokens[i].clone(), generated.logprobs[i])]);
            let map: serde_json::Map<String, Value> =
                alts.into_iter().take(n_top).map(|(t, lp)| (t, json!(lp))).collect();
            Value::Object(map)
        })
        .collect();
    json!({
        "text": &full[..text_end],
        "index": index,
        "logprobs": {
            "tokens": &generated.tokens[..limit],
            "token_logprobs": &generated.logprobs[..limit],
            "top_logprobs": if n_top > 0 { Value::Array(top) } else { Value::Null },
        },
        "finish_reason": finish,
    })
}

fn reply(model: &str, choices: Vec<Value>) -> String {
    json!({
        "id": "cmpl-offline",
        "object": "text_completion",
        "model": model,
        "choices": choices,
    })
    .to_string()
}

/// One canned choice in a script. Missing tokens are derived from `text`;
/// missing logprobs default to a small constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptChoice {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Alternatives for the first positions, as `(token, logprob)` pairs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_logprobs: Vec<Vec<(String, f64)>>,
}

impl ScriptChoice {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens: None,
            token_logprobs: None,
            top_logprobs: Vec::new(),
        }
    }

    /// A single token whose alternatives are given as probabilities.
    pub fn distribution(alternatives: &[(&str, f64)]) -> Self {
        let top: Vec<(String, f64)> = alternatives.iter().map(|(t, p)| (t.to_string(), p.ln())).collect();
        Self {
            text: top[0].0.clone(),
            tokens: Some(vec![top[0].0.clone()]),
            token_logprobs: Some(vec![top[0].1]),
            top_logprobs: vec![top],
        }
    }

    fn generated(&self) -> Generated {
        let tokens = self.tokens.clone().unwrap_or_else(|| tokenize(&self.text));
        let logprobs = self
            .token_logprobs
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_LOGPROB; tokens.len()]);
        Generated {
            tokens,
            logprobs,
            top: self.top_logprobs.clone(),
        }
    }
}

/// Matches requests by prompt shape; the first matching rule answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_suffix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Choices are cycled when more are requested than listed.
    pub choices: Vec<ScriptChoice>,
}

impl ScriptRule {
    pub fn suffix(suffix: impl Into<String>, choices: Vec<ScriptChoice>) -> Self {
        Self {
            prompt_suffix: Some(suffix.into()),
            prompt_contains: None,
            max_tokens: None,
            choices,
        }
    }

    pub fn single_token(mut self) -> Self {
        self.max_tokens = Some(1);
        self
    }

    pub fn containing(mut self, fragment: impl Into<String>) -> Self {
        self.prompt_contains = Some(fragment.into());
        self
    }

    fn matches(&self, request: &CompletionRequest) -> bool {
        self.prompt_suffix.as_ref().is_none_or(|s| request.prompt.ends_with(s.as_str()))
            && self
                .prompt_contains
                .as_ref()
                .is_none_or(|s| request.prompt.contains(s.as_str()))
            && self.max_tokens.is_none_or(|m| m == request.max_tokens)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ScriptedTransport {
    pub rules: Vec<ScriptRule>,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl ScriptedTransport {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if self.rules.is_empty() {
            return Err(GatewayError::BackendUnavailable("script is empty".into()));
        }
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(request))
            .ok_or_else(|| GatewayError::BackendUnavailable("no scripted reply for this prompt".into()))?;
        let choices = (0..request.n as usize)
            .map(|i| emit_choice(i, &rule.choices[i % rule.choices.len()].generated(), request))
            .collect();
        Ok(reply("scripted", choices))
    }
}

/// A deterministic stand-in model. It finds the target object in the
/// partial task, picks a bin from the object's material, and continues
/// whichever of three canned step lists agrees with what is already
/// written after `Steps:`. Sampled requests return the candidates in
/// shuffled order with distinct logprobs.
#[derive(Debug, Default)]
pub struct SyntheticTransport {
    calls: AtomicUsize,
}

/// Per-token logprob of each canned candidate, best first.
const CANDIDATE_LOGPROBS: [f64; 3] = [-0.15, -0.4, -0.9];
const FIRST_WORD_PROBS: [f64; 3] = [0.55, 0.3, 0.1];
const FILLER_WORDS: [(&str, f64); 2] = [("Remove", 0.03), ("Clean", 0.02)];

impl SyntheticTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.rfind(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(&text[start..start + len])
}

struct PartialTask<'a> {
    object: String,
    bin: &'static str,
    written: &'a str,
    delimited: bool,
}

fn read_partial_task(prompt: &str) -> PartialTask<'_> {
    let task = prompt
        .rfind("(TASK)")
        .or_else(|| prompt.rfind("\n\n"))
        .map_or(prompt, |i| &prompt[i..]);
    let object = between(task, "Aware of ", ",")
        .or_else(|| between(task, "Observe(", ")"))
        .or_else(|| between(task, " with ", " in it?"))
        .unwrap_or("item")
        .to_string();
    let recyclable = ["plastic", "metal", "glass"].iter().any(|m| task.contains(m));
    let written = match task.rfind("Steps:") {
        Some(i) => &task[i + "Steps:".len()..],
        None => "",
    };
    PartialTask {
        object,
        bin: if recyclable { "recycling bin" } else { "waste bin" },
        written,
        delimited: prompt.contains("(TASK)"),
    }
}

fn candidates(p: &PartialTask) -> Vec<String> {
    let (o, b) = (&p.object, p.bin);
    let end = if p.delimited { " (END TASK)" } else { "\n\nGoal:" };
    if p.written.starts_with(" (RESULT)") {
        let goal = format!(" (RESULT) The goal is that the {o} is in the {b} (END RESULT)\n1. Pick up {o}{end}");
        return vec![goal];
    }
    [
        format!(" 1. Pick up {o}\n2. Take {o} to {b}\n3. Put {o} in {b}{end}"),
        format!(" 1. Take {o} to {b}\n2. Put {o} in {b}{end}"),
        format!(" 1. Throw away {o}\n2. Wipe down table{end}"),
    ]
    .into()
}

impl Transport for SyntheticTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let task = read_partial_task(&request.prompt);
        let all = candidates(&task);
        // Continuations of every candidate consistent with the written prefix.
        let mut rests: Vec<(usize, &str)> = all
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.strip_prefix(task.written).map(|rest| (i, rest)))
            .collect();
        if rests.is_empty() {
            rests.push((0, if task.delimited { " (END TASK)" } else { "\n\nGoal:" }));
        }
        let generated: Vec<Generated> = rests
            .iter()
            .map(|(i, rest)| {
                let tokens = tokenize(rest);
                let lp = CANDIDATE_LOGPROBS[*i % CANDIDATE_LOGPROBS.len()];
                let mut top = Vec::new();
                if let Some(first) = tokens.first() {
                    let mut alts: Vec<(String, f64)> = rests
                        .iter()
                        .filter_map(|(j, r)| {
                            tokenize(r)
                                .into_iter()
                                .next()
                                .map(|t| (t, FIRST_WORD_PROBS[*j % FIRST_WORD_PROBS.len()].ln()))
                        })
                        .collect();
                    alts.extend(FILLER_WORDS.iter().map(|(w, p)| (w.to_string(), p.ln())));
                    let mut seen = std::collections::HashSet::new();
                    alts.retain(|(t, _)| seen.insert(t.clone()));
                    if !alts.iter().any(|(t, _)| t == first) {
                        alts.insert(0, (first.clone(), lp));
                    }
                    top.push(alts);
                }
                Generated {
                    logprobs: vec![lp; tokens.len()],
                    tokens,
                    top,
                }
            })
            .collect();
        let choices = (0..request.n as usize)
            .map(|i| {
                // Greedy requests take the best candidate; sampled ones rotate.
                let pick = if request.temperature > 0.0 {
                    (i + 1) % generated.len()
                } else {
                    0
                };
                emit_choice(i, &generated[pick], request)
            })
            .collect();
        Ok(reply("synthetic", choices))
    }
}
