//! JSON shapes of the completion protocol: prompt in, choices with per-token
//! logprobs out. Field names follow the widely deployed text-completion API
//! so recorded replies stay portable between backends.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{rank_choices, Choice, Completion, FinishReason, GatewayError, GenerationParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub n: u32,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logprobs: Option<u8>,
}

impl CompletionRequest {
    pub fn new(model: &str, prompt: &str, params: &GenerationParams) -> Self {
        Self {
            model: model.to_string(),
            prompt: prompt.to_string(),
            temperature: params.temperature,
            n: params.n_responses,
            max_tokens: params.max_tokens,
            stop: params.stop_sequences.clone(),
            // Logprobs are always requested so samples can be ranked.
            logprobs: Some(params.top_logprobs),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ReplyBody {
    choices: Vec<ReplyChoice>,
}

#[derive(Debug, Deserialize)]
struct ReplyChoice {
    text: String,
    #[serde(default)]
    index: Option<u32>,
    #[serde(default)]
    logprobs: Option<ReplyLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct ReplyLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
}

/// Logprobs marginally above zero are rounding noise from the backend.
const LOGPROB_SLACK: f64 = 1e-6;

fn check_logprob(lp: f64) -> Result<f64, GatewayError> {
    if lp.is_nan() || lp > LOGPROB_SLACK {
        Err(GatewayError::MalformedBackendReply(format!("logprob {lp} is positive")))
    } else {
        Ok(lp.min(0.0))
    }
}

fn convert(choice: ReplyChoice, params: &GenerationParams) -> Result<Choice, GatewayError> {
    let logprobs = choice.logprobs.unwrap_or_default();
    if logprobs.tokens.len() != logprobs.token_logprobs.len() {
        return Err(GatewayError::MalformedBackendReply(format!(
            "{} tokens but {} logprobs",
            logprobs.tokens.len(),
            logprobs.token_logprobs.len()
        )));
    }
    let token_logprobs = logprobs
        .token_logprobs
        .iter()
        .map(|lp| check_logprob(lp.unwrap_or(0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    let top_alternatives = logprobs
        .top_logprobs
        .unwrap_or_default()
        .into_iter()
        .map(|alts| {
            let mut alts = alts
                .unwrap_or_default()
                .into_iter()
                .map(|(t, lp)| check_logprob(lp).map(|lp| (t, lp)))
                .collect::<Result<Vec<_>, _>>()?;
            alts.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            alts.truncate(params.top_logprobs as usize);
            Ok(alts)
        })
        .collect::<Result<Vec<_>, GatewayError>>()?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    let mut out = Choice {
        text: choice.text,
        tokens: logprobs.tokens,
        token_logprobs,
        top_alternatives,
        finish_reason,
    };
    apply_stops(&mut out, &params.stop_sequences);
    Ok(out)
}

/// Cuts text at the earliest stop sequence (stop text excluded) and drops
/// trailing whitespace left in front of it. Tokens past the cut go too.
fn apply_stops(choice: &mut Choice, stops: &[String]) {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| choice.text.find(s.as_str()))
        .min();
    let Some(cut) = cut else {
        if choice.finish_reason == FinishReason::Stop {
            choice.text.truncate(choice.text.trim_end().len());
        }
        return;
    };
    choice.text.truncate(cut);
    choice.text.truncate(choice.text.trim_end().len());
    choice.finish_reason = FinishReason::Stop;
    if choice.tokens.concat().starts_with(&choice.text) {
        let mut offset = 0;
        let keep = choice
            .tokens
            .iter()
            .take_while(|t| {
                let start = offset;
                offset += t.len();
                start < cut
            })
            .count();
        choice.tokens.truncate(keep);
        choice.token_logprobs.truncate(keep);
        choice.top_alternatives.truncate(keep);
    }
}

/// Parses a verbatim reply body into a [`Completion`] for `params`: stop
/// sequences are applied, at most `n_responses` choices are kept, and
/// sampled choices are ranked best-first.
pub fn parse_reply(body: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
    let reply: ReplyBody =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedBackendReply(e.to_string()))?;
    let mut raw = reply.choices;
    raw.sort_by_key(|c| c.index.unwrap_or(u32::MAX));
    let mut choices = raw
        .into_iter()
        .map(|c| convert(c, params))
        .collect::<Result<Vec<_>, _>>()?;
    if choices.len() < params.n_responses as usize {
        return Err(GatewayError::MalformedBackendReply(format!(
            "asked for {} choices, got {}",
            params.n_responses,
            choices.len()
        )));
    }
    if params.temperature > 0.0 {
        rank_choices(&mut choices);
    }
    choices.truncate(params.n_responses as usize);
    Ok(Completion { choices })
}
