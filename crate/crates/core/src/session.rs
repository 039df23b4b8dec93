//! Semi-autonomous task learning: the model proposes the next step, the
//! instructor accepts, rejects or rewrites it, and the accepted steps
//! become a learned task. Sessions are event sourced, so a stored event
//! log replays to the same state.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{first_word_params, select_first_words, ActionLexicon, DecodePolicy};
use crate::eval::{normalize_step, Strategy};
use crate::gateway::{Gateway, GatewayError, GenerationParams};
use crate::prompt::{render_prompt, render_prompt_with_steps, ExampleLibrary, PromptConfig, PromptError, RenderedPrompt};
use crate::scene::Scene;
use crate::steps::{parse_goal, parse_step, split_steps, AgentGrammar, ParsedStep, StepEntry, TaskGoal, UnparsableReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub prompt: PromptConfig,
    pub temperature: f64,
    /// Batch choices requested per proposal round.
    pub n_responses: u32,
    pub max_tokens: u32,
    pub strategy: Strategy,
    pub decode: DecodePolicy,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            temperature: 0.0,
            n_responses: 1,
            max_tokens: 128,
            strategy: Strategy::Iterative,
            decode: DecodePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalSource {
    Batch,
    IterativeBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: String,
    pub step_text: String,
    pub source: ProposalSource,
    pub score: f64,
    /// The model ended the task here instead of writing a step.
    pub ends_task: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionStatus {
    Active,
    Finished,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    /// May be omitted only for an edit while no proposals are pending.
    #[serde(default)]
    pub proposal_id: Option<String>,
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedTask {
    pub task_phrase: String,
    pub object: String,
    pub steps: Vec<String>,
    pub goal: Option<TaskGoal>,
    /// Set when a goal was requested but the reply did not parse.
    pub goal_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub scene: Scene,
    pub target_index: usize,
    pub config: SessionConfig,
    pub accepted_steps: Vec<ParsedStep>,
    pub pending_proposals: Vec<Proposal>,
    /// Normalized texts rejected since the last accepted step.
    pub rejected: Vec<String>,
    pub status: SessionStatus,
    /// Every proposal was rejected and none remain: the instructor must
    /// type the next step.
    pub needs_instruction: bool,
    pub learned: Option<LearnedTask>,
    next_proposal: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Opened {
        session_id: String,
        scene: Scene,
        target_index: usize,
        config: SessionConfig,
    },
    Decided {
        decision: Decision,
    },
    Finished {
        elicit_goal: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session is not active")]
    SessionNotActive,
    #[error("unknown proposal `{0}`")]
    UnknownProposal(String),
    #[error("step does not parse: {0:?}")]
    UneditableParse(UnparsableReason),
    #[error("an edit needs `edited_text`")]
    MissingEditText,
    #[error("no steps have been accepted")]
    NoAcceptedSteps,
    #[error("target object {index} is out of range")]
    InvalidTarget { index: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("model call failed: {0}")]
    Gateway(#[from] GatewayError),
    #[error("event log: {0}")]
    BadLog(String),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::SessionNotActive => "session_not_active",
            SessionError::UnknownProposal(_) => "unknown_proposal",
            SessionError::UneditableParse(_) => "uneditable_parse",
            SessionError::MissingEditText => "missing_edit_text",
            SessionError::NoAcceptedSteps => "no_accepted_steps",
            SessionError::InvalidTarget { .. } => "invalid_target",
            SessionError::Prompt(_) => "prompt_error",
            SessionError::Gateway(e) => e.code(),
            SessionError::BadLog(_) => "bad_event_log",
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, SessionError::Gateway(e) if e.is_retryable())
    }
}

/// What a session needs besides its own state.
#[derive(Clone, Copy)]
pub struct SessionContext<'a> {
    pub library: &'a ExampleLibrary,
    pub grammar: &'a AgentGrammar,
    pub lexicon: &'a ActionLexicon,
    pub gateway: &'a Gateway,
}

struct Candidate {
    text: String,
    source: ProposalSource,
    score: f64,
}

fn is_end(text: &str) -> bool {
    let t = text.trim();
    t.is_empty() || t.starts_with('(')
}

fn first_step(text: &str) -> String {
    split_steps(text)
        .ok()
        .and_then(|s| s.steps.into_iter().next())
        .map(|s| s.text)
        .unwrap_or_default()
}

impl Session {
    pub fn open(
        id: impl Into<String>,
        scene: Scene,
        target_index: usize,
        config: SessionConfig,
        ctx: SessionContext,
    ) -> Result<Self, SessionError> {
        if target_index >= scene.objects.len() {
            return Err(SessionError::InvalidTarget { index: target_index });
        }
        let mut session = Self {
            id: id.into(),
            scene,
            target_index,
            config,
            accepted_steps: Vec::new(),
            pending_proposals: Vec::new(),
            rejected: Vec::new(),
            status: SessionStatus::Active,
            needs_instruction: false,
            learned: None,
            next_proposal: 0,
        };
        session.refresh(ctx)?;
        Ok(session)
    }

    pub fn opened_event(&self) -> SessionEvent {
        SessionEvent::Opened {
            session_id: self.id.clone(),
            scene: self.scene.clone(),
            target_index: self.target_index,
            config: self.config.clone(),
        }
    }

    fn accepted_texts(&self) -> Vec<String> {
        self.accepted_steps.iter().map(|s| s.raw.clone()).collect()
    }

    /// The prompt the next proposals come from.
    pub fn current_prompt(&self, library: &ExampleLibrary) -> Result<RenderedPrompt, PromptError> {
        let config = PromptConfig {
            elicit_goal: false,
            ..self.config.prompt
        };
        render_prompt_with_steps(&self.scene, self.target_index, &config, library, &self.accepted_texts())
    }

    fn candidates(&self, ctx: SessionContext) -> Result<Vec<Candidate>, SessionError> {
        let prompt = self.current_prompt(ctx.library)?;
        match self.config.strategy {
            Strategy::Batch => {
                let params = GenerationParams {
                    temperature: self.config.temperature,
                    n_responses: self.config.n_responses,
                    max_tokens: self.config.max_tokens,
                    stop_sequences: prompt.stop_sequences.clone(),
                    top_logprobs: 1,
                };
                let completion = ctx.gateway.complete(&prompt.text, &params)?;
                Ok(completion
                    .choices
                    .iter()
                    .map(|c| Candidate {
                        text: first_step(&c.text),
                        source: ProposalSource::Batch,
                        score: c.mean_logprob().map_or(1.0, f64::exp),
                    })
                    .collect())
            }
            Strategy::Iterative => {
                let dist = ctx.gateway.first_token_distribution(&prompt.text, &first_word_params(&prompt))?;
                let params = GenerationParams {
                    temperature: 0.0,
                    n_responses: 1,
                    max_tokens: self.config.decode.max_tokens_per_step,
                    stop_sequences: prompt.stop_sequences.clone(),
                    top_logprobs: 0,
                };
                let mut out = Vec::new();
                for choice in select_first_words(&dist, ctx.lexicon, &self.config.decode) {
                    let forced = format!("{}{}", prompt.text, choice.word);
                    let completion = ctx.gateway.complete(&forced, &params)?;
                    let rest = completion.choices.first().map(|c| c.text.as_str()).unwrap_or_default();
                    out.push(Candidate {
                        text: first_step(&format!("{}{rest}", choice.word)),
                        source: ProposalSource::IterativeBranch,
                        score: choice.probability,
                    });
                }
                Ok(out)
            }
        }
    }

    /// Fetches fresh proposals, dropping duplicates and rejected texts.
    fn refresh(&mut self, ctx: SessionContext) -> Result<(), SessionError> {
        let mut seen: HashSet<String> = self.rejected.iter().cloned().collect();
        let mut proposals = Vec::new();
        for c in self.candidates(ctx)? {
            let ends_task = is_end(&c.text);
            let key = if ends_task { String::new() } else { normalize_step(&c.text) };
            if !seen.insert(key) {
                continue;
            }
            self.next_proposal += 1;
            proposals.push(Proposal {
                id: format!("p{}", self.next_proposal),
                step_text: if ends_task { crate::prompt::END_TASK.to_string() } else { c.text },
                source: c.source,
                score: c.score,
                ends_task,
            });
        }
        self.needs_instruction = proposals.is_empty();
        self.pending_proposals = proposals;
        Ok(())
    }

    fn take_proposal(&mut self, id: Option<&str>) -> Result<Proposal, SessionError> {
        let id = id.unwrap_or_default();
        let at = self
            .pending_proposals
            .iter()
            .position(|p| p.id == id)
            .ok_or_else(|| SessionError::UnknownProposal(id.to_string()))?;
        Ok(self.pending_proposals.remove(at))
    }

    fn accept_text(&mut self, text: &str, ctx: SessionContext) -> Result<(), SessionError> {
        let index = self.accepted_steps.len() + 1;
        match parse_step(index, text, ctx.grammar) {
            StepEntry::Parsed(step) => {
                self.accepted_steps.push(step);
                self.rejected.clear();
                self.refresh(ctx)
            }
            StepEntry::Unparsable(u) => Err(SessionError::UneditableParse(u.reason)),
        }
    }

    /// Applies one instructor decision. A failed decision leaves the
    /// session unchanged.
    pub fn apply_decision(&mut self, decision: &Decision, ctx: SessionContext) -> Result<(), SessionError> {
        if self.status != SessionStatus::Active {
            return Err(SessionError::SessionNotActive);
        }
        let before = self.clone();
        let result = self.apply_inner(decision, ctx);
        if result.is_err() {
            *self = before;
        }
        result
    }

    fn apply_inner(&mut self, decision: &Decision, ctx: SessionContext) -> Result<(), SessionError> {
        match decision.verdict {
            Verdict::Accept => {
                let proposal = self.take_proposal(decision.proposal_id.as_deref())?;
                if proposal.ends_task {
                    self.finish(false, ctx)?;
                    return Ok(());
                }
                self.accept_text(&proposal.step_text, ctx)
            }
            Verdict::Edit => {
                let text = decision.edited_text.as_deref().ok_or(SessionError::MissingEditText)?;
                if !(decision.proposal_id.is_none() && self.pending_proposals.is_empty()) {
                    self.take_proposal(decision.proposal_id.as_deref())?;
                }
                self.accept_text(text, ctx)
            }
            Verdict::Reject => {
                let proposal = self.take_proposal(decision.proposal_id.as_deref())?;
                let key = if proposal.ends_task { String::new() } else { normalize_step(&proposal.step_text) };
                self.rejected.push(key);
                if self.pending_proposals.is_empty() {
                    self.refresh(ctx)?;
                }
                Ok(())
            }
        }
    }

    /// Ends the session, optionally asking the model for the task's goal.
    pub fn finish(&mut self, elicit_goal: bool, ctx: SessionContext) -> Result<LearnedTask, SessionError> {
        if self.status != SessionStatus::Active {
            return Err(SessionError::SessionNotActive);
        }
        if self.accepted_steps.is_empty() {
            return Err(SessionError::NoAcceptedSteps);
        }
        let (goal, goal_error) = if elicit_goal {
            let config = PromptConfig {
                elicit_goal: true,
                ..self.config.prompt
            };
            let prompt = render_prompt(&self.scene, self.target_index, &config, ctx.library)?;
            let params = GenerationParams {
                temperature: 0.0,
                n_responses: 1,
                max_tokens: self.config.max_tokens,
                stop_sequences: prompt.stop_sequences.clone(),
                top_logprobs: 0,
            };
            let completion = ctx.gateway.complete(&prompt.text, &params)?;
            let text = completion.choices.first().map(|c| c.text.as_str()).unwrap_or_default();
            match parse_goal(text, ctx.grammar) {
                Ok(goal) => (Some(goal), None),
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, None)
        };
        let learned = LearnedTask {
            task_phrase: self.scene.task_phrase.clone(),
            object: self.scene.objects[self.target_index].name.clone(),
            steps: self.accepted_texts(),
            goal,
            goal_error,
        };
        self.status = SessionStatus::Finished;
        self.pending_proposals.clear();
        self.needs_instruction = false;
        self.learned = Some(learned.clone());
        Ok(learned)
    }

    pub fn abandon(&mut self) {
        if self.status == SessionStatus::Active {
            self.status = SessionStatus::Abandoned;
            self.pending_proposals.clear();
        }
    }
}

/// Rebuilds a session from its event log. Decisions that failed when
/// first applied are never logged, so any failure here is an error.
pub fn replay_session(events: &[SessionEvent], ctx: SessionContext) -> Result<Session, SessionError> {
    let (first, rest) = events.split_first().ok_or_else(|| SessionError::BadLog("empty log".into()))?;
    let SessionEvent::Opened {
        session_id,
        scene,
        target_index,
        config,
    } = first
    else {
        return Err(SessionError::BadLog("log does not start with an open event".into()));
    };
    let mut session = Session::open(session_id.clone(), scene.clone(), *target_index, config.clone(), ctx)?;
    for event in rest {
        match event {
            SessionEvent::Opened { .. } => return Err(SessionError::BadLog("second open event".into())),
            SessionEvent::Decided { decision } => session.apply_decision(decision, ctx)?,
            SessionEvent::Finished { elicit_goal } => {
                session.finish(*elicit_goal, ctx)?;
            }
        }
    }
    Ok(session)
}
