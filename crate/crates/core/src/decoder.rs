//! Iterative decoding: at each step boundary the first word is chosen from
//! the model's next-token distribution, preferring words the agent knows,
//! and the model then finishes the step on its own.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Completion, FinishReason, Gateway, GatewayError, GenerationParams, TokenDistribution, MAX_TOP_LOGPROBS};
use crate::lines;
use crate::prompt::RenderedPrompt;

static STEP_BOUNDARY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n[ \t]*\d+\.[ \t]").unwrap());

/// Verbs the agent can execute. Matching ignores case and leading
/// whitespace, so the token `" Pick"` is the word `pick`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionLexicon {
    words: BTreeSet<String>,
}

impl ActionLexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lexicon = Self::default();
        for w in words {
            lexicon.insert(w.as_ref());
        }
        lexicon
    }

    pub fn insert(&mut self, word: &str) {
        let word = word.trim().to_lowercase();
        if !word.is_empty() {
            self.words.insert(word);
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(&token.trim().to_lowercase())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One word per line; `#` starts a comment.
pub fn load_lexicon(text: &str) -> ActionLexicon {
    ActionLexicon::new(lines::content_lines(text).map(|(_, l)| l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodePolicy {
    pub known_threshold: f64,
    pub fallback_threshold: f64,
    pub max_branches_per_step: usize,
    pub max_steps: usize,
    pub max_tokens_per_step: u32,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            known_threshold: 0.10,
            fallback_threshold: 0.60,
            max_branches_per_step: 3,
            max_steps: 10,
            max_tokens_per_step: 64,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let ok = (0.0..=1.0).contains(&self.known_threshold)
            && (0.0..=1.0).contains(&self.fallback_threshold)
            && self.known_threshold <= self.fallback_threshold
            && self.max_branches_per_step >= 1
            && self.max_tokens_per_step >= 1;
        if ok {
            Ok(())
        } else {
            Err(DecodeError::InvalidPolicy)
        }
    }

    /// Most finished responses a single decode may produce.
    pub fn leaf_budget(&self) -> usize {
        self.max_branches_per_step.saturating_mul(self.max_branches_per_step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    /// A lexicon word above the known-word threshold.
    Known,
    /// No known word qualified; any word above the fallback threshold.
    Fallback,
    /// Nothing qualified; the single most likely word.
    ArgmaxMiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordChoice {
    pub word: String,
    pub probability: f64,
    pub provenance: Provenance,
}

/// Picks the words to branch on at one step boundary.
pub fn select_first_words(dist: &TokenDistribution, lexicon: &ActionLexicon, policy: &DecodePolicy) -> Vec<WordChoice> {
    let pick = |filter: &dyn Fn(&str, f64) -> bool, provenance| -> Vec<WordChoice> {
        dist.entries()
            .iter()
            .filter(|(t, p)| !t.trim().is_empty() && filter(t, *p))
            .take(policy.max_branches_per_step)
            .map(|(t, p)| WordChoice {
                word: t.trim_start().to_string(),
                probability: *p,
                provenance,
            })
            .collect()
    };
    let known = pick(&|t, p| lexicon.contains(t) && p >= policy.known_threshold, Provenance::Known);
    if !known.is_empty() {
        return known;
    }
    let fallback = pick(&|_, p| p >= policy.fallback_threshold, Provenance::Fallback);
    if !fallback.is_empty() {
        return fallback;
    }
    dist.entries()
        .first()
        .map(|(t, p)| WordChoice {
            word: t.trim_start().to_string(),
            probability: *p,
            provenance: Provenance::ArgmaxMiss,
        })
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedWord {
    pub step: usize,
    pub word: String,
    pub probability: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedResponse {
    /// Continuation of the prompt, in the same shape a batch completion
    /// would have: the open step's text, then `"\n<k>. "` and the next.
    pub text: String,
    pub forced_words: Vec<ForcedWord>,
    /// The model ended the list itself; false when the step cap or the
    /// token limit cut it off.
    pub complete: bool,
}

impl DecodedResponse {
    pub fn probability(&self) -> f64 {
        self.forced_words.iter().map(|f| f.probability).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub forced_words: Vec<ForcedWord>,
    pub error: GatewayError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    /// Best first by product of forced-word probabilities.
    pub responses: Vec<DecodedResponse>,
    pub failures: Vec<BranchFailure>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("prompt does not end at an open step marker")]
    NotAtStepBoundary,
    #[error("decode policy is inconsistent")]
    InvalidPolicy,
    #[error("more than {budget} branches")]
    BranchBudgetExceeded { budget: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Parameters of the one-token query made at every step boundary.
pub fn first_word_params(prompt: &RenderedPrompt) -> GenerationParams {
    GenerationParams {
        temperature: 0.0,
        n_responses: 1,
        max_tokens: 1,
        stop_sequences: prompt.stop_sequences.clone(),
        top_logprobs: MAX_TOP_LOGPROBS,
    }
}

#[derive(Debug, Clone)]
struct Branch {
    text: String,
    forced: Vec<ForcedWord>,
    step: usize,
}

enum Expansion {
    Open(Branch),
    Leaf(DecodedResponse),
    Failed(BranchFailure),
}

struct Decoder<'a> {
    prompt: &'a RenderedPrompt,
    gateway: &'a Gateway,
    lexicon: &'a ActionLexicon,
    policy: &'a DecodePolicy,
    first_step: usize,
}

impl Decoder<'_> {
    fn distribution_params(&self) -> GenerationParams {
        first_word_params(self.prompt)
    }

    fn continuation_params(&self) -> GenerationParams {
        GenerationParams {
            temperature: 0.0,
            n_responses: 1,
            max_tokens: self.policy.max_tokens_per_step,
            stop_sequences: self.prompt.stop_sequences.clone(),
            top_logprobs: 0,
        }
    }

    fn continue_step(&self, branch: &Branch, choice: WordChoice) -> Expansion {
        let mut forced = branch.forced.clone();
        forced.push(ForcedWord {
            step: branch.step,
            word: choice.word.clone(),
            probability: choice.probability,
            provenance: choice.provenance,
        });
        let text = format!("{}{}", branch.text, choice.word);
        let full = format!("{}{}", self.prompt.text, text);
        let completion: Completion = match self.gateway.complete(&full, &self.continuation_params()) {
            Ok(c) => c,
            Err(error) => return Expansion::Failed(BranchFailure { forced_words: forced, error }),
        };
        let Some(choice) = completion.choices.into_iter().next() else {
            let error = GatewayError::MalformedBackendReply("no choices".into());
            return Expansion::Failed(BranchFailure { forced_words: forced, error });
        };
        let steps_done = branch.step + 1 - self.first_step;
        match STEP_BOUNDARY.find(&choice.text) {
            Some(boundary) => {
                let step_text = format!("{text}{}", choice.text[..boundary.start()].trim_end());
                if steps_done >= self.policy.max_steps {
                    return Expansion::Leaf(DecodedResponse {
                        text: step_text,
                        forced_words: forced,
                        complete: false,
                    });
                }
                Expansion::Open(Branch {
                    text: format!("{step_text}\n{}. ", branch.step + 1),
                    forced,
                    step: branch.step + 1,
                })
            }
            None => Expansion::Leaf(DecodedResponse {
                text: format!("{text}{}", choice.text),
                forced_words: forced,
                complete: choice.finish_reason == FinishReason::Stop,
            }),
        }
    }

    fn expand(&self, branch: Branch) -> Result<Vec<Expansion>, BranchFailure> {
        let full = format!("{}{}", self.prompt.text, branch.text);
        let dist = self
            .gateway
            .first_token_distribution(&full, &self.distribution_params())
            .map_err(|error| BranchFailure {
                forced_words: branch.forced.clone(),
                error,
            })?;
        let choices = select_first_words(&dist, self.lexicon, self.policy);
        Ok(std::thread::scope(|s| {
            let handles: Vec<_> = choices
                .into_iter()
                .map(|c| {
                    let branch = &branch;
                    s.spawn(move || self.continue_step(branch, c))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("branch thread panicked")).collect()
        }))
    }
}

/// Decodes a step list one step at a time, branching on the admissible
/// first words at every boundary.
///
/// The prompt must end with an open `"<k>. "` marker. Failures inside
/// branches are collected; a failure of the very first query is an error.
pub fn decode_iteratively(
    prompt: &RenderedPrompt,
    gateway: &Gateway,
    lexicon: &ActionLexicon,
    policy: &DecodePolicy,
) -> Result<DecodeOutcome, DecodeError> {
    policy.validate()?;
    let first_step = prompt.open_step_number().ok_or(DecodeError::NotAtStepBoundary)?;
    if policy.max_steps == 0 {
        return Ok(DecodeOutcome {
            responses: vec![DecodedResponse {
                text: String::new(),
                forced_words: Vec::new(),
                complete: false,
            }],
            failures: Vec::new(),
        });
    }
    let decoder = Decoder {
        prompt,
        gateway,
        lexicon,
        policy,
        first_step,
    };
    let budget = policy.leaf_budget();
    let mut responses = Vec::new();
    let mut failures = Vec::new();
    let mut frontier = vec![Branch {
        text: String::new(),
        forced: Vec::new(),
        step: first_step,
    }];
    let mut first_query = true;
    while !frontier.is_empty() {
        let results: Vec<Result<Vec<Expansion>, BranchFailure>> = std::thread::scope(|s| {
            let handles: Vec<_> = frontier
                .drain(..)
                .map(|b| {
                    let decoder = &decoder;
                    s.spawn(move || decoder.expand(b))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("branch thread panicked")).collect()
        });
        for result in results {
            match result {
                Ok(expansions) => {
                    for e in expansions {
                        match e {
                            Expansion::Open(b) => frontier.push(b),
                            Expansion::Leaf(r) => responses.push(r),
                            Expansion::Failed(f) => failures.push(f),
                        }
                    }
                }
                Err(f) if first_query => return Err(DecodeError::Gateway(f.error)),
                Err(f) => failures.push(f),
            }
        }
        first_query = false;
        if responses.len() + frontier.len() > budget {
            return Err(DecodeError::BranchBudgetExceeded { budget });
        }
    }
    responses.sort_by(|a, b| b.probability().total_cmp(&a.probability()).then_with(|| a.text.cmp(&b.text)));
    Ok(DecodeOutcome { responses, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{RetryPolicy, ScriptChoice, ScriptRule, ScriptedTransport};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn lexicon() -> ActionLexicon {
        load_lexicon(include_str!("../fixtures/agent.lexicon"))
    }

    fn dist(pairs: &[(&str, f64)]) -> TokenDistribution {
        TokenDistribution::from_probabilities(pairs.iter().map(|(t, p)| (t.to_string(), *p))).unwrap()
    }

    fn prompt(text: &str) -> RenderedPrompt {
        RenderedPrompt {
            text: text.to_string(),
            stop_sequences: vec!["(END TASK)".into()],
            slots: Default::default(),
        }
    }

    fn gateway(rules: Vec<ScriptRule>) -> (Gateway, Arc<ScriptedTransport>) {
        let transport = Arc::new(ScriptedTransport::new(rules));
        let gw = Gateway::new(transport.clone()).with_retry(RetryPolicy::none());
        (gw, transport)
    }

    #[test]
    fn lexicon_matching() {
        let lex = lexicon();
        assert!(lex.contains("Pick"));
        assert!(lex.contains(" pick"));
        assert!(!lex.contains("Remove"));
        assert!(!lex.contains("pi"));
    }

    #[test]
    fn known_words_win() {
        let d = dist(&[("Pick", 0.48), (" Take", 0.40), ("Remove", 0.03), ("Throw", 0.016), ("Put", 0.014)]);
        let picks = select_first_words(&d, &lexicon(), &DecodePolicy::default());
        let words: Vec<_> = picks.iter().map(|c| (c.word.as_str(), c.provenance)).collect();
        assert_eq!(words, [("Pick", Provenance::Known), ("Take", Provenance::Known)]);
    }

    #[test]
    fn fallback_then_argmax() {
        let policy = DecodePolicy::default();
        let fb = select_first_words(&dist(&[("Remove", 0.7), ("Take", 0.05)]), &lexicon(), &policy);
        assert_eq!(fb.len(), 1);
        assert_eq!(fb[0].provenance, Provenance::Fallback);
        let miss = select_first_words(&dist(&[("Remove", 0.4), ("Clean", 0.3), ("Take", 0.05)]), &lexicon(), &policy);
        assert_eq!(miss[0].word, "Remove");
        assert_eq!(miss[0].provenance, Provenance::ArgmaxMiss);
    }

    #[test]
    fn zero_max_steps_makes_no_calls() {
        let (gw, transport) = gateway(vec![]);
        let policy = DecodePolicy {
            max_steps: 0,
            ..DecodePolicy::default()
        };
        let out = decode_iteratively(&prompt("Steps: 1. "), &gw, &lexicon(), &policy).unwrap();
        assert_eq!(out.responses.len(), 1);
        assert_eq!(out.responses[0].text, "");
        assert!(!out.responses[0].complete);
        assert_eq!(transport.calls(), 0);
    }

    #[test]
    fn prompt_must_be_open() {
        let (gw, _) = gateway(vec![]);
        let err = decode_iteratively(&prompt("Steps:"), &gw, &lexicon(), &DecodePolicy::default());
        assert_eq!(err, Err(DecodeError::NotAtStepBoundary));
    }

    #[test]
    fn single_branch_matches_batch_text() {
        let rules = vec![
            ScriptRule::suffix("Steps: 1. ", vec![ScriptChoice::distribution(&[("Pick", 0.8), ("Remove", 0.1)])]).single_token(),
            ScriptRule::suffix("1. Pick", vec![ScriptChoice::text(" up can\n2. Put can in bin (END TASK)")]),
            ScriptRule::suffix("can\n2. ", vec![ScriptChoice::distribution(&[("Put", 0.9)])]).single_token(),
            ScriptRule::suffix("2. Put", vec![ScriptChoice::text(" can in bin (END TASK)")]),
        ];
        let (gw, transport) = gateway(rules);
        let out = decode_iteratively(&prompt("Steps: 1. "), &gw, &lexicon(), &DecodePolicy::default()).unwrap();
        assert!(out.failures.is_empty());
        assert_eq!(out.responses.len(), 1);
        let r = &out.responses[0];
        assert_eq!(r.text, "Pick up can\n2. Put can in bin");
        assert!(r.complete);
        let steps: Vec<_> = r.forced_words.iter().map(|f| (f.step, f.word.as_str())).collect();
        assert_eq!(steps, [(1, "Pick"), (2, "Put")]);
        assert!((r.probability() - 0.72).abs() < 1e-9);
        assert_eq!(transport.calls(), 4);
    }

    #[test]
    fn step_cap_truncates() {
        let rules = vec![
            ScriptRule::suffix(". ", vec![ScriptChoice::distribution(&[("Take", 0.9)])]).single_token(),
            ScriptRule::suffix("Take", vec![ScriptChoice::text(" cup to sink\n9. Take")]),
        ];
        let (gw, _) = gateway(rules);
        let policy = DecodePolicy {
            max_steps: 2,
            ..DecodePolicy::default()
        };
        let out = decode_iteratively(&prompt("Steps: 1. "), &gw, &lexicon(), &policy).unwrap();
        let r = &out.responses[0];
        assert_eq!(r.text, "Take cup to sink\n2. Take cup to sink");
        assert!(!r.complete);
    }

    #[test]
    fn budget_is_enforced() {
        let rules = vec![
            ScriptRule::suffix(". ", vec![ScriptChoice::distribution(&[("Take", 0.4), ("Put", 0.3), ("Pick", 0.2)])])
                .single_token(),
            ScriptRule::suffix("", vec![ScriptChoice::text(" it\n2. x")]),
        ];
        let (gw, _) = gateway(rules);
        let err = decode_iteratively(&prompt("Steps: 1. "), &gw, &lexicon(), &DecodePolicy::default());
        assert_eq!(err, Err(DecodeError::BranchBudgetExceeded { budget: 9 }));
    }

    #[test]
    fn branch_failures_are_collected() {
        let rules = vec![
            ScriptRule::suffix("Steps: 1. ", vec![ScriptChoice::distribution(&[("Take", 0.5), ("Put", 0.4)])]).single_token(),
            ScriptRule::suffix("1. Take", vec![ScriptChoice::text(" cup to sink (END TASK)")]),
        ];
        let (gw, _) = gateway(rules);
        let out = decode_iteratively(&prompt("Steps: 1. "), &gw, &lexicon(), &DecodePolicy::default()).unwrap();
        assert_eq!(out.responses.len(), 1);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].forced_words[0].word, "Put");
    }

    fn arb_dist() -> impl Strategy<Value = Vec<(String, f64)>> {
        let vocab = prop::sample::select(vec!["Pick", " Take", "Put", "Remove", "Clean", "Wipe", "Go", "The", "Throw"]);
        prop::collection::vec((vocab, 0.001f64..1.0), 1..6).prop_map(|raw| {
            let mut seen = BTreeSet::new();
            let raw: Vec<_> = raw.into_iter().filter(|(t, _)| seen.insert(t.trim().to_lowercase())).collect();
            let total: f64 = raw.iter().map(|(_, p)| p).sum::<f64>() * 1.05;
            raw.into_iter().map(|(t, p)| (t.to_string(), p / total)).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn selection_is_sound(
            pairs in arb_dist(),
            known in 0.0f64..0.5,
            extra in 0.0f64..0.5,
            cap in 1usize..4,
        ) {
            let policy = DecodePolicy { known_threshold: known, fallback_threshold: known + extra, max_branches_per_step: cap, ..DecodePolicy::default() };
            let lex = lexicon();
            let d = TokenDistribution::from_probabilities(pairs.clone()).unwrap();
            let picks = select_first_words(&d, &lex, &policy);

            // Oracle written from the selection rule, independent of the implementation.
            let mut sorted = pairs.clone();
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let known_words: Vec<_> = sorted.iter().filter(|(t, p)| lex.contains(t) && *p >= known).take(cap).collect();
            let fallback: Vec<_> = sorted.iter().filter(|(_, p)| *p >= known + extra).take(cap).collect();
            let expected: Vec<(&str, Provenance)> = if !known_words.is_empty() {
                known_words.iter().map(|(t, _)| (t.trim_start(), Provenance::Known)).collect()
            } else if !fallback.is_empty() {
                fallback.iter().map(|(t, _)| (t.trim_start(), Provenance::Fallback)).collect()
            } else {
                vec![(sorted[0].0.trim_start(), Provenance::ArgmaxMiss)]
            };
            let got: Vec<_> = picks.iter().map(|c| (c.word.as_str(), c.provenance)).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(!picks.is_empty() && picks.len() <= cap);
        }
    }
}
