#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use taskprompt::decoder::{load_lexicon, ActionLexicon};
use taskprompt::gateway::{Gateway, RetryPolicy, ScriptedTransport};
use taskprompt::prompt::{load_library, ExampleLibrary};
use taskprompt::scene::{load_scene, Scene};
use taskprompt::session::SessionContext;
use taskprompt::steps::{load_grammar, AgentGrammar};

pub fn fixture_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture_path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

pub fn conference_room() -> Scene {
    load_scene(&fixture("scenes/tidy-conference-room.scene")).unwrap()
}

pub fn library() -> ExampleLibrary {
    load_library(&fixture("examples.lib")).unwrap()
}

pub fn grammar() -> AgentGrammar {
    load_grammar(&fixture("agent.grammar")).unwrap()
}

pub fn lexicon() -> ActionLexicon {
    load_lexicon(&fixture("agent.lexicon"))
}

pub fn can_transport() -> Arc<ScriptedTransport> {
    Arc::new(ScriptedTransport::from_json(&fixture("scripts/can-transcript.json")).unwrap())
}

pub fn scripted_gateway(transport: Arc<ScriptedTransport>) -> Gateway {
    Gateway::new(transport).with_retry(RetryPolicy::none())
}

pub struct Fixtures {
    pub library: ExampleLibrary,
    pub grammar: AgentGrammar,
    pub lexicon: ActionLexicon,
}

impl Fixtures {
    pub fn load() -> Self {
        Self {
            library: library(),
            grammar: grammar(),
            lexicon: lexicon(),
        }
    }

    pub fn ctx<'a>(&'a self, gateway: &'a Gateway) -> SessionContext<'a> {
        SessionContext {
            library: &self.library,
            grammar: &self.grammar,
            lexicon: &self.lexicon,
            gateway,
        }
    }
}

use taskprompt::eval::{CellConfig, RatingRecord, ResponseRecord, Strategy, CONSENSUS};
use taskprompt::prompt::{FeatureScope, Style};
use taskprompt::scene::ContextScope;

/// The 30 hand-rated records: one consensus rating each, plus a second
/// rater who always disagrees on relevance.
pub fn hand_rated() -> (Vec<ResponseRecord>, Vec<RatingRecord>) {
    let mut reader = csv::Reader::from_path(fixture_path("ratings/hand-rated.csv")).unwrap();
    let mut records = Vec::new();
    let mut ratings = Vec::new();
    for row in reader.records() {
        let row = row.unwrap();
        let flag = |i: usize| &row[i] == "1";
        let id = row[0].to_string();
        records.push(ResponseRecord {
            id: id.clone(),
            experiment: "hand".into(),
            domain: row[1].into(),
            task: row[1].into(),
            object_index: 0,
            object: "can".into(),
            config: CellConfig {
                style: Style::Terse,
                delimiters: true,
                n_examples: row[2].parse().unwrap(),
                temperature: row[3].parse().unwrap(),
                context_scope: ContextScope::Partial,
                feature_scope: FeatureScope::Full,
                strategy: Strategy::Batch,
            },
            sample: 0,
            prompt: String::new(),
            cache_key: String::new(),
            response: String::new(),
            steps: None,
            auto_interpretable: false,
            ungrounded_phrases: Vec::new(),
            created_at: chrono::DateTime::UNIX_EPOCH,
        });
        ratings.push(RatingRecord {
            response_id: id.clone(),
            rater: CONSENSUS.into(),
            reasonable: flag(4),
            relevant: flag(5),
            interpretable: flag(6),
            note: String::new(),
        });
        ratings.push(RatingRecord {
            response_id: id,
            rater: "rater-2".into(),
            reasonable: flag(4),
            relevant: !flag(5),
            interpretable: flag(6),
            note: String::new(),
        });
    }
    (records, ratings)
}
