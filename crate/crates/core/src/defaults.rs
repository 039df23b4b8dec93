//! The example library, grammar and lexicon shipped with the crate.

use crate::decoder::{load_lexicon, ActionLexicon};
use crate::prompt::{load_library, ExampleLibrary};
use crate::steps::{load_grammar, AgentGrammar};

pub const EXAMPLES: &str = include_str!("../fixtures/examples.lib");
pub const GRAMMAR: &str = include_str!("../fixtures/agent.grammar");
pub const LEXICON: &str = include_str!("../fixtures/agent.lexicon");

pub fn library() -> ExampleLibrary {
    load_library(EXAMPLES).expect("shipped example library parses")
}

pub fn grammar() -> AgentGrammar {
    load_grammar(GRAMMAR).expect("shipped grammar parses")
}

pub fn lexicon() -> ActionLexicon {
    load_lexicon(LEXICON)
}
