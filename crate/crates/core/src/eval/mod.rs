//! Experiment sweeps over prompt variations, with automatic and human
//! judgments aggregated into per-cell percentages.

mod gold;
mod store;
mod sweep;

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{FeatureScope, PromptConfig, PromptError, Style};
use crate::scene::ContextScope;
use crate::steps::StepList;

pub use gold::{load_gold, normalize_step, GoldEntry, GoldError, GoldStandard};
pub use store::JsonlStore;
pub use sweep::{load_sweep, run_sweep, Axes, Cell, CellSummary, Domain, DomainSpec, SweepConfig, SweepInputs, SweepOutcome};

/// Rater id of the agreed rating for a response.
pub const CONSENSUS: &str = "consensus";

pub const REPORT_HEADER: [&str; 11] = [
    "domain",
    "n_examples",
    "temperature",
    "context",
    "features",
    "strategy",
    "n",
    "pct_reasonable",
    "pct_relevant",
    "pct_interpretable",
    "pct_relevant_and_interpretable",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Batch,
    Iterative,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Batch => "batch",
            Strategy::Iterative => "iterative",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(Strategy::Batch),
            "iterative" => Ok(Strategy::Iterative),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Everything that varies between sweep cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub style: Style,
    pub delimiters: bool,
    pub n_examples: usize,
    pub temperature: f64,
    pub context_scope: ContextScope,
    pub feature_scope: FeatureScope,
    pub strategy: Strategy,
}

impl CellConfig {
    pub fn prompt_config(&self) -> PromptConfig {
        PromptConfig {
            style: self.style,
            delimiters: self.delimiters,
            n_examples: self.n_examples,
            context_scope: self.context_scope,
            feature_scope: self.feature_scope,
            elicit_goal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    pub experiment: String,
    pub domain: String,
    pub task: String,
    pub object_index: usize,
    pub object: String,
    pub config: CellConfig,
    /// Rank of this response among those returned for the same prompt.
    pub sample: usize,
    pub prompt: String,
    pub cache_key: String,
    pub response: String,
    pub steps: Option<StepList>,
    pub auto_interpretable: bool,
    pub ungrounded_phrases: Vec<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub response_id: String,
    pub rater: String,
    pub reasonable: bool,
    pub relevant: bool,
    pub interpretable: bool,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Consensus ratings for all three measures.
    HumanFirst,
    /// Automatic interpretability and relevance; reasonableness only where
    /// a consensus rating exists.
    AutoOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub domain: String,
    pub n_examples: usize,
    pub temperature: f64,
    pub context: ContextScope,
    pub features: FeatureScope,
    pub strategy: Strategy,
    pub n: usize,
    pub pct_reasonable: Option<f64>,
    pub pct_relevant: f64,
    pub pct_interpretable: f64,
    pub pct_relevant_and_interpretable: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no gold entry for `{task}` object {object_index}")]
    MissingGoldEntry { task: String, object_index: usize },
    #[error("response `{0}` has no consensus rating")]
    MissingConsensus(String),
    #[error("unknown response `{0}`")]
    UnknownResponse(String),
    #[error("sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("store: {0}")]
    Store(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::MissingGoldEntry { .. } => "missing_gold_entry",
            EvalError::MissingConsensus(_) => "missing_consensus",
            EvalError::UnknownResponse(_) => "unknown_response",
            EvalError::Config(_) => "bad_config",
            EvalError::Prompt(_) => "prompt_error",
            EvalError::Store(_) => "store_error",
        }
    }
}

/// True iff the response's normalized steps equal one of the gold
/// sequences for its object. Unparsed responses are never relevant.
pub fn auto_relevance(record: &ResponseRecord, gold: &GoldStandard) -> Result<bool, EvalError> {
    let entry = gold.get(&record.task, record.object_index).ok_or_else(|| EvalError::MissingGoldEntry {
        task: record.task.clone(),
        object_index: record.object_index,
    })?;
    let Some(steps) = &record.steps else {
        return Ok(false);
    };
    let normalized: Vec<String> = steps.steps.iter().map(|s| normalize_step(s.raw())).collect();
    Ok(entry.sequences.iter().any(|seq| *seq == normalized))
}

/// Latest rating per (response, rater), in append order.
pub fn latest_ratings(ratings: &[RatingRecord]) -> Vec<RatingRecord> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out: Vec<RatingRecord> = Vec::new();
    for r in ratings {
        match index.get(&(r.response_id.as_str(), r.rater.as_str())) {
            Some(&i) => out[i] = r.clone(),
            None => {
                index.insert((&r.response_id, &r.rater), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

/// Records of `experiment` still lacking a rating from `rater`, or a
/// consensus rating when no rater is given.
pub fn pending_ratings<'a>(
    records: &'a [ResponseRecord],
    ratings: &[RatingRecord],
    experiment: Option<&str>,
    rater: Option<&str>,
) -> Vec<&'a ResponseRecord> {
    let rater = rater.unwrap_or(CONSENSUS);
    let rated: std::collections::HashSet<&str> = ratings
        .iter()
        .filter(|r| r.rater == rater)
        .map(|r| r.response_id.as_str())
        .collect();
    records
        .iter()
        .filter(|r| experiment.is_none_or(|e| r.experiment == e))
        .filter(|r| !rated.contains(r.id.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct RowKey {
    domain: String,
    n_examples: usize,
    temperature: f64,
    context: ContextScope,
    features: FeatureScope,
    strategy: Strategy,
}

impl RowKey {
    fn of(r: &ResponseRecord) -> Self {
        Self {
            domain: r.domain.clone(),
            n_examples: r.config.n_examples,
            temperature: r.config.temperature,
            context: r.config.context_scope,
            features: r.config.feature_scope,
            strategy: r.config.strategy,
        }
    }

    fn sort_key(&self) -> (String, usize, u64, u8, u8, Strategy) {
        let context = ContextScope::ALL.iter().position(|c| *c == self.context).unwrap_or(0) as u8;
        let features = match self.features {
            FeatureScope::NameOnly => 0,
            FeatureScope::Full => 1,
        };
        // Temperatures are non-negative, so the bit pattern orders them.
        (self.domain.clone(), self.n_examples, self.temperature.to_bits(), context, features, self.strategy)
    }
}

#[derive(Default)]
struct Tally {
    n: usize,
    rated_reasonable: usize,
    reasonable: usize,
    relevant: usize,
    interpretable: usize,
    both: usize,
}

fn pct(count: usize, n: usize) -> f64 {
    count as f64 * 100.0 / n as f64
}

/// Per-cell percentages. Cells without records produce no row; rows come
/// out in a fixed order whatever the input order.
pub fn aggregate(
    records: &[ResponseRecord],
    ratings: &[RatingRecord],
    gold: &GoldStandard,
    mode: AggregationMode,
) -> Result<ExperimentReport, EvalError> {
    let consensus: HashMap<&str, &RatingRecord> = {
        let mut m = HashMap::new();
        // Later consensus ratings replace earlier ones.
        for r in ratings.iter().filter(|r| r.rater == CONSENSUS) {
            m.insert(r.response_id.as_str(), r);
        }
        m
    };
    let mut tallies: BTreeMap<(String, usize, u64, u8, u8, Strategy), (RowKey, Tally)> = BTreeMap::new();
    for record in records {
        let rating = consensus.get(record.id.as_str()).copied();
        let (reasonable, relevant, interpretable) = match mode {
            AggregationMode::HumanFirst => {
                let r = rating.ok_or_else(|| EvalError::MissingConsensus(record.id.clone()))?;
                (Some(r.reasonable), r.relevant, r.interpretable)
            }
            AggregationMode::AutoOnly => (
                rating.map(|r| r.reasonable),
                auto_relevance(record, gold)?,
                record.auto_interpretable,
            ),
        };
        let key = RowKey::of(record);
        let (_, t) = tallies.entry(key.sort_key()).or_insert_with(|| (key, Tally::default()));
        t.n += 1;
        if let Some(ok) = reasonable {
            t.rated_reasonable += 1;
            t.reasonable += ok as usize;
        }
        t.relevant += relevant as usize;
        t.interpretable += interpretable as usize;
        t.both += (relevant && interpretable) as usize;
    }
    let rows = tallies
        .into_values()
        .map(|(k, t)| ReportRow {
            domain: k.domain,
            n_examples: k.n_examples,
            temperature: k.temperature,
            context: k.context,
            features: k.features,
            strategy: k.strategy,
            n: t.n,
            pct_reasonable: (t.rated_reasonable > 0).then(|| pct(t.reasonable, t.rated_reasonable)),
            pct_relevant: pct(t.relevant, t.n),
            pct_interpretable: pct(t.interpretable, t.n),
            pct_relevant_and_interpretable: pct(t.both, t.n),
        })
        .collect();
    Ok(ExperimentReport { rows })
}

fn format_temperature(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{t:.1}")
    } else {
        t.to_string()
    }
}

impl ExperimentReport {
    /// CSV with [`REPORT_HEADER`]; percentages to one decimal, an absent
    /// reasonableness figure as an empty field.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.domain.clone(),
                r.n_examples.to_string(),
                format_temperature(r.temperature),
                r.context.as_str().to_string(),
                r.features.as_str().to_string(),
                r.strategy.as_str().to_string(),
                r.n.to_string(),
                r.pct_reasonable.map(|p| format!("{p:.1}")).unwrap_or_default(),
                format!("{:.1}", r.pct_relevant),
                format!("{:.1}", r.pct_interpretable),
                format!("{:.1}", r.pct_relevant_and_interpretable),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}
