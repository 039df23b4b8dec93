use std::path::{Path, PathBuf};

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_gold, CellConfig, EvalError, GoldStandard, ResponseRecord, Strategy};
use crate::decoder::{decode_iteratively, load_lexicon, ActionLexicon, DecodePolicy};
use crate::gateway::{cache_key, Gateway, GenerationParams};
use crate::prompt::{load_library, render_prompt, ExampleLibrary, FeatureScope, RenderedPrompt, Style};
use crate::scene::{load_scene, ContextScope, Scene};
use crate::steps::{judge_interpretable, load_grammar, parse_response, AgentGrammar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub scene: PathBuf,
    pub gold: PathBuf,
}

/// Values for each varied setting. Cells are the cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Axes {
    pub n_examples: Vec<usize>,
    pub temperature: Vec<f64>,
    pub context: Vec<ContextScope>,
    pub features: Vec<FeatureScope>,
    pub style: Vec<Style>,
    pub delimiters: Vec<bool>,
    pub strategy: Vec<Strategy>,
}

impl Default for Axes {
    fn default() -> Self {
        Self {
            n_examples: vec![1],
            temperature: vec![0.0],
            context: vec![ContextScope::Partial],
            features: vec![FeatureScope::Full],
            style: vec![Style::Terse],
            delimiters: vec![true],
            strategy: vec![Strategy::Batch],
        }
    }
}

fn default_max_tokens() -> u32 {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub experiment: String,
    pub examples: PathBuf,
    pub grammar: PathBuf,
    pub lexicon: PathBuf,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub axes: Axes,
    #[serde(default)]
    pub decode: DecodePolicy,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub domain: String,
    pub config: CellConfig,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))
    }

    /// Cross product of domains and axis values, domain outermost.
    pub fn cells(&self) -> Vec<Cell> {
        let a = &self.axes;
        let mut cells = Vec::new();
        for d in &self.domains {
            for &n_examples in &a.n_examples {
                for &temperature in &a.temperature {
                    for &context_scope in &a.context {
                        for &feature_scope in &a.features {
                            for &style in &a.style {
                                for &delimiters in &a.delimiters {
                                    for &strategy in &a.strategy {
                                        cells.push(Cell {
                                            domain: d.name.clone(),
                                            config: CellConfig {
                                                style,
                                                delimiters,
                                                n_examples,
                                                temperature,
                                                context_scope,
                                                feature_scope,
                                                strategy,
                                            },
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub scene: Scene,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepInputs {
    pub domains: Vec<Domain>,
    pub gold: GoldStandard,
    pub library: ExampleLibrary,
    pub grammar: AgentGrammar,
    pub lexicon: ActionLexicon,
}

fn read(base: &Path, path: &Path) -> Result<String, EvalError> {
    let full = base.join(path);
    std::fs::read_to_string(&full).map_err(|e| EvalError::Config(format!("{}: {e}", full.display())))
}

/// Reads a sweep config and every file it names. Relative paths resolve
/// against the config file's directory.
pub fn load_sweep(path: &Path) -> Result<(SweepConfig, SweepInputs), EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
    let config = SweepConfig::from_toml(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config_err = |what: &Path, e: &dyn std::fmt::Display| EvalError::Config(format!("{}: {e}", what.display()));
    let library = load_library(&read(base, &config.examples)?).map_err(|e| config_err(&config.examples, &e))?;
    let grammar = load_grammar(&read(base, &config.grammar)?).map_err(|e| config_err(&config.grammar, &e))?;
    let lexicon = load_lexicon(&read(base, &config.lexicon)?);
    let mut gold = GoldStandard::default();
    let mut domains = Vec::new();
    for d in &config.domains {
        let scene = load_scene(&read(base, &d.scene)?).map_err(|e| config_err(&d.scene, &e))?;
        gold.merge(load_gold(&read(base, &d.gold)?).map_err(|e| config_err(&d.gold, &e))?);
        domains.push(Domain {
            name: d.name.clone(),
            scene,
        });
    }
    Ok((
        config,
        SweepInputs {
            domains,
            gold,
            library,
            grammar,
            lexicon,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub records: usize,
    pub errors: Vec<String>,
    /// Some prompt of the cell produced no records, or the scene was empty.
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<ResponseRecord>,
    pub cells: Vec<CellSummary>,
}

impl SweepOutcome {
    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| !c.incomplete)
    }
}

fn record_id(experiment: &str, cell: &Cell, object_index: usize, sample: usize) -> String {
    let identity = serde_json::json!([experiment, cell.domain, cell.config, object_index, sample]);
    let digest = Sha256::digest(identity.to_string().as_bytes());
    hex::encode(&digest[..8])
}

struct Job<'a> {
    cell_index: usize,
    cell: &'a Cell,
    scene: &'a Scene,
    object_index: usize,
}

struct Sweeper<'a> {
    config: &'a SweepConfig,
    inputs: &'a SweepInputs,
    gateway: &'a Gateway,
}

impl Sweeper<'_> {
    fn batch_params(&self, prompt: &RenderedPrompt, temperature: f64) -> GenerationParams {
        GenerationParams {
            temperature,
            n_responses: GenerationParams::responses_for_temperature(temperature),
            max_tokens: self.config.max_tokens,
            stop_sequences: prompt.stop_sequences.clone(),
            top_logprobs: 1,
        }
    }

    /// Response texts for one prompt, best first, and the cache key of the
    /// request that started them.
    fn responses(&self, prompt: &RenderedPrompt, cell: &CellConfig) -> Result<(Vec<String>, String), String> {
        let wanted = GenerationParams::responses_for_temperature(cell.temperature) as usize;
        match cell.strategy {
            Strategy::Batch => {
                let params = self.batch_params(prompt, cell.temperature);
                let key = cache_key(&prompt.text, &params).to_string();
                let completion = self.gateway.complete(&prompt.text, &params).map_err(|e| e.to_string())?;
                Ok((completion.choices.into_iter().map(|c| c.text).collect(), key))
            }
            Strategy::Iterative => {
                let outcome = decode_iteratively(prompt, self.gateway, &self.inputs.lexicon, &self.config.decode)
                    .map_err(|e| e.to_string())?;
                let key = cache_key(&prompt.text, &crate::decoder::first_word_params(prompt)).to_string();
                let texts: Vec<String> = outcome.responses.into_iter().take(wanted).map(|r| r.text).collect();
                if texts.is_empty() {
                    let why = outcome.failures.first().map(|f| f.error.to_string()).unwrap_or_default();
                    return Err(format!("no decoded response: {why}"));
                }
                Ok((texts, key))
            }
        }
    }

    fn run(&self, job: &Job) -> Result<Vec<ResponseRecord>, String> {
        let cell = job.cell;
        let prompt = render_prompt(job.scene, job.object_index, &cell.config.prompt_config(), &self.inputs.library)
            .map_err(|e| e.to_string())?;
        let (texts, key) = self.responses(&prompt, &cell.config)?;
        let object = &job.scene.objects[job.object_index];
        Ok(texts
            .into_iter()
            .enumerate()
            .map(|(sample, response)| {
                let (steps, verdict) = match parse_response(&response, &self.inputs.grammar) {
                    Ok(list) => {
                        let verdict = judge_interpretable(&list, &self.inputs.grammar, job.scene);
                        (Some(list), Some(verdict))
                    }
                    Err(_) => (None, None),
                };
                ResponseRecord {
                    id: record_id(&self.config.experiment, cell, job.object_index, sample),
                    experiment: self.config.experiment.clone(),
                    domain: cell.domain.clone(),
                    task: job.scene.task_phrase.clone(),
                    object_index: job.object_index,
                    object: object.name.clone(),
                    config: cell.config,
                    sample,
                    prompt: prompt.text.clone(),
                    cache_key: key.clone(),
                    response,
                    steps,
                    auto_interpretable: verdict.as_ref().is_some_and(|v| v.interpretable),
                    ungrounded_phrases: verdict.map(|v| v.ungrounded_phrases).unwrap_or_default(),
                    created_at: Utc::now(),
                }
            })
            .collect())
    }
}

/// Runs every cell of the sweep: one prompt per scene object, three
/// ranked responses when sampling and one otherwise. Failed prompts are
/// reported per cell and skipped.
pub fn run_sweep(config: &SweepConfig, inputs: &SweepInputs, gateway: &Gateway) -> Result<SweepOutcome, EvalError> {
    for d in &inputs.domains {
        for i in 0..d.scene.objects.len() {
            if inputs.gold.get(&d.scene.task_phrase, i).is_none() {
                return Err(EvalError::MissingGoldEntry {
                    task: d.scene.task_phrase.clone(),
                    object_index: i,
                });
            }
        }
    }
    let cells = config.cells();
    let mut summaries = Vec::with_capacity(cells.len());
    let mut jobs = Vec::new();
    for (cell_index, cell) in cells.iter().enumerate() {
        let scene = inputs
            .domains
            .iter()
            .find(|d| d.name == cell.domain)
            .map(|d| &d.scene)
            .ok_or_else(|| EvalError::Config(format!("domain `{}` was not loaded", cell.domain)))?;
        summaries.push(CellSummary {
            cell: cell.clone(),
            records: 0,
            errors: Vec::new(),
            incomplete: scene.objects.is_empty(),
        });
        jobs.extend((0..scene.objects.len()).map(|object_index| Job {
            cell_index,
            cell,
            scene,
            object_index,
        }));
    }
    let sweeper = Sweeper {
        config,
        inputs,
        gateway,
    };
    let results: Vec<_> = jobs.par_iter().map(|job| sweeper.run(job)).collect();
    let mut records = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        let summary = &mut summaries[job.cell_index];
        match result {
            Ok(rs) => {
                summary.records += rs.len();
                records.extend(rs);
            }
            Err(e) => {
                summary.errors.push(format!("object {}: {e}", job.object_index));
                summary.incomplete = true;
            }
        }
    }
    Ok(SweepOutcome {
        records,
        cells: summaries,
    })
}
