use std::collections::HashSet;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use taskprompt::decoder::{decode_iteratively, load_lexicon, ActionLexicon, DecodePolicy};
use taskprompt::defaults;
use taskprompt::eval::{
    aggregate, latest_ratings, load_sweep, pending_ratings, run_sweep, AggregationMode, GoldStandard, JsonlStore,
    RatingRecord, ResponseRecord,
};
use taskprompt::gateway::{
    BackendConfig, Gateway, GenerationParams, HttpTransport, ResponseCache, ScriptedTransport, SyntheticTransport,
    Transport,
};
use taskprompt::prompt::{load_library, render_prompt_with_steps, ExampleLibrary, PromptConfig, RenderedPrompt};
use taskprompt::scene::{load_scene, Scene};
use taskprompt::steps::{judge_interpretable, load_grammar, parse_goal, parse_response, AgentGrammar, StepEntry};
use taskprompt_service::{AppState, ServiceConfig};

use crate::{Command, Common, PromptArgs};

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    fn new(code: &str, message: impl std::fmt::Display) -> Self {
        Self {
            code: code.to_string(),
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn io_err(e: io::Error) -> CliError {
    CliError::new("io", e)
}

fn load_lib(path: Option<&Path>) -> Result<ExampleLibrary> {
    match path {
        Some(p) => load_library(&read_file(p)?).map_err(|e| CliError::new("invalid_library", e)),
        None => Ok(defaults::library()),
    }
}

fn load_gram(path: Option<&Path>) -> Result<AgentGrammar> {
    match path {
        Some(p) => load_grammar(&read_file(p)?).map_err(|e| CliError::new("invalid_grammar", e)),
        None => Ok(defaults::grammar()),
    }
}

fn load_lex(path: Option<&Path>) -> Result<ActionLexicon> {
    match path {
        Some(p) => Ok(load_lexicon(&read_file(p)?)),
        None => Ok(defaults::lexicon()),
    }
}

fn load_scene_file(path: &Path) -> Result<Scene> {
    load_scene(&read_file(path)?).map_err(|e| CliError::new("invalid_scene", e))
}

/// Cache-only runs never build a transport, so no credentials are needed.
fn build_gateway(common: &Common) -> Result<Gateway> {
    let cache = ResponseCache::open(&common.cache_dir).map_err(|e| CliError::new(e.code(), e))?;
    if common.cache_only {
        return Ok(Gateway::replay_only(cache));
    }
    let backend = BackendConfig::load(common.backend_config.as_deref()).map_err(|e| CliError::new("config", e))?;
    let (transport, model): (Arc<dyn Transport>, String) = match common.backend.as_str() {
        "live" => (Arc::new(HttpTransport::new(&backend)), backend.model.clone()),
        "synthetic" => (Arc::new(SyntheticTransport::new()), "synthetic".to_string()),
        other => match other.strip_prefix("script:") {
            Some(path) => {
                let script = ScriptedTransport::from_json(&read_file(Path::new(path))?)
                    .map_err(|e| CliError::new("invalid_script", e))?;
                (Arc::new(script), "scripted".to_string())
            }
            None => return Err(CliError::new("config", format!("unknown backend `{other}`"))),
        },
    };
    Ok(Gateway::new(transport)
        .with_cache(cache)
        .with_model(model)
        .with_max_parallel(backend.max_parallel))
}

fn render(args: &PromptArgs) -> Result<(Scene, RenderedPrompt)> {
    let scene = load_scene_file(&args.scene)?;
    let library = load_lib(args.library.as_deref())?;
    let config = PromptConfig {
        style: args.style,
        delimiters: !args.no_delimiters,
        n_examples: args.examples,
        context_scope: args.context,
        feature_scope: args.features,
        elicit_goal: args.elicit_goal,
    };
    let prompt = render_prompt_with_steps(&scene, args.object, &config, &library, &args.steps)
        .map_err(|e| CliError::new("invalid_prompt", e))?;
    Ok((scene, prompt))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildPrompt { prompt, common } => {
            let (_, rendered) = render(&prompt)?;
            if common.json {
                print_json(&json!({"text": rendered.text, "stop_sequences": rendered.stop_sequences}));
            } else {
                print!("{}", rendered.text);
            }
            Ok(())
        }
        Command::Complete {
            prompt,
            temperature,
            n,
            max_tokens,
            common,
        } => {
            let (_, rendered) = render(&prompt)?;
            let gateway = build_gateway(&common)?;
            let params = GenerationParams {
                temperature,
                n_responses: n.unwrap_or_else(|| GenerationParams::responses_for_temperature(temperature)),
                max_tokens,
                stop_sequences: rendered.stop_sequences.clone(),
                top_logprobs: 1,
            };
            let completion = gateway
                .complete(&rendered.text, &params)
                .map_err(|e| CliError::new(e.code(), e))?;
            if common.json {
                print_json(&serde_json::to_value(&completion).expect("serializable"));
            } else {
                for (i, choice) in completion.choices.iter().enumerate() {
                    if completion.choices.len() > 1 {
                        println!("--- response {}", i + 1);
                    }
                    println!("{}", choice.text);
                }
            }
            Ok(())
        }
        Command::Decode {
            prompt,
            lexicon,
            known_threshold,
            fallback_threshold,
            max_branches,
            max_steps,
            common,
        } => {
            let (_, rendered) = render(&prompt)?;
            let lexicon = load_lex(lexicon.as_deref())?;
            let gateway = build_gateway(&common)?;
            let policy = DecodePolicy {
                known_threshold,
                fallback_threshold,
                max_branches_per_step: max_branches,
                max_steps,
                ..DecodePolicy::default()
            };
            let outcome = decode_iteratively(&rendered, &gateway, &lexicon, &policy)
                .map_err(|e| CliError::new("decode", e))?;
            if common.json {
                print_json(&serde_json::to_value(&outcome).expect("serializable"));
            } else {
                for (i, r) in outcome.responses.iter().enumerate() {
                    let words: Vec<&str> = r.forced_words.iter().map(|w| w.word.as_str()).collect();
                    println!("--- response {} p={:.4} words={}", i + 1, r.probability(), words.join(","));
                    println!("{}", r.text);
                }
                for f in &outcome.failures {
                    eprintln!("branch failed after {} words: {}", f.forced_words.len(), f.error);
                }
            }
            Ok(())
        }
        Command::Parse {
            input,
            grammar,
            scene,
            goal,
            common,
        } => {
            let text = read_file(&input)?;
            let grammar = load_gram(grammar.as_deref())?;
            if goal {
                let goal = parse_goal(&text, &grammar).map_err(|e| CliError::new("goal_pattern_mismatch", e))?;
                if common.json {
                    print_json(&serde_json::to_value(&goal).expect("serializable"));
                } else {
                    println!("{} | {} | {}", goal.object_phrase, goal.relation, goal.target_phrase);
                }
                return Ok(());
            }
            let list = parse_response(&text, &grammar).map_err(|e| CliError::new("empty_response", e))?;
            let verdict = match &scene {
                Some(path) => Some(judge_interpretable(&list, &grammar, &load_scene_file(path)?)),
                None => None,
            };
            if common.json {
                print_json(&json!({"steps": list, "verdict": verdict}));
                return Ok(());
            }
            for step in &list.steps {
                match step {
                    StepEntry::Parsed(p) => {
                        let dest = p
                            .destination
                            .as_ref()
                            .map(|d| format!(" | {} {}", d.preposition, d.phrase))
                            .unwrap_or_default();
                        println!("{}. {} | {}{dest}", p.index, p.verb, p.object_phrase);
                    }
                    StepEntry::Unparsable(u) => println!("{}. ?? {:?}: {}", u.index, u.reason, u.raw),
                }
            }
            println!("terminated by delimiter: {}", list.terminated_by_delimiter);
            if let Some(v) = verdict {
                println!("interpretable: {}", v.interpretable);
                if !v.ungrounded_phrases.is_empty() {
                    println!("ungrounded: {}", v.ungrounded_phrases.join(", "));
                }
            }
            Ok(())
        }
        Command::Sweep {
            config,
            out,
            data_dir,
            mode,
            common,
        } => sweep(&config, out.as_deref(), data_dir.as_deref(), &mode, &common),
        Command::Serve {
            addr,
            data_dir,
            library,
            grammar,
            lexicon,
            gold_from,
            common,
        } => {
            let mut gold = GoldStandard::default();
            for path in &gold_from {
                let (_, inputs) = load_sweep(path).map_err(|e| CliError::new(e.code(), e))?;
                gold.merge(inputs.gold);
            }
            let config = ServiceConfig {
                data_dir,
                library: load_lib(library.as_deref())?,
                grammar: load_gram(grammar.as_deref())?,
                lexicon: load_lex(lexicon.as_deref())?,
                gold,
            };
            let state = AppState::open(config, build_gateway(&common)?).map_err(|e| CliError::new("io", e))?;
            let runtime = tokio::runtime::Runtime::new().map_err(io_err)?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                taskprompt_service::serve(listener, state).await
            })
            .map_err(io_err)
        }
        Command::Rate {
            data_dir,
            rater,
            experiment,
            common: _,
        } => rate(&data_dir, &rater, experiment.as_deref()),
    }
}

fn sweep(config: &Path, out: Option<&Path>, data_dir: Option<&Path>, mode: &str, common: &Common) -> Result<()> {
    let mode = match mode {
        "auto" => AggregationMode::AutoOnly,
        "human" => AggregationMode::HumanFirst,
        other => return Err(CliError::new("bad_mode", format!("unknown mode `{other}`"))),
    };
    let (config, inputs) = load_sweep(config).map_err(|e| CliError::new(e.code(), e))?;
    let gateway = build_gateway(common)?;
    let outcome = run_sweep(&config, &inputs, &gateway).map_err(|e| CliError::new(e.code(), e))?;

    let mut ratings = Vec::new();
    if let Some(dir) = data_dir {
        std::fs::create_dir_all(dir).map_err(io_err)?;
        let store = JsonlStore::<ResponseRecord>::new(dir.join("responses.jsonl"));
        let known: HashSet<String> = store
            .load()
            .map_err(|e| CliError::new(e.code(), e))?
            .into_iter()
            .map(|r| r.id)
            .collect();
        let fresh: Vec<ResponseRecord> = outcome.records.iter().filter(|r| !known.contains(&r.id)).cloned().collect();
        store.append_all(&fresh).map_err(|e| CliError::new(e.code(), e))?;
        ratings = JsonlStore::<RatingRecord>::new(dir.join("ratings.jsonl"))
            .load()
            .map_err(|e| CliError::new(e.code(), e))?;
    }
    let report = aggregate(&outcome.records, &latest_ratings(&ratings), &inputs.gold, mode)
        .map_err(|e| CliError::new(e.code(), e))?;
    let csv = if common.json {
        serde_json::to_string_pretty(&report.rows).expect("serializable") + "\n"
    } else {
        report.to_csv()
    };
    match out {
        Some(path) => std::fs::write(path, &csv).map_err(io_err)?,
        None => print!("{csv}"),
    }

    let stats = gateway.stats();
    eprintln!(
        "{}: {} cells, {} records, {} live calls, {} cache hits",
        config.experiment,
        outcome.cells.len(),
        outcome.records.len(),
        stats.live_calls,
        stats.cache_hits
    );
    for cell in outcome.cells.iter().filter(|c| c.incomplete) {
        eprintln!("incomplete cell {} {:?}: {}", cell.cell.domain, cell.cell.config, cell.errors.join("; "));
    }
    if outcome.is_complete() {
        Ok(())
    } else {
        Err(CliError::new("incomplete_sweep", "some cells produced no responses"))
    }
}

fn ask(lines: &mut impl Iterator<Item = io::Result<String>>, question: &str) -> Result<Option<bool>> {
    loop {
        print!("{question} [y/n] ");
        io::stdout().flush().map_err(io_err)?;
        let Some(line) = lines.next() else {
            return Ok(None);
        };
        match line.map_err(io_err)?.trim() {
            "y" | "Y" | "yes" => return Ok(Some(true)),
            "n" | "N" | "no" => return Ok(Some(false)),
            _ => {}
        }
    }
}

fn rate(data_dir: &Path, rater: &str, experiment: Option<&str>) -> Result<()> {
    if rater.trim().is_empty() {
        return Err(CliError::new("missing_rater", "rater id is empty"));
    }
    let records = JsonlStore::<ResponseRecord>::new(data_dir.join("responses.jsonl"))
        .load()
        .map_err(|e| CliError::new(e.code(), e))?;
    let store = JsonlStore::<RatingRecord>::new(data_dir.join("ratings.jsonl"));
    let ratings = store.load().map_err(|e| CliError::new(e.code(), e))?;
    let pending = pending_ratings(&records, &ratings, experiment, Some(rater));
    let total = pending.len();
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    for (i, record) in pending.into_iter().enumerate() {
        println!("\n[{}/{total}] {} / {} / object {}: {}", i + 1, record.domain, record.task, record.object_index, record.object);
        println!("{}", record.response);
        let Some(reasonable) = ask(&mut lines, "reasonable?")? else { break };
        let Some(relevant) = ask(&mut lines, "relevant?")? else { break };
        let Some(interpretable) = ask(&mut lines, "interpretable?")? else { break };
        store
            .append(&RatingRecord {
                response_id: record.id.clone(),
                rater: rater.to_string(),
                reasonable,
                relevant,
                interpretable,
                note: String::new(),
            })
            .map_err(|e| CliError::new(e.code(), e))?;
    }
    Ok(())
}
