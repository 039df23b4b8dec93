use super::{ExampleLibrary, FeatureScope, PromptConfig, PromptError, PromptExample, PromptSlots, RenderedPrompt, Style, MAX_EXAMPLES};
use crate::scene::{select_context, ContextScope, ObjectDescriptor, Scene};

pub const END_TASK: &str = "(END TASK)";
pub const RESULT_OPEN: &str = "(RESULT)";
pub const RESULT_CLOSE: &str = "(END RESULT)";

/// Stop sequence used when paired delimiters are off: examples and the
/// partial task are separated by a blank line.
const BLANK_LINE: &str = "\n\n";

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn sentence(s: &str) -> String {
    if s.ends_with(['.', '?', '!']) {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

fn indefinite_article(next_word: &str) -> &'static str {
    match next_word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Clauses describing one object. Terse and colloquial give
/// `"<name> <attr> is <value>"` per feature then `"<name> is in <location>"`;
/// predicate gives `Located-on(<name>, <location>)` then `<Attr>(<name>, <value>)`.
pub fn render_feature_clauses(obj: &ObjectDescriptor, style: Style, scope: FeatureScope) -> Vec<String> {
    let features: &[_] = match scope {
        FeatureScope::Full => &obj.features,
        FeatureScope::NameOnly => &[],
    };
    match style {
        Style::Terse | Style::Colloquial => features
            .iter()
            .map(|f| format!("{} {} is {}", obj.name, f.attribute, f.value))
            .chain(std::iter::once(format!("{} is in {}", obj.name, obj.location)))
            .collect(),
        Style::Predicate => std::iter::once(format!("Located-on({}, {})", obj.name, obj.location))
            .chain(
                features
                    .iter()
                    .map(|f| format!("{}({}, {})", capitalize(&f.attribute), obj.name, f.value)),
            )
            .collect(),
    }
}

/// `"I see an empty metal soda can in conference room."`
fn colloquial_sighting(obj: &ObjectDescriptor, scope: FeatureScope) -> String {
    let mut words: Vec<&str> = match scope {
        FeatureScope::Full => obj.features.iter().map(|f| f.value.as_str()).collect(),
        FeatureScope::NameOnly => Vec::new(),
    };
    words.push(&obj.name);
    let phrase = words.join(" ");
    format!("I see {} {} in {}.", indefinite_article(&phrase), phrase, obj.location)
}

/// Description of one non-target object inside the full-context block.
fn context_object_sentence(obj: &ObjectDescriptor, style: Style, scope: FeatureScope) -> String {
    match style {
        Style::Terse => format!("Aware of {}, {}.", obj.name, render_feature_clauses(obj, style, scope).join(", ")),
        Style::Colloquial => colloquial_sighting(obj, scope),
        Style::Predicate => std::iter::once(format!("Observe({}).", obj.name))
            .chain(render_feature_clauses(obj, style, scope).into_iter().map(|c| format!("{c}.")))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn numbered_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_example(example: &PromptExample, config: &PromptConfig) -> Result<String, PromptError> {
    let mut out = String::new();
    if config.delimiters {
        out.push_str("(TASK) ");
    }
    out.push_str("Goal: ");
    out.push_str(&sentence(&example.goal));
    if !example.context_clauses.is_empty() {
        let context: Vec<_> = example.context_clauses.iter().map(|c| sentence(c)).collect();
        out.push_str(" Task context: ");
        out.push_str(&context.join(" "));
    }
    out.push_str(" Steps:");
    if config.elicit_goal {
        let result = example
            .result_clause
            .as_deref()
            .ok_or_else(|| PromptError::ExampleMissingResult(example.name.clone()))?;
        out.push_str(&format!(" {RESULT_OPEN} {result} {RESULT_CLOSE}"));
    }
    out.push('\n');
    out.push_str(&numbered_steps(&example.steps));
    if config.delimiters {
        out.push(' ');
        out.push_str(END_TASK);
    }
    Ok(out)
}

/// Tail of the partial task: where the model starts writing.
fn steps_tail(style: Style, accepted: &[String], elicit_goal: bool) -> String {
    if elicit_goal {
        return format!(" Steps: {RESULT_OPEN} ");
    }
    if accepted.is_empty() && style == Style::Predicate {
        return " Steps:".to_string();
    }
    let mut tail = String::from(" Steps: ");
    if !accepted.is_empty() {
        tail.push_str(&numbered_steps(accepted));
        tail.push('\n');
    }
    tail.push_str(&format!("{}. ", accepted.len() + 1));
    tail
}

/// Renders the full prompt for one target object.
pub fn render_prompt(
    scene: &Scene,
    target_index: usize,
    config: &PromptConfig,
    library: &ExampleLibrary,
) -> Result<RenderedPrompt, PromptError> {
    render_prompt_with_steps(scene, target_index, config, library, &[])
}

/// Same as [`render_prompt`]; the config's `elicit_goal` flag decides whether
/// each example carries its `(RESULT)` block and the partial task opens one.
pub fn render_goal_eliciting_prompt(
    scene: &Scene,
    target_index: usize,
    config: &PromptConfig,
    library: &ExampleLibrary,
) -> Result<RenderedPrompt, PromptError> {
    render_prompt(scene, target_index, config, library)
}

/// Renders the prompt with `accepted` steps already written after `Steps:`,
/// ending at the next step number. Ignored when eliciting a goal, since the
/// goal precedes all steps.
pub fn render_prompt_with_steps(
    scene: &Scene,
    target_index: usize,
    config: &PromptConfig,
    library: &ExampleLibrary,
    accepted: &[String],
) -> Result<RenderedPrompt, PromptError> {
    if config.n_examples > MAX_EXAMPLES {
        return Err(PromptError::TooManyExamples(config.n_examples));
    }
    if config.n_examples > library.len() {
        return Err(PromptError::NotEnoughExamples {
            requested: config.n_examples,
            available: library.len(),
        });
    }
    let target = scene.object(target_index)?;
    let view = select_context(scene, target_index, config.context_scope)?;
    let (style, features) = (config.style, config.feature_scope);

    let mut text = String::new();

    let blocks = library.examples[..config.n_examples]
        .iter()
        .map(|e| render_example(e, config))
        .collect::<Result<Vec<_>, _>>()?;
    if !blocks.is_empty() {
        if config.delimiters {
            text.push_str("(EXAMPLES) ");
        }
        text.push_str(&blocks.join("\n\n"));
        text.push_str("\n\n");
        if config.delimiters {
            text.push_str("(END EXAMPLES)\n");
        }
    }

    let others = view.objects.iter().skip(1).collect::<Vec<_>>();
    if config.context_scope == ContextScope::Full && !others.is_empty() {
        let sentences: Vec<_> = others
            .iter()
            .map(|o| context_object_sentence(o, style, features))
            .collect();
        if config.delimiters {
            text.push_str(&format!("(CONTEXT) {} (END CONTEXT)\n", sentences.join(" ")));
        } else {
            text.push_str(&format!("Context: {}\n", sentences.join(" ")));
        }
    }

    if config.delimiters {
        text.push_str("(TASK) ");
    }
    let described = !view.objects.is_empty();
    let clauses = render_feature_clauses(target, style, features);
    match style {
        Style::Terse => {
            text.push_str(&format!("Goal: {}", sentence(&scene.task_phrase)));
            if described {
                text.push_str(" Task context: ");
                if let Some(agent) = view.agent_location {
                    text.push_str(&format!("I am in {agent}. "));
                }
                text.push_str(&format!("Aware of {}, {}.", target.name, clauses.join(", ")));
            }
        }
        Style::Colloquial => {
            if described {
                text.push_str(&colloquial_sighting(target, features));
                text.push_str(&format!(
                    " What are steps to {} with {} in it?",
                    scene.task_phrase, target.name
                ));
            } else {
                text.push_str(&format!("What are steps to {}?", scene.task_phrase));
            }
        }
        Style::Predicate => {
            let (verb, args) = scene
                .task_phrase
                .split_once(' ')
                .unwrap_or((scene.task_phrase.as_str(), ""));
            text.push_str(&format!("{}({}).", capitalize(verb), args));
            if described {
                text.push_str(&format!(" Observe({}).", target.name));
                for clause in &clauses {
                    text.push_str(&format!(" {clause}."));
                }
            }
        }
    }
    text.push_str(&steps_tail(style, accepted, config.elicit_goal));

    let mut stop_sequences = Vec::new();
    if config.elicit_goal {
        stop_sequences.push(RESULT_CLOSE.to_string());
    }
    stop_sequences.push(if config.delimiters { END_TASK } else { BLANK_LINE }.to_string());

    Ok(RenderedPrompt {
        text,
        stop_sequences,
        slots: PromptSlots {
            object: target.name.clone(),
            feature_clauses: if described { clauses } else { Vec::new() },
            object_location: format!("{} is in {}", target.name, target.location),
            named_location: target.location.clone(),
            agent_location: view.agent_location.map(str::to_string),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::load_library;
    use crate::scene::load_scene;

    fn scene() -> Scene {
        load_scene(include_str!("../../fixtures/scenes/tidy-conference-room.scene")).unwrap()
    }

    fn library() -> ExampleLibrary {
        load_library(include_str!("../../fixtures/examples.lib")).unwrap()
    }

    #[test]
    fn can_feature_clauses() {
        let can = &scene().objects[0];
        assert_eq!(
            render_feature_clauses(can, Style::Terse, FeatureScope::Full),
            [
                "can contents is empty",
                "can material is metal",
                "can property is soda",
                "can is in conference room"
            ]
        );
        assert_eq!(
            render_feature_clauses(can, Style::Terse, FeatureScope::NameOnly),
            ["can is in conference room"]
        );
    }

    #[test]
    fn featureless_object_gets_only_location() {
        let table = &scene().objects[5];
        assert_eq!(
            render_feature_clauses(table, Style::Terse, FeatureScope::Full),
            ["table is in conference room"]
        );
    }

    #[test]
    fn degenerate_config_elides_everything_optional() {
        let config = PromptConfig {
            n_examples: 0,
            context_scope: ContextScope::None,
            feature_scope: FeatureScope::NameOnly,
            ..PromptConfig::default()
        };
        let p = render_prompt(&scene(), 0, &config, &library()).unwrap();
        assert_eq!(p.text, "(TASK) Goal: tidy conference room. Steps: 1. ");
        assert_eq!(p.stop_sequences, [END_TASK]);
        assert_eq!(p.open_step_number(), Some(1));
    }

    #[test]
    fn predicate_partial_task() {
        let config = PromptConfig {
            style: Style::Predicate,
            n_examples: 0,
            ..PromptConfig::default()
        };
        let p = render_prompt(&scene(), 0, &config, &library()).unwrap();
        assert_eq!(
            p.text,
            "(TASK) Tidy(conference room). Observe(can). Located-on(can, conference room). \
             Contents(can, empty). Material(can, metal). Property(can, soda). Steps:"
        );
        assert_eq!(p.open_step_number(), None);
    }

    #[test]
    fn colloquial_uses_article_by_vowel() {
        let config = PromptConfig {
            style: Style::Colloquial,
            n_examples: 0,
            ..PromptConfig::default()
        };
        let lib = library();
        let can = render_prompt(&scene(), 0, &config, &lib).unwrap();
        assert!(can
            .text
            .contains("I see an empty metal soda can in conference room. What are steps to tidy conference room with can in it?"));
        let chair = render_prompt(&scene(), 6, &config, &lib).unwrap();
        assert!(chair.text.contains("I see a chair in conference room."));
    }

    #[test]
    fn too_many_examples() {
        let config = PromptConfig {
            n_examples: 3,
            ..PromptConfig::default()
        };
        let mut lib = library();
        lib.examples.truncate(2);
        assert_eq!(
            render_prompt(&scene(), 0, &config, &lib),
            Err(PromptError::NotEnoughExamples { requested: 3, available: 2 })
        );
        let config = PromptConfig { n_examples: 4, ..config };
        assert_eq!(render_prompt(&scene(), 0, &config, &library()), Err(PromptError::TooManyExamples(4)));
    }

    #[test]
    fn bad_target_index() {
        assert!(matches!(
            render_prompt(&scene(), 42, &PromptConfig::default(), &library()),
            Err(PromptError::Scene(_))
        ));
    }

    #[test]
    fn full_context_block_precedes_task() {
        let config = PromptConfig {
            context_scope: ContextScope::Full,
            n_examples: 0,
            ..PromptConfig::default()
        };
        let p = render_prompt(&scene(), 1, &config, &library()).unwrap();
        assert!(p.text.starts_with(
            "(CONTEXT) Aware of can, can contents is empty, can material is metal, can property is soda, can is in conference room. Aware of cup,"
        ));
        let (context, task) = p.text.split_once("(END CONTEXT)\n").unwrap();
        assert_eq!(context.matches("Aware of").count(), 8);
        assert!(task.starts_with("(TASK) Goal: tidy conference room. Task context: I am in conference room. Aware of bottle,"));
    }

    #[test]
    fn accepted_steps_extend_the_partial_task() {
        let steps = vec!["Pick up can".to_string(), "Take can to kitchen".to_string()];
        let p = render_prompt_with_steps(&scene(), 0, &PromptConfig::default(), &library(), &steps).unwrap();
        assert!(p.text.ends_with("Steps: 1. Pick up can\n2. Take can to kitchen\n3. "));
        assert_eq!(p.open_step_number(), Some(3));
    }

    #[test]
    fn goal_elicitation_places_result_before_steps() {
        let config = PromptConfig {
            elicit_goal: true,
            ..PromptConfig::default()
        };
        let p = render_goal_eliciting_prompt(&scene(), 1, &config, &library()).unwrap();
        assert!(p.text.contains(
            "Steps: (RESULT) The goal is that the package is on the desk in Gary's office (END RESULT)\n1. Pick up package"
        ));
        assert!(p.text.ends_with("bottle is in conference room. Steps: (RESULT) "));
        assert_eq!(p.stop_sequences, [RESULT_CLOSE, END_TASK]);
    }

    #[test]
    fn goal_elicitation_requires_result_clauses() {
        let config = PromptConfig {
            elicit_goal: true,
            ..PromptConfig::default()
        };
        let mut lib = library();
        lib.examples[0].result_clause = None;
        assert_eq!(
            render_goal_eliciting_prompt(&scene(), 1, &config, &lib),
            Err(PromptError::ExampleMissingResult("deliver-package".into()))
        );
    }

    #[test]
    fn goal_flag_off_is_plain_render() {
        let config = PromptConfig::default();
        assert_eq!(
            render_goal_eliciting_prompt(&scene(), 1, &config, &library()),
            render_prompt(&scene(), 1, &config, &library())
        );
    }

    #[test]
    fn no_delimiters_keeps_keyword_tags() {
        let config = PromptConfig {
            delimiters: false,
            n_examples: 2,
            ..PromptConfig::default()
        };
        let p = render_prompt(&scene(), 0, &config, &library()).unwrap();
        for tag in ["(TASK)", "(END TASK)", "(EXAMPLES)", "(END EXAMPLES)"] {
            assert!(!p.text.contains(tag), "{tag} leaked");
        }
        for tag in ["Goal:", "Task context:", "Steps:"] {
            assert!(p.text.contains(tag));
        }
        assert_eq!(p.stop_sequences, ["\n\n"]);
    }
}
