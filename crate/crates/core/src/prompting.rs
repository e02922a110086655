//! Prompt templates and the builders that turn task instances into requests.
//!
//! Templates are plain text with `${name}` placeholders, keyed by
//! `<task_kind>/<name>` or `common/<name>`. A template named
//! `<name>@<model-prefix>` overrides `<name>` for models whose id starts with
//! that prefix. The built-in catalog embeds the files under `prompts/`;
//! [`PromptCatalog::load_dir`] reads an edited copy at runtime.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ChatMessage;
use crate::datasets::{TaskInstance, TaskKind};

static PLACEHOLDER: Lazy<Regex> = Lazy::new(|| Regex::new(r"\$\{([A-Za-z0-9_]+)\}").expect("placeholder regex"));

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("placeholder `{0}` is not bound")]
    UnboundPlaceholder(String),
    #[error("two-step solving requires a format note from the selection stage")]
    MissingFormatNote,
    #[error("strategy {strategy} cannot be used for {context}")]
    StrategyMismatch { strategy: Strategy, context: &'static str },
    #[error("format selection in {mode} mode needs {expected} instance(s), got {got}")]
    WrongArity { mode: SelectionMode, expected: usize, got: usize },
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("cannot load prompts from {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatLabel {
    MathEquation,
    UnorderedList,
    OrderedList,
    MarkdownTable,
    MultiLevelList,
    LogicalExpression,
    Json,
    CodeOrPseudocode,
    NaturalLanguage,
    Other,
}

impl FormatLabel {
    pub const ALL: [FormatLabel; 10] = [
        FormatLabel::MathEquation,
        FormatLabel::UnorderedList,
        FormatLabel::OrderedList,
        FormatLabel::MarkdownTable,
        FormatLabel::MultiLevelList,
        FormatLabel::LogicalExpression,
        FormatLabel::Json,
        FormatLabel::CodeOrPseudocode,
        FormatLabel::NaturalLanguage,
        FormatLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FormatLabel::MathEquation => "math_equation",
            FormatLabel::UnorderedList => "unordered_list",
            FormatLabel::OrderedList => "ordered_list",
            FormatLabel::MarkdownTable => "markdown_table",
            FormatLabel::MultiLevelList => "multi_level_list",
            FormatLabel::LogicalExpression => "logical_expression",
            FormatLabel::Json => "json",
            FormatLabel::CodeOrPseudocode => "code_or_pseudocode",
            FormatLabel::NaturalLanguage => "natural_language",
            FormatLabel::Other => "other",
        }
    }

    /// Phrase used in the forced-format directive.
    pub fn directive_phrase(self) -> &'static str {
        match self {
            FormatLabel::MathEquation => "mathematical equations",
            FormatLabel::UnorderedList => "an unordered list",
            FormatLabel::OrderedList => "an ordered list",
            FormatLabel::MarkdownTable => "markdown tables",
            FormatLabel::MultiLevelList => "a multi-level list",
            FormatLabel::LogicalExpression => "logical expressions",
            FormatLabel::Json => "JSON",
            FormatLabel::CodeOrPseudocode => "code or pseudocode",
            FormatLabel::NaturalLanguage => "natural language",
            FormatLabel::Other => "a structured non-natural-language format of your choice",
        }
    }
}

impl fmt::Display for FormatLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FormatLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FormatLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown format label `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cot,
    Autoform,
    ForcedFormat,
    TwoStepInstance,
    TwoStepTask,
    DialogueNl,
    DialogueAutoform,
    DialogueKqml,
    DialogueJsonKqml,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Cot,
        Strategy::Autoform,
        Strategy::ForcedFormat,
        Strategy::TwoStepInstance,
        Strategy::TwoStepTask,
        Strategy::DialogueNl,
        Strategy::DialogueAutoform,
        Strategy::DialogueKqml,
        Strategy::DialogueJsonKqml,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cot => "cot",
            Strategy::Autoform => "autoform",
            Strategy::ForcedFormat => "forced_format",
            Strategy::TwoStepInstance => "two_step_instance",
            Strategy::TwoStepTask => "two_step_task",
            Strategy::DialogueNl => "dialogue_nl",
            Strategy::DialogueAutoform => "dialogue_autoform",
            Strategy::DialogueKqml => "dialogue_kqml",
            Strategy::DialogueJsonKqml => "dialogue_json_kqml",
        }
    }

    pub fn is_dialogue(self) -> bool {
        matches!(
            self,
            Strategy::DialogueNl | Strategy::DialogueAutoform | Strategy::DialogueKqml | Strategy::DialogueJsonKqml
        )
    }

    pub fn is_two_step(self) -> bool {
        matches!(self, Strategy::TwoStepInstance | Strategy::TwoStepTask)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Instance,
    Task,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Instance => "instance",
            SelectionMode::Task => "task",
        })
    }
}

pub const DEFAULT_TASK_EXAMPLES: usize = 5;

fn default_k() -> usize {
    DEFAULT_TASK_EXAMPLES
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_format_label: Option<FormatLabel>,
    #[serde(default = "default_k")]
    pub k_task_examples: usize,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self { strategy, forced_format_label: None, k_task_examples: DEFAULT_TASK_EXAMPLES }
    }

    pub fn forced(label: FormatLabel) -> Self {
        Self { forced_format_label: Some(label), ..Self::new(Strategy::ForcedFormat) }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.strategy == Strategy::ForcedFormat && self.forced_format_label.is_none() {
            return Err(PromptError::InvalidConfig("forced_format requires forced_format_label".into()));
        }
        if self.k_task_examples == 0 {
            return Err(PromptError::InvalidConfig("k_task_examples must be positive".into()));
        }
        Ok(())
    }

    /// Selection mode for two-step strategies.
    pub fn selection_mode(&self) -> Option<SelectionMode> {
        match self.strategy {
            Strategy::TwoStepInstance => Some(SelectionMode::Instance),
            Strategy::TwoStepTask => Some(SelectionMode::Task),
            _ => None,
        }
    }
}

/// Piece of a parsed template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(template_id: impl Into<String>, text: &str) -> Self {
        let mut segments = Vec::new();
        let mut last = 0;
        for caps in PLACEHOLDER.captures_iter(text) {
            let whole = caps.get(0).expect("match");
            if whole.start() > last {
                segments.push(Segment::Literal(text[last..whole.start()].to_string()));
            }
            segments.push(Segment::Placeholder(caps[1].to_string()));
            last = whole.end();
        }
        if last < text.len() {
            segments.push(Segment::Literal(text[last..].to_string()));
        }
        Self { template_id: template_id.into(), segments }
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Placeholder(name) => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }

    /// Substitute bound values verbatim. Values are not re-scanned.
    pub fn render(&self, bindings: &HashMap<String, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => out.push_str(
                    bindings.get(name).ok_or_else(|| PromptError::UnboundPlaceholder(name.clone()))?,
                ),
            }
        }
        Ok(out)
    }
}

/// One few-shot dialogue example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// How the AutoForm strategy derives its prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoformStyle {
    /// The task's CoT prompt followed by the format-encouragement instruction.
    #[default]
    Appended,
    /// The task's dedicated `autoform` template as printed in the prompt tables.
    Verbatim,
}

macro_rules! builtin_templates {
    ($($id:literal),* $(,)?) => {
        &[$(($id, include_str!(concat!("../prompts/", $id, ".txt")))),*]
    };
}

const BUILTIN_TEMPLATES: &[(&str, &str)] = builtin_templates![
    "common/autoform_instruction",
    "common/forced_format",
    "common/two_step_solve",
    "common/format_selection_instance",
    "common/format_selection_task",
    "common/dialogue_shared",
    "common/dialogue_nl",
    "common/dialogue_autoform",
    "common/dialogue_kqml",
    "common/dialogue_json_kqml",
    "coin_flip/cot",
    "coin_flip/autoform",
    "logic_grid/cot",
    "logic_grid/autoform",
    "mm_qa/cot",
    "mm_qa/autoform",
    "aqua/cot",
    "aqua/autoform",
    "info_essentiality/cot",
    "info_essentiality/autoform",
    "info_essentiality/cot@gpt-4",
    "info_essentiality/autoform@gpt-4",
];

const BUILTIN_EXAMPLES: &[(&str, &str)] = &[
    ("hotpot_qa", include_str!("../prompts/hotpot_qa/examples.json")),
    ("wiki_hop", include_str!("../prompts/wiki_hop/examples.json")),
    ("narrative_qa", include_str!("../prompts/narrative_qa/examples.json")),
];

/// Immutable set of templates and dialogue few-shot examples.
#[derive(Debug, Clone, Default)]
pub struct PromptCatalog {
    templates: BTreeMap<String, PromptTemplate>,
    examples: HashMap<String, Vec<DialogueExample>>,
    autoform_style: AutoformStyle,
}

fn strip_final_newline(text: &str) -> &str {
    text.strip_suffix('\n').map(|t| t.strip_suffix('\r').unwrap_or(t)).unwrap_or(text)
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        let mut catalog = Self::default();
        for (id, text) in BUILTIN_TEMPLATES {
            catalog.insert(id, strip_final_newline(text));
        }
        for (task, raw) in BUILTIN_EXAMPLES {
            let examples: Vec<DialogueExample> = serde_json::from_str(raw).expect("bundled examples parse");
            catalog.examples.insert(task.to_string(), examples);
        }
        catalog
    }

    /// Load every `<dir>/<group>/<name>.txt` template and every
    /// `<dir>/<group>/examples.json` few-shot file.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let load_err = |path: &Path, reason: String| PromptError::Load { path: path.display().to_string(), reason };
        let mut catalog = Self::default();
        let groups = std::fs::read_dir(dir).map_err(|e| load_err(dir, e.to_string()))?;
        for group in groups {
            let group = group.map_err(|e| load_err(dir, e.to_string()))?.path();
            if !group.is_dir() {
                continue;
            }
            let group_name = group.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for entry in std::fs::read_dir(&group).map_err(|e| load_err(&group, e.to_string()))? {
                let path = entry.map_err(|e| load_err(&group, e.to_string()))?.path();
                let raw = || std::fs::read_to_string(&path).map_err(|e| load_err(&path, e.to_string()));
                match (path.file_stem().map(|s| s.to_string_lossy().into_owned()), path.extension()) {
                    (Some(stem), Some(ext)) if ext == "txt" => {
                        catalog.insert(&format!("{group_name}/{stem}"), strip_final_newline(&raw()?));
                    }
                    (Some(stem), Some(ext)) if ext == "json" && stem == "examples" => {
                        let examples = serde_json::from_str(&raw()?).map_err(|e| load_err(&path, e.to_string()))?;
                        catalog.examples.insert(group_name.clone(), examples);
                    }
                    _ => {}
                }
            }
        }
        Ok(catalog)
    }

    pub fn with_autoform_style(mut self, style: AutoformStyle) -> Self {
        self.autoform_style = style;
        self
    }

    pub fn autoform_style(&self) -> AutoformStyle {
        self.autoform_style
    }

    pub fn insert(&mut self, template_id: &str, text: &str) {
        self.templates.insert(template_id.to_string(), PromptTemplate::parse(template_id, text));
    }

    pub fn template(&self, template_id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates.get(template_id).ok_or_else(|| PromptError::UnknownTemplate(template_id.to_string()))
    }

    pub fn template_ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn examples(&self, task: TaskKind) -> &[DialogueExample] {
        self.examples.get(task.as_str()).map(Vec::as_slice).unwrap_or_default()
    }

    pub fn render(&self, template_id: &str, bindings: &HashMap<String, String>) -> Result<String, PromptError> {
        self.template(template_id)?.render(bindings)
    }

    /// Resolve `name` for a task: model override, then task template, then common.
    pub fn resolve(&self, task: TaskKind, name: &str, model_id: Option<&str>) -> Result<&PromptTemplate, PromptError> {
        let base = format!("{}/{name}", task.as_str());
        if let Some(model) = model_id {
            let prefix = format!("{base}@");
            let best = self
                .templates
                .range(prefix.clone()..)
                .take_while(|(id, _)| id.starts_with(&prefix))
                .filter(|(id, _)| model.starts_with(&id[prefix.len()..]))
                .max_by_key(|(id, _)| id.len());
            if let Some((_, template)) = best {
                return Ok(template);
            }
        }
        self.templates
            .get(&base)
            .or_else(|| self.templates.get(&format!("common/{name}")))
            .ok_or(PromptError::UnknownTemplate(base))
    }

    fn render_task(&self, instance: &TaskInstance, name: &str, model_id: Option<&str>) -> Result<String, PromptError> {
        let bindings = HashMap::from([("task_description".to_string(), instance.input_text.clone())]);
        self.resolve(instance.task_kind, name, model_id)?.render(&bindings)
    }

    fn render_common(&self, name: &str, bindings: &[(&str, &str)]) -> Result<String, PromptError> {
        let bindings = bindings.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        self.render(&format!("common/{name}"), &bindings)
    }

    /// The CoT prompt of an instance's task.
    pub fn cot_prompt(&self, instance: &TaskInstance, model_id: Option<&str>) -> Result<String, PromptError> {
        self.render_task(instance, "cot", model_id)
    }

    pub fn build_single_prompt(
        &self,
        instance: &TaskInstance,
        config: &StrategyConfig,
        format_note: Option<&str>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        self.build_single_prompt_for(None, instance, config, format_note)
    }

    /// Single-LLM prompt for a strategy, honouring per-model template overrides.
    pub fn build_single_prompt_for(
        &self,
        model_id: Option<&str>,
        instance: &TaskInstance,
        config: &StrategyConfig,
        format_note: Option<&str>,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        config.validate()?;
        let cot = self.cot_prompt(instance, model_id)?;
        let text = match config.strategy {
            Strategy::Cot => cot,
            Strategy::Autoform => match self.autoform_style {
                AutoformStyle::Appended => {
                    format!("{cot}\n\n{}", self.render_common("autoform_instruction", &[])?)
                }
                AutoformStyle::Verbatim => self.render_task(instance, "autoform", model_id)?,
            },
            Strategy::ForcedFormat => {
                let label = config.forced_format_label.expect("validated");
                let directive = self.render_common("forced_format", &[("format_label", label.directive_phrase())])?;
                format!("{cot}\n\n{directive}")
            }
            Strategy::TwoStepInstance | Strategy::TwoStepTask => {
                let note = format_note.filter(|n| !n.trim().is_empty()).ok_or(PromptError::MissingFormatNote)?;
                let prefix = self.render_common("two_step_solve", &[("format_instruction", note)])?;
                format!("{prefix}\n\n{cot}")
            }
            strategy => return Err(PromptError::StrategyMismatch { strategy, context: "a single-LLM prompt" }),
        };
        Ok(vec![ChatMessage::user(text)])
    }

    /// Stage-1 prompt asking for a reasoning format. Only input texts are
    /// shown; gold answers never are.
    pub fn build_format_selection_prompt(
        &self,
        instances: &[&TaskInstance],
        mode: SelectionMode,
        k_task_examples: usize,
    ) -> Result<Vec<ChatMessage>, PromptError> {
        let expected = match mode {
            SelectionMode::Instance => 1,
            SelectionMode::Task => k_task_examples,
        };
        if instances.len() != expected {
            return Err(PromptError::WrongArity { mode, expected, got: instances.len() });
        }
        let text = match mode {
            SelectionMode::Instance => {
                self.render_common("format_selection_instance", &[("task_description", &instances[0].input_text)])?
            }
            SelectionMode::Task => {
                let joined = instances
                    .iter()
                    .enumerate()
                    .map(|(i, inst)| format!("INPUT {}:\n---\n{}\n---", i + 1, inst.input_text))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                self.render_common("format_selection_task", &[("task_description", &joined)])?
            }
        };
        Ok(vec![ChatMessage::user(text)])
    }

    /// System prompt for one dialogue agent.
    pub fn build_dialogue_prompt(
        &self,
        agent_name: &str,
        all_roles: &str,
        share_text: &str,
        instance: &TaskInstance,
        mode: Strategy,
    ) -> Result<String, PromptError> {
        if !mode.is_dialogue() {
            return Err(PromptError::StrategyMismatch { strategy: mode, context: "a dialogue prompt" });
        }
        let mut bindings: HashMap<String, String> = HashMap::from([
            ("agent_name".into(), agent_name.into()),
            ("all_roles".into(), all_roles.into()),
            ("knowledge".into(), share_text.into()),
            ("task_description".into(), instance.input_text.clone()),
        ]);
        for (i, example) in self.examples(instance.task_kind).iter().enumerate() {
            let k = i + 1;
            bindings.insert(format!("example_context_{k}"), example.context.clone());
            bindings.insert(format!("example_question_{k}"), example.question.clone());
            bindings.insert(format!("example_answer_{k}"), example.answer.clone());
        }
        let shared = self.resolve(instance.task_kind, "dialogue_shared", None)?.render(&bindings)?;
        let tail = self.resolve(instance.task_kind, mode.as_str(), None)?.render(&bindings)?;
        Ok(format!("{shared}\n\n{tail}"))
    }
}
