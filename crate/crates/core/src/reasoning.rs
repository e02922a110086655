//! Single-LLM strategy execution: prompt, complete, extract, score.

use std::collections::{BTreeMap, HashMap, HashSet};

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::tokenizer::{count_tokens, TokenizerError};
use crate::backend::{completion_tokens, BackendError, ChatBackend, ChatRequest, TokenSource};
use crate::datasets::{AnswerSpec, MarkerKind, TaskInstance, TaskSet, ValueDomain};
use crate::metrics::{aggregate_runs, MetricsError};
use crate::prompting::{PromptCatalog, PromptError, SelectionMode, StrategyConfig};

// ---------------------------------------------------------------------------
// Answer extraction

const GENERIC_MARKERS: &str = r"\bthe\s+answer\s+is\s*:?|\banswer\s*:";

static THE_ANSWER_IS: Lazy<Regex> = Lazy::new(|| Regex::new(&format!("(?i){GENERIC_MARKERS}")).expect("regex"));
static CORRECT_OPTION_IS: Lazy<Regex> =
    Lazy::new(|| Regex::new(&format!(r"(?i)\bcorrect\s+option\s+is\s*:?|{GENERIC_MARKERS}")).expect("regex"));
static TAGGED: Lazy<Regex> = Lazy::new(|| Regex::new(&format!(r"(?is)<A>(.*?)</A>|{GENERIC_MARKERS}")).expect("regex"));

static YES_NO: Lazy<Regex> = Lazy::new(|| Regex::new(r#"(?i)^[\s*"'`{(\[]*(yes|no)\b"#).expect("regex"));
static INTEGER: Lazy<Regex> = Lazy::new(|| Regex::new(r#"^[\s*"'`{(\[]*(-?\d+)"#).expect("regex"));
static LETTER: Lazy<Regex> = Lazy::new(|| Regex::new(r#"^[\s*"'`{(\[]*([A-Za-z])(?:[^A-Za-z0-9]|$)"#).expect("regex"));

fn marker_regex(kind: MarkerKind) -> &'static Regex {
    match kind {
        MarkerKind::TheAnswerIs | MarkerKind::AnswerColon => &THE_ANSWER_IS,
        MarkerKind::CorrectOptionIs => &CORRECT_OPTION_IS,
        MarkerKind::TaggedA => &TAGGED,
    }
}

fn is_wrapper(c: char) -> bool {
    matches!(c, '*' | '"' | '\'' | '`' | '{' | '}' | '[' | ']' | '_') || c.is_whitespace()
}

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
}

/// Trim whitespace, markdown/quote/brace wrappers and terminal punctuation.
fn clean_free_text(raw: &str) -> String {
    let mut text = raw.trim_matches(is_wrapper);
    loop {
        let trimmed = text.trim_end_matches(is_terminal_punct).trim_matches(is_wrapper);
        if trimmed.len() == text.len() {
            break;
        }
        text = trimmed;
    }
    text.to_string()
}

/// Parse a value of `domain` from the start of `text`.
fn parse_value(domain: ValueDomain, text: &str) -> Option<String> {
    match domain {
        ValueDomain::YesNo => YES_NO.captures(text).map(|c| c[1].to_lowercase()),
        ValueDomain::Integer => INTEGER.captures(text).map(|c| c[1].to_string()),
        ValueDomain::CapitalLetter => LETTER.captures(text).map(|c| c[1].to_uppercase()),
        ValueDomain::FreeText => {
            let cleaned = clean_free_text(text);
            (!cleaned.is_empty()).then_some(cleaned)
        }
    }
}

/// Value following a textual marker: the rest of its line, or the next
/// non-blank line when the marker closes its line.
fn value_after(text: &str, end: usize, domain: ValueDomain) -> Option<String> {
    let rest = &text[end..];
    let mut lines = rest.split('\n');
    let first = lines.next().unwrap_or_default();
    if !clean_free_text(first).is_empty() {
        return parse_value(domain, first);
    }
    let next = lines.find(|l| !l.trim().is_empty())?;
    parse_value(domain, next)
}

/// Extract the answer from a response. Scans case-insensitively for the
/// spec's marker and returns the value of the last well-formed occurrence.
pub fn extract_answer(text: &str, spec: &AnswerSpec) -> Option<String> {
    let mut last = None;
    for caps in marker_regex(spec.marker_kind).captures_iter(text) {
        let value = match caps.get(1) {
            Some(inner) => parse_value(spec.value_domain, inner.as_str()),
            None => value_after(text, caps.get(0).expect("match").end(), spec.value_domain),
        };
        if value.is_some() {
            last = value;
        }
    }
    last
}

/// Canonical form used when comparing free-text answers: lowercase, trimmed,
/// internal whitespace collapsed, wrappers and terminal punctuation removed.
pub fn normalize_free_text(answer: &str) -> String {
    clean_free_text(&answer.split_whitespace().collect::<Vec<_>>().join(" ")).to_lowercase()
}

/// Canonical comparison key of an answer under a value domain. Option answers
/// reduce to their index or letter, ignoring any option text.
pub fn normalize_answer(answer: &str, domain: ValueDomain) -> Option<String> {
    match domain {
        ValueDomain::FreeText => Some(normalize_free_text(answer)).filter(|s| !s.is_empty()),
        _ => parse_value(domain, answer),
    }
}

/// True when `extracted` matches any gold answer after normalization.
pub fn is_correct(extracted: Option<&str>, golds: &[String], domain: ValueDomain) -> bool {
    let Some(key) = extracted.and_then(|e| normalize_answer(e, domain)) else {
        return false;
    };
    golds.iter().any(|g| normalize_answer(g, domain).as_deref() == Some(key.as_str()))
}

// ---------------------------------------------------------------------------
// Traces and reports

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
    pub source: TokenSource,
}

/// Which models produced a trace. `selector_model` is set for two-step runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub solver_model: String,
    pub solver_backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub instance_id: String,
    pub strategy: StrategyConfig,
    pub prompt_text: String,
    pub raw_response: String,
    pub extracted_answer: Option<String>,
    pub correct: Option<bool>,
    pub token_usage: TokenUsage,
    pub run_index: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteScope {
    Instance,
    Task,
}

/// Stage-1 output of two-step solving: a described reasoning format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatNote {
    pub selector_model: String,
    pub scope: NoteScope,
    pub note_text: String,
    /// Instance the note was selected for (instance scope only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_run_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n_instances: usize,
}

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("format selector returned a blank reply")]
    EmptySelectorReply,
    #[error("no gold answers for instance `{0}`")]
    MissingGold(String),
    #[error("traces do not cover runs x instances: {0}")]
    IncompleteRunMatrix(String),
    #[error("no format note available for instance `{0}`")]
    MissingNote(String),
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("run count must be positive")]
    ZeroRuns,
}

/// Fraction correct per run, then mean and sample std across runs.
pub fn score_accuracy(
    traces: &[ReasoningTrace],
    golds: &HashMap<String, Vec<String>>,
    runs: usize,
) -> Result<AccuracyReport, ReasoningError> {
    if runs == 0 {
        return Err(ReasoningError::ZeroRuns);
    }
    if golds.is_empty() {
        return Err(ReasoningError::EmptyTaskSet);
    }
    let mut seen: HashSet<(usize, &str)> = HashSet::new();
    let mut correct = vec![0usize; runs];
    for trace in traces {
        if !golds.contains_key(&trace.instance_id) {
            return Err(ReasoningError::MissingGold(trace.instance_id.clone()));
        }
        if trace.run_index >= runs {
            return Err(ReasoningError::IncompleteRunMatrix(format!(
                "run_index {} outside 0..{runs}",
                trace.run_index
            )));
        }
        if !seen.insert((trace.run_index, trace.instance_id.as_str())) {
            return Err(ReasoningError::IncompleteRunMatrix(format!(
                "duplicate trace for `{}` in run {}",
                trace.instance_id, trace.run_index
            )));
        }
        if trace.correct == Some(true) {
            correct[trace.run_index] += 1;
        }
    }
    let expected = runs * golds.len();
    if seen.len() != expected {
        return Err(ReasoningError::IncompleteRunMatrix(format!("{} of {expected} traces present", seen.len())));
    }
    let n = golds.len() as f64;
    let per_run_accuracy: Vec<f64> = correct.iter().map(|c| *c as f64 / n).collect();
    let aggregate = aggregate_runs(&per_run_accuracy)?;
    Ok(AccuracyReport { per_run_accuracy, mean: aggregate.mean, std: aggregate.std, n_instances: golds.len() })
}

pub fn gold_map(task: &TaskSet) -> HashMap<String, Vec<String>> {
    task.instances.iter().map(|i| (i.id.clone(), i.gold_answers.clone())).collect()
}

// ---------------------------------------------------------------------------
// Execution

/// Where a format is selected from.
#[derive(Debug, Clone, Copy)]
pub enum FormatSource<'a> {
    Instance(&'a TaskInstance),
    Task(&'a TaskSet),
}

/// Result of a two-step run: traces, accuracy and the notes that were used.
#[derive(Debug, Clone)]
pub struct TwoStepOutcome {
    pub traces: Vec<ReasoningTrace>,
    pub report: AccuracyReport,
    pub notes: Vec<FormatNote>,
}

/// Executes single-LLM strategies against backends.
#[derive(Debug, Clone)]
pub struct Reasoner<'a> {
    catalog: &'a PromptCatalog,
    tokenizer_id: String,
    base_seed: Option<i64>,
    temperature: f64,
}

impl<'a> Reasoner<'a> {
    pub fn new(catalog: &'a PromptCatalog, tokenizer_id: impl Into<String>) -> Self {
        Self { catalog, tokenizer_id: tokenizer_id.into(), base_seed: None, temperature: 0.0 }
    }

    /// Send `seed + run_index` as the request seed.
    pub fn with_request_seed(mut self, seed: i64) -> Self {
        self.base_seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn request(&self, model: &str, messages: Vec<crate::backend::ChatMessage>, run_index: usize) -> ChatRequest {
        let mut request = ChatRequest::new(model, messages);
        request.temperature = self.temperature;
        request.request_seed = self.base_seed.map(|s| s.wrapping_add(run_index as i64));
        request
    }

    /// One completion of one instance under a single-LLM strategy.
    pub fn run_single(
        &self,
        instance: &TaskInstance,
        config: &StrategyConfig,
        solver: &dyn ChatBackend,
        run_index: usize,
        note: Option<&FormatNote>,
    ) -> Result<ReasoningTrace, ReasoningError> {
        let note_text = note.map(|n| n.note_text.as_str());
        let messages = self.catalog.build_single_prompt_for(Some(solver.model_id()), instance, config, note_text)?;
        let request = self.request(solver.model_id(), messages, run_index);
        let prompt_text = request.prompt_text();
        let response = solver.complete(&request)?;
        let (completion, source) = completion_tokens(&response, &self.tokenizer_id)?;
        let prompt = match (&source, response.reported_usage) {
            (TokenSource::Provider, Some(usage)) => usage.prompt_tokens,
            _ => count_tokens(&prompt_text, &self.tokenizer_id)? as u64,
        };
        let extracted_answer = extract_answer(&response.content, &instance.answer_spec);
        let correct = is_correct(extracted_answer.as_deref(), &instance.gold_answers, instance.answer_spec.value_domain);
        Ok(ReasoningTrace {
            instance_id: instance.id.clone(),
            strategy: config.clone(),
            prompt_text,
            raw_response: response.content,
            extracted_answer,
            correct: Some(correct),
            token_usage: TokenUsage { prompt, completion, source },
            run_index,
            provenance: Provenance {
                solver_model: solver.model_id().to_string(),
                solver_backend: solver.id().to_string(),
                selector_model: note.map(|n| n.selector_model.clone()),
            },
            format_note: note_text.map(str::to_string),
        })
    }

    /// Ask the selector for a reasoning format. Task scope draws
    /// `k_task_examples` distinct instances by seeded sample.
    pub fn select_format(
        &self,
        source: FormatSource<'_>,
        k_task_examples: usize,
        selector: &dyn ChatBackend,
        seed: i64,
    ) -> Result<FormatNote, ReasoningError> {
        let (instances, mode, scope, instance_id): (Vec<&TaskInstance>, _, _, _) = match source {
            FormatSource::Instance(instance) => {
                (vec![instance], SelectionMode::Instance, NoteScope::Instance, Some(instance.id.clone()))
            }
            FormatSource::Task(task) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
                let sample = task.instances.choose_multiple(&mut rng, k_task_examples).collect();
                (sample, SelectionMode::Task, NoteScope::Task, None)
            }
        };
        let messages = self.catalog.build_format_selection_prompt(&instances, mode, k_task_examples)?;
        let response = selector.complete(&self.request(selector.model_id(), messages, 0))?;
        if response.content.trim().is_empty() {
            return Err(ReasoningError::EmptySelectorReply);
        }
        Ok(FormatNote {
            selector_model: selector.model_id().to_string(),
            scope,
            note_text: response.content,
            instance_id,
        })
    }

    /// Run a non-two-step strategy over every instance for `runs` runs.
    pub fn run_strategy(
        &self,
        task: &TaskSet,
        config: &StrategyConfig,
        solver: &dyn ChatBackend,
        runs: usize,
    ) -> Result<(Vec<ReasoningTrace>, AccuracyReport), ReasoningError> {
        if runs == 0 {
            return Err(ReasoningError::ZeroRuns);
        }
        let mut traces = Vec::with_capacity(runs * task.instances.len());
        for run in 0..runs {
            for instance in &task.instances {
                traces.push(self.run_single(instance, config, solver, run, None)?);
            }
        }
        let report = score_accuracy(&traces, &gold_map(task), runs)?;
        Ok((traces, report))
    }

    /// Select formats once (one note per task, or one per instance), then
    /// solve every instance for `runs` runs with the notes prepended.
    pub fn select_notes(
        &self,
        task: &TaskSet,
        mode: SelectionMode,
        k_task_examples: usize,
        selector: &dyn ChatBackend,
        seed: i64,
    ) -> Result<Vec<FormatNote>, ReasoningError> {
        match mode {
            SelectionMode::Task => Ok(vec![self.select_format(FormatSource::Task(task), k_task_examples, selector, seed)?]),
            SelectionMode::Instance => task
                .instances
                .iter()
                .map(|i| self.select_format(FormatSource::Instance(i), k_task_examples, selector, seed))
                .collect(),
        }
    }

    pub fn run_two_step(
        &self,
        task: &TaskSet,
        config: &StrategyConfig,
        selector: &dyn ChatBackend,
        solver: &dyn ChatBackend,
        runs: usize,
        seed: i64,
    ) -> Result<TwoStepOutcome, ReasoningError> {
        if runs == 0 {
            return Err(ReasoningError::ZeroRuns);
        }
        let mode = config.selection_mode().ok_or(PromptError::StrategyMismatch {
            strategy: config.strategy,
            context: "two-step solving",
        })?;
        let notes = self.select_notes(task, mode, config.k_task_examples, selector, seed)?;
        let by_instance: BTreeMap<&str, &FormatNote> =
            notes.iter().filter_map(|n| n.instance_id.as_deref().map(|id| (id, n))).collect();
        let mut traces = Vec::with_capacity(runs * task.instances.len());
        for run in 0..runs {
            for instance in &task.instances {
                let note = match mode {
                    SelectionMode::Task => &notes[0],
                    SelectionMode::Instance => by_instance
                        .get(instance.id.as_str())
                        .copied()
                        .ok_or_else(|| ReasoningError::MissingNote(instance.id.clone()))?,
                };
                traces.push(self.run_single(instance, config, solver, run, Some(note))?);
            }
        }
        let report = score_accuracy(&traces, &gold_map(task), runs)?;
        Ok(TwoStepOutcome { traces, report, notes })
    }
}
