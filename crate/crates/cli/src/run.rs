use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;
use formbench_core::backend::{connect, SharedBackend};
use formbench_core::datasets::{load_task_set, split_contexts_random, split_supporting_facts, ContextShare, TaskSet};
use formbench_core::dialogue::{prepare_agents, run_dialogue, DialogueTranscript, Termination};
use formbench_core::metrics::{aggregate_runs, delta_tokens, render_csv, render_markdown, rouge_l_max, ReportRow};
use formbench_core::prompting::{PromptCatalog, SelectionMode, Strategy};
use formbench_core::reasoning::{score_accuracy, gold_map, FormatNote, FormatSource, Reasoner, ReasoningTrace};
use formbench_core::TaskKind;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Purpose, SplitRule};
use crate::pool::run_ordered;

pub const MANIFEST: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";

/// ΔTokens was requested without a baseline run to compare against.
#[derive(Debug)]
pub struct MissingBaseline;

impl fmt::Display for MissingBaseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ΔTokens requested but no baseline run directory was given (--baseline or `baseline` in config)")
    }
}

impl std::error::Error for MissingBaseline {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendRecord {
    pub role: String,
    pub name: String,
    pub id: String,
    pub model: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub harness_version: String,
    pub config: ExperimentConfig,
    pub backends: Vec<BackendRecord>,
    pub started_at: String,
    #[serde(default)]
    pub finished_at: Option<String>,
    pub status: String,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Reason,
    Dialogue,
}

/// Summary persisted as report.json in every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: RunKind,
    pub task: TaskKind,
    pub strategy: Strategy,
    pub backend_pair: String,
    pub runs: usize,
    pub instances: usize,
    pub complete: bool,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub per_run_scores: Vec<f64>,
    pub mean_completion_tokens: Option<f64>,
    #[serde(default)]
    pub delta_tokens: Option<f64>,
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    #[serde(default)]
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            task: self.task.to_string(),
            setting: format!("{} ({})", self.strategy, self.backend_pair),
            score: self.score,
            score_std: self.score_std,
            tokens: self.mean_completion_tokens,
            delta_tokens: self.delta_tokens,
        }
    }

    pub fn score_header(&self) -> &'static str {
        match self.kind {
            RunKind::Reason => "Accuracy",
            RunKind::Dialogue => "RougeL",
        }
    }
}

fn now() -> String {
    Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        anyhow::bail!("missing manifest: {}", path.display());
    }
    read_json(&path)
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_JSON))
}

/// Make `<out>/<task>/<strategy>/<timestamp>/`, suffixing on collision.
fn create_run_dir(config: &ExperimentConfig) -> Result<PathBuf> {
    let parent = config.out.join(config.task.kind.as_str()).join(config.strategy.strategy.as_str());
    std::fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S%3fZ").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = parent.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn catalog(config: &ExperimentConfig) -> Result<PromptCatalog> {
    match &config.prompts_dir {
        Some(dir) => Ok(PromptCatalog::load_dir(dir)?),
        None => Ok(PromptCatalog::builtin()),
    }
}

struct Session {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Session {
    fn start(command: &str, config: &ExperimentConfig, backends: Vec<BackendRecord>) -> Result<Self> {
        let dir = create_run_dir(config)?;
        let manifest = RunManifest {
            command: command.into(),
            harness_version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            backends,
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            artifacts: Vec::new(),
        };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(Self { dir, manifest })
    }

    fn write<T: Serialize>(&mut self, relative: &str, value: &T) -> Result<()> {
        let path = self.dir.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_json(&path, value)?;
        self.manifest.artifacts.push(relative.to_string());
        Ok(())
    }

    fn write_text(&mut self, relative: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(relative), text)?;
        self.manifest.artifacts.push(relative.to_string());
        Ok(())
    }

    fn finish(mut self, ok: bool) -> Result<PathBuf> {
        self.manifest.finished_at = Some(now());
        self.manifest.status = if ok { "completed" } else { "failed" }.into();
        write_json(&self.dir.join(MANIFEST), &self.manifest)?;
        Ok(self.dir)
    }
}

/// Outcome of a run command: where it wrote, and whether everything completed.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub ok: bool,
    pub report: RunReport,
}

fn connect_named(config: &ExperimentConfig, role: &str, name: &str) -> Result<(SharedBackend, BackendRecord)> {
    let backend = connect(&config.backends[name]).with_context(|| format!("connecting backend `{name}`"))?;
    let record = BackendRecord { role: role.into(), name: name.into(), id: backend.id().into(), model: backend.model_id().into() };
    Ok((backend, record))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn load_task(config: &ExperimentConfig) -> Result<TaskSet> {
    load_task_set(&config.task.data, config.task.kind).with_context(|| format!("loading {}", config.task.data.display()))
}

pub fn run_reason(config: &ExperimentConfig) -> Result<RunOutcome> {
    let catalog = catalog(config)?;
    let task = load_task(config)?;
    let strategy = config.strategy.strategy;
    let solver_name = config.roles.solver.as_deref().expect("validated");
    let (solver, solver_record) = connect_named(config, "solver", solver_name)?;
    let mut records = vec![solver_record];
    let selector = match config.strategy.selection_mode() {
        Some(_) => {
            let name = config.roles.selector.as_deref().expect("validated");
            let (backend, record) = connect_named(config, "selector", name)?;
            records.push(record);
            Some(backend)
        }
        None => None,
    };
    let backend_pair = match &selector {
        Some(sel) => format!("{}+{}", sel.model_id(), solver.model_id()),
        None => solver.model_id().to_string(),
    };
    let workers = config.workers(Purpose::Reason);
    let mut session = Session::start("run-reason", config, records)?;
    let reasoner = Reasoner::new(&catalog, config.tokenizer.clone()).with_request_seed(config.seed);
    let mut failures = Vec::new();

    let mut notes: BTreeMap<String, FormatNote> = BTreeMap::new();
    let mut task_note: Option<FormatNote> = None;
    if let (Some(mode), Some(selector)) = (config.strategy.selection_mode(), &selector) {
        match mode {
            SelectionMode::Task => {
                match reasoner.select_format(FormatSource::Task(&task), config.strategy.k_task_examples, selector.as_ref(), config.seed) {
                    Ok(note) => task_note = Some(note),
                    Err(e) => failures.push(format!("format selection: {e}")),
                }
            }
            SelectionMode::Instance => {
                let mut selected = Vec::new();
                run_ordered(
                    &task.instances,
                    workers,
                    |inst| reasoner.select_format(FormatSource::Instance(inst), config.strategy.k_task_examples, selector.as_ref(), config.seed),
                    |i, result| selected.push((task.instances[i].id.clone(), result)),
                );
                for (id, result) in selected {
                    match result {
                        Ok(note) => {
                            notes.insert(id, note);
                        }
                        Err(e) => failures.push(format!("{id}: format selection: {e}")),
                    }
                }
            }
        }
        let all: Vec<&FormatNote> = task_note.iter().chain(notes.values()).collect();
        session.write("notes.json", &all)?;
    }

    let two_step = selector.is_some();
    let jobs: Vec<(usize, usize)> = (0..config.runs).flat_map(|r| (0..task.instances.len()).map(move |i| (r, i))).collect();
    let mut traces: Vec<ReasoningTrace> = Vec::new();
    let mut write_error = None;
    run_ordered(
        &jobs,
        workers,
        |&(run, i)| {
            let inst = &task.instances[i];
            let note = if two_step { task_note.as_ref().or_else(|| notes.get(&inst.id)) } else { None };
            if two_step && note.is_none() {
                return None;
            }
            Some(reasoner.run_single(inst, &config.strategy, solver.as_ref(), run, note))
        },
        |j, result| {
            let (run, i) = jobs[j];
            let id = &task.instances[i].id;
            match result {
                None => {}
                Some(Ok(trace)) => {
                    if let Err(e) = session.write(&format!("traces/{}.r{run}.json", safe_name(id)), &trace) {
                        write_error.get_or_insert(e);
                    }
                    traces.push(trace);
                }
                Some(Err(e)) => failures.push(format!("{id} run {run}: {e}")),
            }
        },
    );
    if let Some(e) = write_error {
        return Err(e);
    }
    let complete = failures.is_empty();
    let accuracy = if complete { Some(score_accuracy(&traces, &gold_map(&task), config.runs)?) } else { None };
    let report = RunReport {
        kind: RunKind::Reason,
        task: config.task.kind,
        strategy,
        backend_pair,
        runs: config.runs,
        instances: task.instances.len(),
        complete,
        score: accuracy.as_ref().map(|a| a.mean),
        score_std: accuracy.as_ref().map(|a| a.std),
        per_run_scores: accuracy.as_ref().map(|a| a.per_run_accuracy.clone()).unwrap_or_default(),
        mean_completion_tokens: mean(traces.iter().map(|t| t.token_usage.completion as f64)),
        delta_tokens: None,
        baseline: None,
        failures,
    };
    finish(session, report)
}

fn finish(mut session: Session, report: RunReport) -> Result<RunOutcome> {
    session.write(REPORT_JSON, &report)?;
    let row = report.row();
    session.write_text("report.md", &render_markdown(std::slice::from_ref(&row), report.score_header()))?;
    session.write_text("report.csv", &render_csv(std::slice::from_ref(&row)))?;
    let ok = report.complete;
    let dir = session.finish(ok)?;
    Ok(RunOutcome { dir, ok, report })
}

fn shares_for(config: &ExperimentConfig, task: &TaskSet) -> Result<Vec<Vec<ContextShare>>> {
    let n = config.roles.agents.len();
    task.instances
        .iter()
        .map(|inst| {
            let shares = match config.split {
                SplitRule::Random => split_contexts_random(inst, n, config.seed),
                SplitRule::Supporting => split_supporting_facts(inst, n, config.seed),
            };
            shares.with_context(|| format!("splitting context of {}", inst.id))
        })
        .collect()
}

/// Per-transcript record kept in the dialogue report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueScore {
    pub instance_id: String,
    pub run: usize,
    pub termination: Termination,
    pub final_answer: Option<String>,
    pub rouge_l: f64,
    pub total_completion_tokens: u64,
}

pub fn run_dialogue_cmd(config: &ExperimentConfig, want_delta: bool) -> Result<RunOutcome> {
    let baseline = match (&config.baseline, want_delta) {
        (Some(dir), _) => Some((dir.clone(), read_report(dir).with_context(|| format!("reading baseline {}", dir.display()))?)),
        (None, true) => return Err(MissingBaseline.into()),
        (None, false) => None,
    };
    let catalog = catalog(config)?;
    let task = load_task(config)?;
    let shares = shares_for(config, &task)?;
    let names = config.agent_names();
    let mut connected: BTreeMap<&str, SharedBackend> = BTreeMap::new();
    let mut records = Vec::new();
    for (k, backend_name) in config.roles.agents.iter().enumerate() {
        let (backend, record) = match connected.get(backend_name.as_str()) {
            Some(b) => (b.clone(), BackendRecord { role: format!("agent:{}", names[k]), name: backend_name.clone(), id: b.id().into(), model: b.model_id().into() }),
            None => connect_named(config, &format!("agent:{}", names[k]), backend_name)?,
        };
        connected.insert(backend_name, backend);
        records.push(record);
    }
    let agent_backends: Vec<SharedBackend> = config.roles.agents.iter().map(|n| connected[n.as_str()].clone()).collect();
    let backend_pair = agent_backends.iter().map(|b| b.model_id()).collect::<Vec<_>>().join("+");
    let workers = config.workers(Purpose::Dialogue);
    let mut session = Session::start("run-dialogue", config, records)?;

    let jobs: Vec<(usize, usize)> = (0..config.runs).flat_map(|r| (0..task.instances.len()).map(move |i| (r, i))).collect();
    let mut failures = Vec::new();
    let mut scores: Vec<DialogueScore> = Vec::new();
    let mut write_error = None;
    run_ordered(
        &jobs,
        workers,
        |&(_, i)| -> Result<DialogueTranscript> {
            let inst = &task.instances[i];
            let participants = names
                .iter()
                .zip(&agent_backends)
                .zip(&shares[i])
                .map(|((name, backend), share)| (name.clone(), backend.clone(), share.clone()))
                .collect();
            let agents = prepare_agents(&catalog, inst, config.strategy.strategy, participants)?;
            Ok(run_dialogue(inst, &agents, &config.strategy, config.max_rounds, config.policy, &config.tokenizer)?)
        },
        |j, result| {
            let (run, i) = jobs[j];
            let inst = &task.instances[i];
            match result {
                Ok(transcript) => {
                    if let Err(e) = session.write(&format!("transcripts/{}.r{run}.json", safe_name(&inst.id)), &transcript) {
                        write_error.get_or_insert(e);
                    }
                    if transcript.termination == Termination::BackendError {
                        failures.push(format!("{} run {run}: {}", inst.id, transcript.error.as_deref().unwrap_or("backend error")));
                    }
                    scores.push(DialogueScore {
                        instance_id: inst.id.clone(),
                        run,
                        termination: transcript.termination,
                        rouge_l: rouge_l_max(transcript.final_answer.as_deref().unwrap_or(""), &inst.gold_answers).f1,
                        final_answer: transcript.final_answer,
                        total_completion_tokens: transcript.total_completion_tokens,
                    });
                }
                Err(e) => failures.push(format!("{} run {run}: {e:#}", inst.id)),
            }
        },
    );
    if let Some(e) = write_error {
        return Err(e);
    }
    session.write("scores.json", &scores)?;

    let complete = failures.is_empty();
    let per_run: Vec<f64> = (0..config.runs)
        .filter_map(|r| mean(scores.iter().filter(|s| s.run == r).map(|s| s.rouge_l)))
        .collect();
    let aggregate = aggregate_runs(&per_run).ok();
    let tokens = mean(scores.iter().map(|s| s.total_completion_tokens as f64));
    let delta = match (&baseline, tokens) {
        (Some((dir, base)), Some(t)) => {
            let b = base.mean_completion_tokens.with_context(|| format!("baseline {} has no token mean", dir.display()))?;
            Some(delta_tokens(b, t)?)
        }
        _ => None,
    };
    let report = RunReport {
        kind: RunKind::Dialogue,
        task: config.task.kind,
        strategy: config.strategy.strategy,
        backend_pair,
        runs: config.runs,
        instances: task.instances.len(),
        complete,
        score: aggregate.map(|a| a.mean),
        score_std: aggregate.map(|a| a.std),
        per_run_scores: per_run,
        mean_completion_tokens: tokens,
        delta_tokens: delta,
        baseline: baseline.map(|(d, _)| d),
        failures,
    };
    finish(session, report)
}
