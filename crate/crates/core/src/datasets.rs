//! Benchmark ingestion and preprocessing.
//!
//! Instances live on disk as JSONL, one object per line:
//!
//! ```json
//! {"id": "...", "task_kind": "hotpot_qa", "input_text": "...",
//!  "context_segments": [{"segment_id": "s1", "text": "...", "is_supporting": true}],
//!  "gold_answers": ["..."], "answer_spec": {"marker_kind": "tagged_A", "value_domain": "free_text"}}
//! ```
//!
//! A sidecar `<stem>.manifest.json` holding `{"declared_count": N}` pins the
//! expected number of instances.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::tokenizer::{count_tokens, TokenizerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LogicGrid,
    CoinFlip,
    InfoEssentiality,
    MmQa,
    Aqua,
    HotpotQa,
    WikiHop,
    NarrativeQa,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::LogicGrid,
        TaskKind::CoinFlip,
        TaskKind::InfoEssentiality,
        TaskKind::MmQa,
        TaskKind::Aqua,
        TaskKind::HotpotQa,
        TaskKind::WikiHop,
        TaskKind::NarrativeQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::LogicGrid => "logic_grid",
            TaskKind::CoinFlip => "coin_flip",
            TaskKind::InfoEssentiality => "info_essentiality",
            TaskKind::MmQa => "mm_qa",
            TaskKind::Aqua => "aqua",
            TaskKind::HotpotQa => "hotpot_qa",
            TaskKind::WikiHop => "wiki_hop",
            TaskKind::NarrativeQa => "narrative_qa",
        }
    }

    /// Tasks played by two communicating agents rather than one reasoner.
    pub fn is_dialogue(self) -> bool {
        matches!(self, TaskKind::HotpotQa | TaskKind::WikiHop | TaskKind::NarrativeQa)
    }

    /// The answer marker and value domain each task's prompts request.
    pub fn answer_spec(self) -> AnswerSpec {
        use MarkerKind::*;
        use ValueDomain::*;
        let (marker_kind, value_domain) = match self {
            TaskKind::CoinFlip => (TheAnswerIs, YesNo),
            TaskKind::LogicGrid => (TheAnswerIs, Integer),
            TaskKind::MmQa => (CorrectOptionIs, Integer),
            TaskKind::Aqua => (AnswerColon, CapitalLetter),
            TaskKind::InfoEssentiality => (AnswerColon, FreeText),
            TaskKind::HotpotQa | TaskKind::WikiHop | TaskKind::NarrativeQa => (TaggedA, FreeText),
        };
        AnswerSpec { marker_kind, value_domain }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkerKind {
    #[serde(rename = "the_answer_is")]
    TheAnswerIs,
    #[serde(rename = "answer_colon")]
    AnswerColon,
    #[serde(rename = "correct_option_is")]
    CorrectOptionIs,
    #[serde(rename = "tagged_A")]
    TaggedA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    YesNo,
    Integer,
    CapitalLetter,
    FreeText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub marker_kind: MarkerKind,
    pub value_domain: ValueDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSegment {
    pub segment_id: String,
    pub text: String,
    #[serde(default)]
    pub is_supporting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task_kind: TaskKind,
    pub input_text: String,
    #[serde(default)]
    pub context_segments: Vec<ContextSegment>,
    pub gold_answers: Vec<String>,
    pub answer_spec: AnswerSpec,
}

impl TaskInstance {
    pub fn segment(&self, segment_id: &str) -> Option<&ContextSegment> {
        self.context_segments.iter().find(|s| s.segment_id == segment_id)
    }

    /// Check the instance-level invariants, returning the first violation.
    pub fn check(&self) -> Result<(), InstanceViolation> {
        if self.gold_answers.is_empty() {
            return Err(InstanceViolation::NoGoldAnswers);
        }
        let mut seen = HashSet::new();
        for seg in &self.context_segments {
            if !seen.insert(seg.segment_id.as_str()) {
                return Err(InstanceViolation::DuplicateSegment(seg.segment_id.clone()));
            }
        }
        let expected = self.task_kind.answer_spec();
        if self.answer_spec != expected {
            return Err(InstanceViolation::InconsistentAnswerSpec { task_kind: self.task_kind, expected });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstanceViolation {
    #[error("gold_answers is empty")]
    NoGoldAnswers,
    #[error("duplicate segment_id `{0}`")]
    DuplicateSegment(String),
    #[error("answer_spec does not match task kind {task_kind} (expected {expected:?})")]
    InconsistentAnswerSpec { task_kind: TaskKind, expected: AnswerSpec },
}

/// Segments visible to one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextShare {
    pub agent_index: usize,
    pub segments: Vec<String>,
}

impl ContextShare {
    /// The share's segment texts joined in instance order.
    pub fn render(&self, instance: &TaskInstance) -> String {
        instance
            .context_segments
            .iter()
            .filter(|s| self.segments.contains(&s.segment_id))
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub name: String,
    pub instances: Vec<TaskInstance>,
    pub declared_count: usize,
}

#[derive(Debug, Deserialize)]
struct SetManifest {
    #[serde(default)]
    name: Option<String>,
    declared_count: usize,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("line {line}: missing field `{field}`")]
    SchemaMismatch { line: usize, field: String },
    #[error("line {line}: {violation}")]
    InvalidInstance { line: usize, violation: InstanceViolation },
    #[error("line {line}: task kind {found} does not match expected {expected}")]
    WrongTaskKind { line: usize, expected: TaskKind, found: TaskKind },
    #[error("line {line}: duplicate instance id `{id}`")]
    DuplicateInstance { line: usize, id: String },
    #[error("manifest declares {expected} instances but file holds {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("instance has no context segments")]
    NoSegments,
    #[error("need at least {needed} supporting segments, found {found}")]
    InsufficientSupport { needed: usize, found: usize },
    #[error("need at least 2 agents, got {0}")]
    TooFewAgents(usize),
    #[error("text of {tokens} tokens exceeds twice the per-half limit {limit}")]
    OverBudget { tokens: usize, limit: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

const REQUIRED_FIELDS: [&str; 6] = ["id", "task_kind", "input_text", "context_segments", "gold_answers", "answer_spec"];

/// One named check performed while validating a dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of validating a dataset file check by check.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub task_set: Option<TaskSet>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn parse_line(line: &str, lineno: usize) -> Result<TaskInstance, DatasetError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| DatasetError::ParseError { line: lineno, reason: e.to_string() })?;
    let object = value
        .as_object()
        .ok_or_else(|| DatasetError::ParseError { line: lineno, reason: "expected a JSON object".into() })?;
    if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !object.contains_key(**f)) {
        return Err(DatasetError::SchemaMismatch { line: lineno, field: field.to_string() });
    }
    serde_json::from_value(value).map_err(|e| DatasetError::ParseError { line: lineno, reason: e.to_string() })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DatasetError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(raw
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn read_manifest(path: &Path) -> Result<Option<SetManifest>, DatasetError> {
    let manifest = manifest_path(path);
    if !manifest.exists() {
        return Ok(None);
    }
    let raw = std::fs::read_to_string(&manifest)
        .map_err(|e| DatasetError::Io { path: manifest.clone(), reason: e.to_string() })?;
    serde_json::from_str(&raw)
        .map(Some)
        .map_err(|e| DatasetError::Io { path: manifest, reason: e.to_string() })
}

fn set_name(path: &Path, manifest: Option<&SetManifest>) -> String {
    manifest
        .and_then(|m| m.name.clone())
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

/// Load a JSONL task file, failing on the first violated invariant.
pub fn load_task_set(path: &Path, task_kind: TaskKind) -> Result<TaskSet, DatasetError> {
    let manifest = read_manifest(path)?;
    let mut instances = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in read_lines(path)? {
        let instance = parse_line(&line, lineno)?;
        if instance.task_kind != task_kind {
            return Err(DatasetError::WrongTaskKind { line: lineno, expected: task_kind, found: instance.task_kind });
        }
        instance.check().map_err(|violation| DatasetError::InvalidInstance { line: lineno, violation })?;
        if !ids.insert(instance.id.clone()) {
            return Err(DatasetError::DuplicateInstance { line: lineno, id: instance.id });
        }
        instances.push(instance);
    }
    let declared_count = match &manifest {
        Some(m) if m.declared_count != instances.len() => {
            return Err(DatasetError::CountMismatch { expected: m.declared_count, actual: instances.len() })
        }
        Some(m) => m.declared_count,
        None => instances.len(),
    };
    Ok(TaskSet { name: set_name(path, manifest.as_ref()), instances, declared_count })
}

/// Validate a task file check by check, collecting every failure instead of
/// stopping at the first. `expected_count` overrides any sidecar manifest.
pub fn validate_task_file(path: &Path, task_kind: TaskKind, expected_count: Option<usize>) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, failures: Vec<String>| {
        checks.push(CheckResult {
            name,
            passed: failures.is_empty(),
            detail: if failures.is_empty() { "ok".into() } else { failures.join("; ") },
        });
    };

    let lines = match read_lines(path) {
        Ok(lines) => lines,
        Err(e) => {
            push("readable", vec![e.to_string()]);
            return ValidationReport { checks, task_set: None };
        }
    };
    push("readable", vec![]);

    let mut parsed = Vec::new();
    let mut schema_failures = Vec::new();
    for (lineno, line) in &lines {
        match parse_line(line, *lineno) {
            Ok(instance) => parsed.push((*lineno, instance)),
            Err(e) => schema_failures.push(e.to_string()),
        }
    }
    push("schema", schema_failures);

    let kind_failures = parsed
        .iter()
        .filter(|(_, i)| i.task_kind != task_kind)
        .map(|(l, i)| format!("line {l}: task kind {} (expected {task_kind})", i.task_kind))
        .collect();
    push("task_kind", kind_failures);

    let violations = |pick: fn(&InstanceViolation) -> bool| -> Vec<String> {
        parsed
            .iter()
            .filter_map(|(l, i)| match i.check() {
                Err(v) if pick(&v) => Some(format!("line {l}: {v}")),
                _ => None,
            })
            .collect()
    };
    push("gold_answers_non_empty", violations(|v| matches!(v, InstanceViolation::NoGoldAnswers)));
    push("unique_segment_ids", violations(|v| matches!(v, InstanceViolation::DuplicateSegment(_))));
    push("answer_spec_consistent", violations(|v| matches!(v, InstanceViolation::InconsistentAnswerSpec { .. })));

    let mut ids = HashSet::new();
    let dup_ids = parsed
        .iter()
        .filter(|(_, i)| !ids.insert(i.id.clone()))
        .map(|(l, i)| format!("line {l}: duplicate id `{}`", i.id))
        .collect();
    push("unique_instance_ids", dup_ids);

    let manifest = match read_manifest(path) {
        Ok(m) => m,
        Err(e) => {
            push("manifest", vec![e.to_string()]);
            None
        }
    };
    let expected = expected_count.or(manifest.as_ref().map(|m| m.declared_count));
    let count_failures = match expected {
        Some(expected) if expected != lines.len() => {
            vec![format!("expected {expected} instances, found {}", lines.len())]
        }
        _ => vec![],
    };
    push("declared_count", count_failures);

    let task_set = checks.iter().all(|c| c.passed).then(|| TaskSet {
        name: set_name(path, manifest.as_ref()),
        declared_count: expected.unwrap_or(parsed.len()),
        instances: parsed.into_iter().map(|(_, i)| i).collect(),
    });
    ValidationReport { checks, task_set }
}

/// Stable 64-bit FNV-1a; keeps seeded splits identical across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

fn split_rng(instance_id: &str, seed: i64, salt: &str) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(instance_id.len() + salt.len() + 9);
    key.extend_from_slice(instance_id.as_bytes());
    key.push(0);
    key.extend_from_slice(salt.as_bytes());
    key.extend_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&key))
}

fn deal(shares: &mut [ContextShare], ids: impl IntoIterator<Item = String>, start: usize) -> usize {
    let n = shares.len();
    let mut next = start;
    for id in ids {
        shares[next % n].segments.push(id);
        next += 1;
    }
    next
}

fn empty_shares(n_agents: usize) -> Vec<ContextShare> {
    (0..n_agents).map(|agent_index| ContextShare { agent_index, segments: Vec::new() }).collect()
}

/// Randomly deal an instance's segments to `n_agents` agents: seeded shuffle,
/// then round-robin from a seeded starting agent.
pub fn split_contexts_random(instance: &TaskInstance, n_agents: usize, seed: i64) -> Result<Vec<ContextShare>, DatasetError> {
    if n_agents < 2 {
        return Err(DatasetError::TooFewAgents(n_agents));
    }
    if instance.context_segments.is_empty() {
        return Err(DatasetError::NoSegments);
    }
    let mut rng = split_rng(&instance.id, seed, "random");
    let mut ids: Vec<String> = instance.context_segments.iter().map(|s| s.segment_id.clone()).collect();
    ids.shuffle(&mut rng);
    let start = rand::Rng::gen_range(&mut rng, 0..n_agents);
    let mut shares = empty_shares(n_agents);
    deal(&mut shares, ids, start);
    Ok(shares)
}

/// Split so that supporting facts are divided among the agents (each receives
/// at least one); remaining segments follow the same shuffle-and-deal rule.
pub fn split_supporting_facts(instance: &TaskInstance, n_agents: usize, seed: i64) -> Result<Vec<ContextShare>, DatasetError> {
    if n_agents < 2 {
        return Err(DatasetError::TooFewAgents(n_agents));
    }
    let (mut supporting, mut filler): (Vec<String>, Vec<String>) = (Vec::new(), Vec::new());
    for seg in &instance.context_segments {
        if seg.is_supporting {
            supporting.push(seg.segment_id.clone());
        } else {
            filler.push(seg.segment_id.clone());
        }
    }
    if supporting.len() < n_agents {
        return Err(DatasetError::InsufficientSupport { needed: n_agents, found: supporting.len() });
    }
    let mut rng = split_rng(&instance.id, seed, "supporting");
    supporting.shuffle(&mut rng);
    filler.shuffle(&mut rng);
    let start = rand::Rng::gen_range(&mut rng, 0..n_agents);
    let mut shares = empty_shares(n_agents);
    let next = deal(&mut shares, supporting, start);
    deal(&mut shares, filler, next);
    Ok(shares)
}

/// Split a book at the whitespace boundary nearest its token midpoint.
/// `left + right` reproduces `text` exactly.
pub fn bisect_book(text: &str, tokenizer_id: &str, per_half_limit: usize) -> Result<(String, String), DatasetError> {
    let total = count_tokens(text, tokenizer_id)?;
    if total > 2 * per_half_limit {
        return Err(DatasetError::OverBudget { tokens: total, limit: per_half_limit });
    }
    // Word start offsets and the token count of everything before each word.
    let mut starts = Vec::new();
    let mut prefix = Vec::new();
    let mut running = 0usize;
    let mut in_word = false;
    for (offset, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            if !starts.is_empty() {
                let previous = &text[*starts.last().unwrap()..offset];
                running += count_tokens(previous.trim_end(), tokenizer_id)?;
            }
            starts.push(offset);
            prefix.push(running);
        }
    }
    let Some(best) = (0..starts.len()).min_by_key(|&i| (2 * prefix[i]).abs_diff(total)) else {
        return Ok((text.to_string(), String::new()));
    };
    let (split_at, left_tokens) = (starts[best], prefix[best]);
    let right_tokens = total - left_tokens;
    if left_tokens > per_half_limit || right_tokens > per_half_limit {
        return Err(DatasetError::OverBudget { tokens: total, limit: per_half_limit });
    }
    Ok((text[..split_at].to_string(), text[split_at..].to_string()))
}

pub const GUTENBERG_PREFIX: &str = "Project Gutenberg's";
pub const BOOK_TOKEN_CAP: usize = 30_000;

/// Keep a book iff it starts with the Gutenberg prefix and fits the token cap.
pub fn admit_book(text: &str, tokenizer_id: &str) -> Result<bool, DatasetError> {
    admit_book_with_cap(text, tokenizer_id, BOOK_TOKEN_CAP)
}

pub fn admit_book_with_cap(text: &str, tokenizer_id: &str, cap: usize) -> Result<bool, DatasetError> {
    if !text.starts_with(GUTENBERG_PREFIX) {
        return Ok(false);
    }
    Ok(count_tokens(text, tokenizer_id)? <= cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn instance(segments: &[(&str, bool)]) -> TaskInstance {
        TaskInstance {
            id: "hp-1".into(),
            task_kind: TaskKind::HotpotQa,
            input_text: "Which community did Shaw design in 1917?".into(),
            context_segments: segments
                .iter()
                .map(|(id, sup)| ContextSegment { segment_id: id.to_string(), text: format!("text of {id}"), is_supporting: *sup })
                .collect(),
            gold_answers: vec!["Marktown".into()],
            answer_spec: TaskKind::HotpotQa.answer_spec(),
        }
    }

    fn assert_partition(instance: &TaskInstance, shares: &[ContextShare]) {
        let mut seen = HashSet::new();
        for share in shares {
            for id in &share.segments {
                assert!(seen.insert(id.clone()), "segment {id} assigned twice");
            }
        }
        let all: HashSet<String> = instance.context_segments.iter().map(|s| s.segment_id.clone()).collect();
        assert_eq!(seen, all);
    }

    fn write_jsonl(lines: &[String]) -> tempfile::NamedTempFile {
        let mut file = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file
    }

    fn coin_line(id: &str) -> String {
        format!(
            r#"{{"id":"{id}","task_kind":"coin_flip","input_text":"A coin is heads up. Is it still heads up?","context_segments":[],"gold_answers":["yes"],"answer_spec":{{"marker_kind":"the_answer_is","value_domain":"yes_no"}}}}"#
        )
    }

    #[test]
    fn loads_in_file_order() {
        let file = write_jsonl(&[coin_line("a"), coin_line("b"), coin_line("c")]);
        let set = load_task_set(file.path(), TaskKind::CoinFlip).unwrap();
        let ids: Vec<_> = set.instances.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(set.declared_count, 3);
    }

    #[test]
    fn missing_gold_answers_names_line() {
        let broken = coin_line("b").replace(r#""gold_answers":["yes"],"#, "");
        let file = write_jsonl(&[coin_line("a"), broken]);
        match load_task_set(file.path(), TaskKind::CoinFlip) {
            Err(DatasetError::SchemaMismatch { line, field }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "gold_answers");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_line_is_parse_error() {
        let file = write_jsonl(&[coin_line("a"), "{not json".into()]);
        assert!(matches!(load_task_set(file.path(), TaskKind::CoinFlip), Err(DatasetError::ParseError { line: 2, .. })));
    }

    #[test]
    fn manifest_count_enforced() {
        let file = write_jsonl(&[coin_line("a"), coin_line("b")]);
        std::fs::write(manifest_path(file.path()), r#"{"declared_count": 3}"#).unwrap();
        assert!(matches!(
            load_task_set(file.path(), TaskKind::CoinFlip),
            Err(DatasetError::CountMismatch { expected: 3, actual: 2 })
        ));
        let report = validate_task_file(file.path(), TaskKind::CoinFlip, None);
        assert!(!report.passed());
        let count = report.checks.iter().find(|c| c.name == "declared_count").unwrap();
        assert!(count.detail.contains("expected 3") && count.detail.contains("found 2"));
        std::fs::remove_file(manifest_path(file.path())).unwrap();
    }

    #[test]
    fn inconsistent_answer_spec_rejected() {
        let line = coin_line("a").replace("yes_no", "integer");
        let file = write_jsonl(&[line]);
        assert!(matches!(
            load_task_set(file.path(), TaskKind::CoinFlip),
            Err(DatasetError::InvalidInstance { line: 1, violation: InstanceViolation::InconsistentAnswerSpec { .. } })
        ));
    }

    #[test]
    fn random_split_partitions_and_is_deterministic() {
        let inst = instance(&[("s1", false), ("s2", false), ("s3", true), ("s4", true)]);
        let a = split_contexts_random(&inst, 2, 7).unwrap();
        let b = split_contexts_random(&inst, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_partition(&inst, &a);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn random_split_errors() {
        assert!(matches!(split_contexts_random(&instance(&[]), 2, 0), Err(DatasetError::NoSegments)));
        assert!(matches!(split_contexts_random(&instance(&[("a", false)]), 1, 0), Err(DatasetError::TooFewAgents(1))));
    }

    #[test]
    fn supporting_split_gives_one_fact_each() {
        let inst = instance(&[("f1", false), ("s1", true), ("f2", false), ("s2", true), ("f3", false), ("f4", false)]);
        let shares = split_supporting_facts(&inst, 2, 11).unwrap();
        assert_partition(&inst, &shares);
        for share in &shares {
            let supporting = share.segments.iter().filter(|id| inst.segment(id).unwrap().is_supporting).count();
            assert_eq!(supporting, 1);
        }
    }

    #[test]
    fn supporting_split_needs_two_facts() {
        let inst = instance(&[("f1", false), ("s1", true)]);
        assert!(matches!(
            split_supporting_facts(&inst, 2, 0),
            Err(DatasetError::InsufficientSupport { needed: 2, found: 1 })
        ));
    }

    #[test]
    fn bisect_small_text() {
        let text = "one two three four five six seven eight nine ten";
        let (left, right) = bisect_book(text, "whitespace", 16_000).unwrap();
        assert_eq!(format!("{left}{right}"), text);
        assert_eq!(count_tokens(&left, "whitespace").unwrap(), 5);
        assert_eq!(count_tokens(&right, "whitespace").unwrap(), 5);
    }

    #[test]
    fn bisect_over_budget() {
        let text = ["w"; 7].join(" ");
        assert!(matches!(bisect_book(&text, "whitespace", 3), Err(DatasetError::OverBudget { tokens: 7, limit: 3 })));
        assert!(bisect_book(&text, "whitespace", 4).is_ok());
    }

    #[test]
    fn admission_rules() {
        let body = vec!["word"; 11_997].join(" ");
        assert!(admit_book(&format!("Project Gutenberg's Alice {body}"), "whitespace").unwrap());
        assert!(!admit_book(&format!("The Project Gutenberg EBook {body}"), "whitespace").unwrap());
        let long = format!("Project Gutenberg's {}", vec!["w"; 29_999].join(" "));
        assert_eq!(count_tokens(&long, "whitespace").unwrap(), 30_001);
        assert!(!admit_book(&long, "whitespace").unwrap());
    }

    proptest! {
        #[test]
        fn bisection_identity_and_balance(words in prop::collection::vec("[a-z]{1,6}", 0..80), gaps in prop::collection::vec("[ \n\t]{1,3}", 80)) {
            let mut text = String::new();
            for (w, g) in words.iter().zip(&gaps) {
                text.push_str(w);
                text.push_str(g);
            }
            let total = count_tokens(&text, "whitespace").unwrap();
            let limit = total.div_ceil(2).max(1);
            let (left, right) = bisect_book(&text, "whitespace", limit).unwrap();
            prop_assert_eq!(format!("{left}{right}"), text.clone());
            let (l, r) = (count_tokens(&left, "whitespace").unwrap(), count_tokens(&right, "whitespace").unwrap());
            prop_assert_eq!(l + r, total);
            prop_assert!(l.abs_diff(r) <= 1);
        }

        #[test]
        fn admission_monotone_in_length(n in 1usize..60, cut in 0usize..60) {
            let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let text = format!("{GUTENBERG_PREFIX} {}", words.join(" "));
            let cap = 40;
            let prefix = format!("{GUTENBERG_PREFIX} {}", words[..cut.min(n)].join(" "));
            if admit_book_with_cap(&text, "whitespace", cap).unwrap() {
                prop_assert!(admit_book_with_cap(prefix.trim_end(), "whitespace", cap).unwrap());
            }
        }
    }
}
