//! Turn-taking conversation engine for agents holding disjoint context
//! shares.
//!
//! Agents speak in fixed order. Each turn the speaker receives its own system
//! prompt plus the labeled history of everything said so far; the engine
//! extracts any answer from the reply and stops on consensus, on an
//! unchallenged single answer (when allowed), after `max_rounds`, or when a
//! backend fails.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::tokenizer::TokenizerError;
use crate::backend::{completion_tokens, ChatMessage, ChatRequest, SharedBackend};
use crate::datasets::{ContextShare, TaskInstance};
use crate::prompting::{PromptCatalog, PromptError, Strategy, StrategyConfig};
use crate::reasoning::{extract_answer, normalize_free_text};

pub use crate::backend::TokenSource;

pub const DEFAULT_MAX_ROUNDS: usize = 5;
pub const START_MESSAGE: &str = "Begin the discussion.";

#[derive(Clone)]
pub struct AgentSpec {
    pub name: String,
    pub backend: SharedBackend,
    pub share: ContextShare,
    pub system_prompt: String,
}

impl fmt::Debug for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentSpec")
            .field("name", &self.name)
            .field("backend", &self.backend.id())
            .field("share", &self.share)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub round: usize,
    pub agent: String,
    pub message: String,
    pub extracted_answer: Option<String>,
    pub completion_tokens: u64,
    pub token_source: TokenSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Consensus,
    SingleAnswer,
    MaxRounds,
    BackendError,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationPolicy {
    #[default]
    #[serde(alias = "strict")]
    StrictConsensus,
    #[serde(alias = "single")]
    SingleAnswerOk,
}

impl FromStr for TerminationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" | "strict_consensus" => Ok(Self::StrictConsensus),
            "single" | "single_answer_ok" => Ok(Self::SingleAnswerOk),
            _ => Err(format!("unknown termination policy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTranscript {
    pub instance_id: String,
    pub mode: StrategyConfig,
    pub turns: Vec<Turn>,
    pub termination: Termination,
    pub final_answer: Option<String>,
    pub total_completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DialogueTranscript {
    pub fn load(path: &Path) -> Result<Self, DialogueError> {
        let io = |reason: String| DialogueError::Io { path: path.display().to_string(), reason };
        let raw = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&raw).map_err(|e| io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DialogueError> {
        let io = |reason: String| DialogueError::Io { path: path.display().to_string(), reason };
        let raw = serde_json::to_string_pretty(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, raw + "\n").map_err(|e| io(e.to_string()))
    }

    /// Latest answer stated by `agent`, if any.
    pub fn latest_answer(&self, agent: &str) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .filter(|t| t.agent == agent)
            .find_map(|t| t.extracted_answer.as_deref())
    }
}

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("a dialogue needs at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("agent name `{0}` is used twice")]
    DuplicateAgent(String),
    #[error("agent `{agent}` was shown segment `{segment_id}` from another agent's share")]
    ShareLeak { agent: String, segment_id: String },
    #[error("context shares do not partition the instance: {0}")]
    InvalidShares(String),
    #[error("max_rounds must be positive")]
    ZeroRounds,
    #[error("strategy {0} is not a dialogue mode")]
    NotDialogueMode(Strategy),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

/// "A and B", "A, B and C".
pub fn join_roles(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Build one agent per (name, backend, share) with its dialogue system prompt.
pub fn prepare_agents(
    catalog: &PromptCatalog,
    instance: &TaskInstance,
    mode: Strategy,
    participants: Vec<(String, SharedBackend, ContextShare)>,
) -> Result<Vec<AgentSpec>, DialogueError> {
    let names: Vec<&str> = participants.iter().map(|(n, _, _)| n.as_str()).collect();
    let all_roles = join_roles(&names);
    participants
        .iter()
        .map(|(name, backend, share)| {
            let system_prompt = catalog.build_dialogue_prompt(name, &all_roles, &share.render(instance), instance, mode)?;
            Ok(AgentSpec { name: name.clone(), backend: backend.clone(), share: share.clone(), system_prompt })
        })
        .collect()
}

fn check_agents(instance: &TaskInstance, agents: &[AgentSpec]) -> Result<(), DialogueError> {
    if agents.len() < 2 {
        return Err(DialogueError::TooFewAgents(agents.len()));
    }
    let mut names = HashSet::new();
    for agent in agents {
        if !names.insert(agent.name.as_str()) {
            return Err(DialogueError::DuplicateAgent(agent.name.clone()));
        }
    }
    let mut owner = HashSet::new();
    for agent in agents {
        for id in &agent.share.segments {
            if instance.segment(id).is_none() {
                return Err(DialogueError::InvalidShares(format!("unknown segment `{id}`")));
            }
            if !owner.insert(id.as_str()) {
                return Err(DialogueError::InvalidShares(format!("segment `{id}` assigned twice")));
            }
        }
    }
    if let Some(missing) = instance.context_segments.iter().find(|s| !owner.contains(s.segment_id.as_str())) {
        return Err(DialogueError::InvalidShares(format!("segment `{}` unassigned", missing.segment_id)));
    }
    for agent in agents {
        let own = agent.share.render(instance);
        for seg in &instance.context_segments {
            let foreign = !agent.share.segments.contains(&seg.segment_id);
            let text = seg.text.trim();
            if foreign && !text.is_empty() && agent.system_prompt.contains(text) && !own.contains(text) {
                return Err(DialogueError::ShareLeak { agent: agent.name.clone(), segment_id: seg.segment_id.clone() });
            }
        }
    }
    Ok(())
}

/// History shown to the next speaker: every prior turn as "[name]: message".
pub fn render_history(turns: &[Turn]) -> String {
    if turns.is_empty() {
        return START_MESSAGE.to_string();
    }
    turns
        .iter()
        .map(|t| format!("[{}]: {}", t.agent, t.message))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn answer_key(answer: &str) -> String {
    normalize_free_text(answer)
}

/// Decide whether the dialogue ends after the turns so far. `n_agents` is the
/// size of the speaking order. The round cap is enforced by the caller.
pub fn check_termination(turns: &[Turn], n_agents: usize, policy: TerminationPolicy) -> Option<Termination> {
    if n_agents == 0 || turns.is_empty() {
        return None;
    }
    if turns.len() >= n_agents {
        let latest = &turns[turns.len() - n_agents..];
        let keys: Option<Vec<String>> = latest.iter().map(|t| t.extracted_answer.as_deref().map(answer_key)).collect();
        if let Some(keys) = keys {
            if keys.windows(2).all(|w| w[0] == w[1]) {
                return Some(Termination::Consensus);
            }
        }
    }
    if policy == TerminationPolicy::SingleAnswerOk {
        if let Some(since) = unchallenged_since(turns) {
            if turns.len() - 1 - since >= n_agents {
                return Some(Termination::SingleAnswer);
            }
        }
    }
    None
}

/// Index of the turn from which the latest answer has stood unchallenged.
fn unchallenged_since(turns: &[Turn]) -> Option<usize> {
    let (last, answer) = turns.iter().enumerate().rev().find_map(|(i, t)| t.extracted_answer.as_deref().map(|a| (i, a)))?;
    let key = answer_key(answer);
    let mut since = last;
    for (i, turn) in turns[..last].iter().enumerate().rev() {
        match turn.extracted_answer.as_deref() {
            Some(a) if answer_key(a) == key => since = i,
            Some(_) => break,
            None => {}
        }
    }
    Some(since)
}

fn last_answer(turns: &[Turn]) -> Option<String> {
    turns.iter().rev().find_map(|t| t.extracted_answer.clone())
}

/// Total completion tokens, number of turns and number of rounds.
pub fn measure_dialogue(transcript: &DialogueTranscript) -> (u64, usize, usize) {
    let total = transcript.turns.iter().map(|t| t.completion_tokens).sum();
    let rounds = transcript.turns.iter().map(|t| t.round).max().unwrap_or(0);
    (total, transcript.turns.len(), rounds)
}

pub fn run_dialogue(
    instance: &TaskInstance,
    agents: &[AgentSpec],
    mode: &StrategyConfig,
    max_rounds: usize,
    policy: TerminationPolicy,
    tokenizer_id: &str,
) -> Result<DialogueTranscript, DialogueError> {
    if !mode.strategy.is_dialogue() {
        return Err(DialogueError::NotDialogueMode(mode.strategy));
    }
    if max_rounds == 0 {
        return Err(DialogueError::ZeroRounds);
    }
    check_agents(instance, agents)?;
    let n = agents.len();
    let mut turns: Vec<Turn> = Vec::new();
    let mut error = None;
    let termination = 'talk: {
        for index in 0..max_rounds * n {
            let agent = &agents[index % n];
            let messages = vec![ChatMessage::system(agent.system_prompt.clone()), ChatMessage::user(render_history(&turns))];
            let request = ChatRequest::new(agent.backend.model_id(), messages);
            let response = match agent.backend.complete(&request) {
                Ok(response) => response,
                Err(e) => {
                    error = Some(format!("{}: {e}", agent.name));
                    break 'talk Termination::BackendError;
                }
            };
            let (tokens, source) = completion_tokens(&response, tokenizer_id)?;
            turns.push(Turn {
                round: index / n + 1,
                agent: agent.name.clone(),
                extracted_answer: extract_answer(&response.content, &instance.answer_spec),
                message: response.content,
                completion_tokens: tokens,
                token_source: source,
            });
            if let Some(done) = check_termination(&turns, n, policy) {
                break 'talk done;
            }
        }
        Termination::MaxRounds
    };
    let final_answer = match (termination, policy) {
        (Termination::Consensus, _) | (_, TerminationPolicy::SingleAnswerOk) => last_answer(&turns),
        _ => None,
    };
    let total_completion_tokens = turns.iter().map(|t| t.completion_tokens).sum();
    Ok(DialogueTranscript {
        instance_id: instance.id.clone(),
        mode: mode.clone(),
        turns,
        termination,
        final_answer,
        total_completion_tokens,
        error,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::ScriptedBackend;
    use crate::datasets::{ContextSegment, TaskKind};

    fn instance() -> TaskInstance {
        TaskInstance {
            id: "q1".into(),
            task_kind: TaskKind::HotpotQa,
            input_text: "Which city?".into(),
            context_segments: vec![
                ContextSegment { segment_id: "s0".into(), text: "Paris is in France.".into(), is_supporting: true },
                ContextSegment { segment_id: "s1".into(), text: "The Louvre is in Paris.".into(), is_supporting: true },
            ],
            gold_answers: vec!["Paris".into()],
            answer_spec: TaskKind::HotpotQa.answer_spec(),
        }
    }

    fn scripted(replies: &[&str]) -> SharedBackend {
        Arc::new(ScriptedBackend::from_responses("scripted-model", replies.iter().copied()))
    }

    fn agents(inst: &TaskInstance, a: &[&str], b: &[&str]) -> Vec<AgentSpec> {
        let shares = [
            ContextShare { agent_index: 0, segments: vec!["s0".into()] },
            ContextShare { agent_index: 1, segments: vec!["s1".into()] },
        ];
        prepare_agents(
            &PromptCatalog::builtin(),
            inst,
            Strategy::DialogueNl,
            vec![("Alice".into(), scripted(a), shares[0].clone()), ("Bob".into(), scripted(b), shares[1].clone())],
        )
        .unwrap()
    }

    fn turn(i: usize, answer: Option<&str>) -> Turn {
        Turn {
            round: i / 2 + 1,
            agent: ["A", "B"][i % 2].into(),
            message: String::new(),
            extracted_answer: answer.map(String::from),
            completion_tokens: 0,
            token_source: TokenSource::Provider,
        }
    }

    fn mode() -> StrategyConfig {
        StrategyConfig::new(Strategy::DialogueNl)
    }

    #[test]
    fn immediate_agreement() {
        let inst = instance();
        let t = run_dialogue(&inst, &agents(&inst, &["<A>paris</A>"], &["<A>Paris.</A>"]), &mode(), 5, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        assert_eq!(t.termination, Termination::Consensus);
        assert_eq!(t.final_answer.as_deref(), Some("Paris"));
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.total_completion_tokens, 2);
        assert_eq!(measure_dialogue(&t), (2, 2, 1));
    }

    #[test]
    fn forced_disagreement_hits_round_cap() {
        let inst = instance();
        let a = ["<A>x1</A>", "<A>x2</A>", "<A>x3</A>", "<A>x4</A>"];
        let b = ["<A>y1</A>", "<A>y2</A>", "<A>y3</A>", "<A>y4</A>"];
        let t = run_dialogue(&inst, &agents(&inst, &a, &b), &mode(), 4, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        assert_eq!(t.termination, Termination::MaxRounds);
        assert_eq!(t.final_answer, None);
        assert_eq!(t.turns.len(), 8);
        let speakers: Vec<&str> = t.turns.iter().map(|t| t.agent.as_str()).collect();
        assert_eq!(speakers, ["Alice", "Bob", "Alice", "Bob", "Alice", "Bob", "Alice", "Bob"]);
        let rounds: Vec<usize> = t.turns.iter().map(|t| t.round).collect();
        assert_eq!(rounds, [1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn backend_failure_is_recorded() {
        let inst = instance();
        let t = run_dialogue(&inst, &agents(&inst, &["hello", "again"], &["hi"]), &mode(), 3, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        assert_eq!(t.termination, Termination::BackendError);
        assert_eq!(t.turns.len(), 3);
        assert!(t.error.unwrap().starts_with("Bob:"));
    }

    #[test]
    fn history_grows_by_one_labeled_message() {
        let inst = instance();
        let a = scripted(&["hi bob", "<A>paris</A>"]);
        let b = scripted(&["hi alice", "<A>paris</A>"]);
        let shares = [
            ContextShare { agent_index: 0, segments: vec!["s0".into()] },
            ContextShare { agent_index: 1, segments: vec!["s1".into()] },
        ];
        let specs = prepare_agents(
            &PromptCatalog::builtin(),
            &inst,
            Strategy::DialogueNl,
            vec![("Alice".into(), a, shares[0].clone()), ("Bob".into(), b, shares[1].clone())],
        )
        .unwrap();
        run_dialogue(&inst, &specs, &mode(), 5, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        assert!(specs[0].system_prompt.contains("Paris is in France.") && !specs[0].system_prompt.contains("The Louvre"));
        assert!(specs[1].system_prompt.contains("The Louvre is in Paris.") && !specs[1].system_prompt.contains("Paris is in France."));
    }

    #[test]
    fn render_history_labels_speakers() {
        assert_eq!(render_history(&[]), START_MESSAGE);
        let mut t = vec![turn(0, None), turn(1, None)];
        t[0].message = "hello".into();
        t[1].message = "hi".into();
        assert_eq!(render_history(&t), "[A]: hello\n\n[B]: hi");
    }

    #[test]
    fn share_leak_detected() {
        let inst = instance();
        let mut specs = agents(&inst, &["x"], &["y"]);
        specs[0].system_prompt.push_str("\nThe Louvre is in Paris.");
        match run_dialogue(&inst, &specs, &mode(), 2, TerminationPolicy::StrictConsensus, "whitespace") {
            Err(DialogueError::ShareLeak { agent, segment_id }) => assert_eq!((agent.as_str(), segment_id.as_str()), ("Alice", "s1")),
            other => panic!("expected leak, got {other:?}"),
        }
    }

    #[test]
    fn invalid_setups_rejected() {
        let inst = instance();
        let specs = agents(&inst, &["x"], &["y"]);
        assert!(matches!(run_dialogue(&inst, &specs[..1], &mode(), 2, TerminationPolicy::StrictConsensus, "whitespace"), Err(DialogueError::TooFewAgents(1))));
        assert!(matches!(run_dialogue(&inst, &specs, &mode(), 0, TerminationPolicy::StrictConsensus, "whitespace"), Err(DialogueError::ZeroRounds)));
        let mut dup = specs.clone();
        dup[1].name = "Alice".into();
        assert!(matches!(run_dialogue(&inst, &dup, &mode(), 2, TerminationPolicy::StrictConsensus, "whitespace"), Err(DialogueError::DuplicateAgent(_))));
        let mut overlap = specs.clone();
        overlap[1].share.segments.push("s0".into());
        assert!(matches!(run_dialogue(&inst, &overlap, &mode(), 2, TerminationPolicy::StrictConsensus, "whitespace"), Err(DialogueError::InvalidShares(_))));
        let cot = StrategyConfig::new(Strategy::Cot);
        assert!(matches!(run_dialogue(&inst, &specs, &cot, 2, TerminationPolicy::StrictConsensus, "whitespace"), Err(DialogueError::NotDialogueMode(_))));
    }

    #[test]
    fn termination_examples() {
        let strict = TerminationPolicy::StrictConsensus;
        assert_eq!(check_termination(&[turn(0, Some("x")), turn(1, Some("x"))], 2, strict), Some(Termination::Consensus));
        assert_eq!(check_termination(&[turn(0, Some("x")), turn(1, Some("y"))], 2, strict), None);
        let silent_round = [turn(0, Some("x")), turn(1, None), turn(2, None)];
        assert_eq!(check_termination(&silent_round, 2, TerminationPolicy::SingleAnswerOk), Some(Termination::SingleAnswer));
        assert_eq!(check_termination(&silent_round, 2, strict), None);
        assert_eq!(check_termination(&silent_round[..2], 2, TerminationPolicy::SingleAnswerOk), None);
    }

    /// Truth-table oracle for two agents: the game ends on turn t when the
    /// last two turns agree, or (single mode) when the latest answer was
    /// first stated two or more turns ago with no different answer since.
    fn oracle(pattern: &[Option<&str>], single: bool) -> Option<Termination> {
        let t = pattern.len();
        if t >= 2 && pattern[t - 1].is_some() && pattern[t - 1] == pattern[t - 2] {
            return Some(Termination::Consensus);
        }
        if single {
            let answered: Vec<(usize, &str)> = pattern.iter().enumerate().filter_map(|(i, a)| a.map(|a| (i, a))).collect();
            if let Some(&(_, last)) = answered.last() {
                let first_of_run = answered.iter().rev().take_while(|(_, a)| *a == last).last().unwrap().0;
                if t - 1 - first_of_run >= 2 {
                    return Some(Termination::SingleAnswer);
                }
            }
        }
        None
    }

    #[test]
    fn termination_matches_truth_table() {
        let choices = [None, Some("x"), Some("y")];
        for len in 1..=6 {
            for code in 0..3usize.pow(len as u32) {
                let pattern: Vec<Option<&str>> = (0..len).map(|i| choices[code / 3usize.pow(i as u32) % 3]).collect();
                let turns: Vec<Turn> = pattern.iter().enumerate().map(|(i, a)| turn(i, *a)).collect();
                for (single, policy) in [(false, TerminationPolicy::StrictConsensus), (true, TerminationPolicy::SingleAnswerOk)] {
                    assert_eq!(check_termination(&turns, 2, policy), oracle(&pattern, single), "{pattern:?} {policy:?}");
                }
            }
        }
    }

    #[test]
    fn transcript_round_trip_preserves_totals() {
        let inst = instance();
        let t = run_dialogue(&inst, &agents(&inst, &["one two", "<A>paris</A>"], &["three", "<A>paris</A>"]), &mode(), 5, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: DialogueTranscript = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(measure_dialogue(&back), (5, 4, 2));
        assert_eq!(back.latest_answer("Bob"), Some("paris"));
        assert!(json.contains("\"token_source\":\"local:whitespace\""));
    }

    #[test]
    fn policy_parses_cli_spellings() {
        assert_eq!("strict".parse::<TerminationPolicy>().unwrap(), TerminationPolicy::StrictConsensus);
        assert_eq!("single".parse::<TerminationPolicy>().unwrap(), TerminationPolicy::SingleAnswerOk);
        assert!("other".parse::<TerminationPolicy>().is_err());
    }
}
