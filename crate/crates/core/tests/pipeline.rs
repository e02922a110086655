use std::path::{Path, PathBuf};
use std::sync::Arc;

use formbench_core::backend::{BackendError, ChatBackend, ExhaustionPolicy, ReplayBackend, Script, ScriptedBackend, SharedBackend};
use formbench_core::datasets::{load_task_set, split_supporting_facts};
use formbench_core::dialogue::{prepare_agents, run_dialogue};
use formbench_core::reasoning::Reasoner;
use formbench_core::{
    ChatRequest, FormatLabel, PromptCatalog, Strategy, StrategyConfig, TaskKind, TaskSet, Termination, TerminationPolicy,
};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn coin_flips(n: usize) -> TaskSet {
    let full = load_task_set(&fixture("data/coin_flip.jsonl"), TaskKind::CoinFlip).unwrap();
    TaskSet { name: "cf".into(), instances: full.instances[..n].to_vec(), declared_count: n }
}

fn always(model: &str, reply: &str) -> ScriptedBackend {
    ScriptedBackend::new(model, Script::from_responses([reply], ExhaustionPolicy::RepeatLast).unwrap())
}

#[test]
fn cot_accuracy_matches_gold_distribution() {
    let task = coin_flips(20);
    let yes = task.instances.iter().filter(|i| i.gold_answers[0] == "yes").count();
    let catalog = PromptCatalog::builtin();
    let solver = always("solver", "Let's think. So the answer is: yes");
    let (traces, report) = Reasoner::new(&catalog, "whitespace")
        .run_strategy(&task, &StrategyConfig::new(Strategy::Cot), &solver, 2)
        .unwrap();
    assert_eq!(traces.len(), 40);
    assert_eq!(report.n_instances, 20);
    for acc in &report.per_run_accuracy {
        assert!((acc - yes as f64 / 20.0).abs() < 1e-12);
    }
    assert_eq!(report.std, 0.0);
    assert!(traces.iter().all(|t| t.extracted_answer.as_deref() == Some("yes")));
    assert!(traces.iter().all(|t| t.token_usage.completion == 7));
}

#[test]
fn prompts_reach_the_solver() {
    let task = coin_flips(2);
    let catalog = PromptCatalog::builtin();
    let solver = always("solver", "the answer is: no");
    let reasoner = Reasoner::new(&catalog, "whitespace").with_request_seed(100);
    reasoner.run_strategy(&task, &StrategyConfig::forced(FormatLabel::MarkdownTable), &solver, 2).unwrap();
    let requests = solver.requests();
    assert_eq!(requests.len(), 4);
    for r in &requests {
        let prompt = r.prompt_text();
        assert!(prompt.contains("markdown table"), "{prompt}");
        assert!(task.instances.iter().any(|i| prompt.contains(&i.input_text)));
    }
    let seeds: Vec<Option<i64>> = requests.iter().map(|r| r.request_seed).collect();
    assert_eq!(seeds, [Some(100), Some(100), Some(101), Some(101)]);
}

#[test]
fn two_step_note_is_prepended_and_recorded() {
    let task = coin_flips(3);
    let catalog = PromptCatalog::builtin();
    let selector = always("gpt-4", "Use a state table with one row per person.");
    let solver = always("gpt-3.5-turbo", "the answer is: no");
    let outcome = Reasoner::new(&catalog, "whitespace")
        .run_two_step(&task, &StrategyConfig::new(Strategy::TwoStepInstance), &selector, &solver, 1, 0)
        .unwrap();
    assert_eq!(selector.calls(), 3);
    assert!(outcome.notes.iter().all(|n| n.selector_model == "gpt-4"));
    for (trace, request) in outcome.traces.iter().zip(solver.requests()) {
        assert!(request.prompt_text().contains("one row per person"));
        assert_eq!(trace.format_note.as_deref(), Some("Use a state table with one row per person."));
        assert_eq!(trace.provenance.selector_model.as_deref(), Some("gpt-4"));
        assert_eq!(trace.provenance.solver_model, "gpt-3.5-turbo");
    }
}

#[test]
fn dialogue_modes_render_distinct_prompts() {
    let set = load_task_set(&fixture("data/hotpot_qa.jsonl"), TaskKind::HotpotQa).unwrap();
    let inst = &set.instances[0];
    let shares = split_supporting_facts(inst, 2, 1).unwrap();
    let catalog = PromptCatalog::builtin();
    let mut prompts = Vec::new();
    for mode in [Strategy::DialogueNl, Strategy::DialogueAutoform, Strategy::DialogueKqml, Strategy::DialogueJsonKqml] {
        let a: SharedBackend = Arc::new(always("m", "<A>Marktown</A>"));
        let b: SharedBackend = Arc::new(always("m", "<A>Marktown</A>"));
        let agents = prepare_agents(&catalog, inst, mode, vec![("Emily".into(), a, shares[0].clone()), ("Fiona".into(), b, shares[1].clone())]).unwrap();
        assert!(agents[0].system_prompt.contains("Emily") && agents[0].system_prompt.contains("Fiona"));
        assert!(agents[0].system_prompt.contains(&inst.input_text));
        let t = run_dialogue(inst, &agents, &StrategyConfig::new(mode), 3, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
        assert_eq!(t.termination, Termination::Consensus);
        prompts.push(agents[0].system_prompt.clone());
    }
    for i in 0..prompts.len() {
        for j in i + 1..prompts.len() {
            assert_ne!(prompts[i], prompts[j]);
        }
    }
}

#[test]
fn single_answer_policy_accepts_unchallenged_answer() {
    let set = load_task_set(&fixture("data/hotpot_qa.jsonl"), TaskKind::HotpotQa).unwrap();
    let inst = &set.instances[1];
    let shares = split_supporting_facts(inst, 2, 0).unwrap();
    let a: SharedBackend = Arc::new(always("m", "<A>Jonny Craig</A>"));
    let b: SharedBackend = Arc::new(always("m", "I have nothing to add."));
    let agents = prepare_agents(&PromptCatalog::builtin(), inst, Strategy::DialogueNl, vec![("A".into(), a.clone(), shares[0].clone()), ("B".into(), b.clone(), shares[1].clone())]).unwrap();
    let mode = StrategyConfig::new(Strategy::DialogueNl);
    let strict = run_dialogue(inst, &agents, &mode, 3, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
    assert_eq!(strict.termination, Termination::MaxRounds);
    assert_eq!(strict.final_answer, None);
    let lenient = run_dialogue(inst, &agents, &mode, 3, TerminationPolicy::SingleAnswerOk, "whitespace").unwrap();
    assert_eq!(lenient.termination, Termination::SingleAnswer);
    assert_eq!(lenient.final_answer.as_deref(), Some("Jonny Craig"));
}

#[test]
fn replay_past_the_recording_is_an_error() {
    let set = load_task_set(&fixture("data/hotpot_qa.jsonl"), TaskKind::HotpotQa).unwrap();
    let inst = &set.instances[0];
    let shares = split_supporting_facts(inst, 2, 0).unwrap();
    let a: SharedBackend = Arc::new(ScriptedBackend::from_responses("m", ["<A>x</A>", "<A>y</A>"]));
    let b: SharedBackend = Arc::new(ScriptedBackend::from_responses("m", ["<A>y</A>"]));
    let agents = prepare_agents(&PromptCatalog::builtin(), inst, Strategy::DialogueNl, vec![("A".into(), a, shares[0].clone()), ("B".into(), b, shares[1].clone())]).unwrap();
    let t = run_dialogue(inst, &agents, &StrategyConfig::new(Strategy::DialogueNl), 5, TerminationPolicy::StrictConsensus, "whitespace").unwrap();
    assert_eq!(t.termination, Termination::Consensus);

    let replay = ReplayBackend::from_transcript("m", &t, None);
    assert_eq!(replay.len(), 3);
    let req = ChatRequest::new("m", vec![formbench_core::backend::ChatMessage::user("go")]);
    for turn in &t.turns {
        assert_eq!(replay.complete(&req).unwrap().content, turn.message);
    }
    assert!(matches!(replay.complete(&req), Err(BackendError::ScriptExhausted { consumed: 3 })));
}
