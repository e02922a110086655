use std::path::{Path, PathBuf};

use formbench_core::datasets::{
    load_task_set, split_contexts_random, split_supporting_facts, validate_task_file, DatasetError,
};
use formbench_core::TaskKind;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check<'a>(report: &'a formbench_core::datasets::ValidationReport, name: &str) -> &'a formbench_core::datasets::CheckResult {
    report.checks.iter().find(|c| c.name == name).unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn coin_flip_fixture_loads_with_manifest() {
    let set = load_task_set(&fixture("data/coin_flip.jsonl"), TaskKind::CoinFlip).unwrap();
    assert_eq!(set.instances.len(), 500);
    assert_eq!(set.declared_count, 500);
    assert_eq!(set.name, "coin_flip_fixture");
    assert!(set.instances.iter().all(|i| i.gold_answers == ["yes"] || i.gold_answers == ["no"]));
}

#[test]
fn coin_flip_fixture_validates() {
    let report = validate_task_file(&fixture("data/coin_flip.jsonl"), TaskKind::CoinFlip, Some(500));
    assert!(report.passed(), "{:?}", report.checks);
    assert_eq!(report.task_set.unwrap().instances.len(), 500);
}

#[test]
fn wrong_kind_is_reported() {
    let err = load_task_set(&fixture("data/coin_flip.jsonl"), TaskKind::Aqua).unwrap_err();
    assert!(matches!(err, DatasetError::WrongTaskKind { line: 1, .. }), "{err}");
    let report = validate_task_file(&fixture("data/coin_flip.jsonl"), TaskKind::Aqua, None);
    assert!(!check(&report, "task_kind").passed);
    assert!(report.task_set.is_none());
}

#[test]
fn count_mismatch_names_both_counts() {
    let report = validate_task_file(&fixture("data/coin_flip.jsonl"), TaskKind::CoinFlip, Some(499));
    let c = check(&report, "declared_count");
    assert!(!c.passed);
    assert!(c.detail.contains("499") && c.detail.contains("500"), "{}", c.detail);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cf.jsonl");
    let lines: Vec<String> = std::fs::read_to_string(fixture("data/coin_flip.jsonl")).unwrap().lines().take(3).map(String::from).collect();
    std::fs::write(&data, lines.join("\n")).unwrap();
    std::fs::write(dir.path().join("cf.manifest.json"), r#"{"declared_count": 4}"#).unwrap();
    let err = load_task_set(&data, TaskKind::CoinFlip).unwrap_err();
    assert!(matches!(err, DatasetError::CountMismatch { expected: 4, actual: 3 }), "{err}");
}

#[test]
fn duplicate_segment_and_schema_errors_are_positioned() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hp.jsonl");
    let mut lines: Vec<String> = std::fs::read_to_string(fixture("data/hotpot_qa.jsonl")).unwrap().lines().map(String::from).collect();
    lines[1] = lines[1].replace("\"q1\"", "\"q0\"");
    lines.push(r#"{"id": "x", "task_kind": "hotpot_qa"}"#.into());
    std::fs::write(&path, lines.join("\n")).unwrap();

    let report = validate_task_file(&path, TaskKind::HotpotQa, None);
    let dup = check(&report, "unique_segment_ids");
    assert!(!dup.passed && dup.detail.contains("line 2") && dup.detail.contains("q0"), "{}", dup.detail);
    let schema = check(&report, "schema");
    assert!(!schema.passed && schema.detail.contains("line 3"), "{}", schema.detail);
    assert!(check(&report, "readable").passed);

    match load_task_set(&path, TaskKind::HotpotQa).unwrap_err() {
        DatasetError::InvalidInstance { line, .. } => assert_eq!(line, 2),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_file_fails_readable_check() {
    let report = validate_task_file(Path::new("/nonexistent/x.jsonl"), TaskKind::Aqua, None);
    assert_eq!(report.checks.len(), 1);
    assert!(!report.passed());
}

#[test]
fn splits_are_seed_deterministic() {
    let set = load_task_set(&fixture("data/hotpot_qa.jsonl"), TaskKind::HotpotQa).unwrap();
    let inst = &set.instances[0];
    assert_eq!(split_contexts_random(inst, 2, 5).unwrap(), split_contexts_random(inst, 2, 5).unwrap());
    let differs = (0..20).any(|s| split_contexts_random(inst, 2, s).unwrap() != split_contexts_random(inst, 2, 0).unwrap());
    assert!(differs, "seed has no effect");
    let shares = split_supporting_facts(inst, 2, 3).unwrap();
    for share in &shares {
        assert!(share.segments.iter().any(|id| inst.segment(id).unwrap().is_supporting));
    }
    assert!(matches!(split_supporting_facts(inst, 3, 0), Err(DatasetError::InsufficientSupport { needed: 3, found: 2 })));
}
