//! RougeL, token-reduction percentages, run aggregation, a heuristic
//! response-format classifier and report emitters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::FormatLabel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("baseline mean must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("cannot aggregate an empty sequence")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Lowercased alphanumeric runs.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return RougeScore::ZERO;
    }
    let l = lcs_length(&c, &r) as f64;
    let precision = l / c.len() as f64;
    let recall = l / r.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    RougeScore { precision, recall, f1 }
}

/// Best score against any of several gold answers, by F1.
pub fn rouge_l_max(candidate: &str, golds: &[String]) -> RougeScore {
    golds
        .iter()
        .map(|g| rouge_l(candidate, g))
        .fold(RougeScore::ZERO, |best, s| if s.f1 > best.f1 { s } else { best })
}

/// Signed percentage change from baseline to treatment, full precision.
pub fn delta_tokens(baseline_mean: f64, treatment_mean: f64) -> Result<f64, MetricsError> {
    if baseline_mean.is_nan() || baseline_mean <= 0.0 {
        return Err(MetricsError::ZeroBaseline(baseline_mean));
    }
    Ok(100.0 * (treatment_mean - baseline_mean) / baseline_mean)
}

pub fn round_to(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let r = (value * scale).round() / scale;
    if r == 0.0 { 0.0 } else { r }
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(RunAggregate { mean, std, n })
}

// ---------------------------------------------------------------------------
// Format classification

static TABLE_ROW: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*\|?[^|\n]*\|[^\n]*$").unwrap());
static TABLE_SEP: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*\|?\s*:?-+:?\s*(\|\s*:?-+:?\s*)*\|?\s*$").unwrap());
static NUMBERED: Lazy<Regex> = Lazy::new(|| Regex::new(r"^(\s*)\d+[.)]\s+\S").unwrap());
static BULLET: Lazy<Regex> = Lazy::new(|| Regex::new(r"^(\s*)[-*•+]\s+\S").unwrap());
static FENCE: Lazy<Regex> = Lazy::new(|| Regex::new(r"^\s*(```|~~~)\s*([A-Za-z0-9_+-]*)").unwrap());
static LOGIC_SYMBOL: Lazy<Regex> = Lazy::new(|| Regex::new(r"[∧∨¬]|=>|==|!=").unwrap());
static LOGIC_WORD: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"(?:[\w)\]]\s+(?:AND|OR)\s+[\w(¬\[])|(?:(?:^|[\s(])NOT\s*\(?\s*[A-Za-z_]\w*)").unwrap());
static OPERAND: Lazy<Regex> = Lazy::new(|| Regex::new(r"^[\w().\[\]+\-*/^×÷%]+$").unwrap());

struct Fenced {
    language: String,
    body: String,
}

/// Splits text into prose lines and fenced code blocks.
fn split_fences(text: &str) -> (Vec<&str>, Vec<Fenced>) {
    let mut prose = Vec::new();
    let mut blocks = Vec::new();
    let mut open: Option<Fenced> = None;
    for line in text.lines() {
        match (&mut open, FENCE.captures(line)) {
            (None, Some(c)) => open = Some(Fenced { language: c[2].to_lowercase(), body: String::new() }),
            (Some(_), Some(_)) => blocks.push(open.take().unwrap()),
            (Some(block), None) => {
                block.body.push_str(line);
                block.body.push('\n');
            }
            (None, None) => prose.push(line),
        }
    }
    if let Some(block) = open {
        blocks.push(block);
    }
    (prose, blocks)
}

fn contains_json_object(text: &str) -> bool {
    text.match_indices('{').any(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        matches!(stream.next(), Some(Ok(serde_json::Value::Object(_))))
    })
}

fn has_table(lines: &[&str]) -> bool {
    lines
        .windows(2)
        .any(|w| TABLE_ROW.is_match(w[0]) && !TABLE_SEP.is_match(w[0]) && TABLE_SEP.is_match(w[1]) && w[1].contains('|'))
}

fn has_ordered_list(lines: &[&str]) -> bool {
    let non_blank: Vec<&&str> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
    non_blank.windows(2).any(|w| NUMBERED.is_match(w[0]) && NUMBERED.is_match(w[1]))
}

fn list_indent(line: &str) -> Option<usize> {
    BULLET
        .captures(line)
        .or_else(|| NUMBERED.captures(line))
        .map(|c| c[1].chars().map(|ch| if ch == '\t' { 4 } else { 1 }).sum())
}

fn has_nested_list(lines: &[&str]) -> bool {
    let mut parent: Option<usize> = None;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        match list_indent(line) {
            Some(indent) => {
                if BULLET.is_match(line) && parent.is_some_and(|p| indent > p) {
                    return true;
                }
                parent = Some(parent.map_or(indent, |p| p.min(indent)));
            }
            None => parent = None,
        }
    }
    false
}

fn is_symbolic_operand(token: &str) -> bool {
    let token = token.trim_end_matches([',', ';', ':']);
    if token.is_empty() || !OPERAND.is_match(token) {
        return false;
    }
    token.chars().any(|c| c.is_ascii_digit() || "+-*/^×÷()".contains(c)) || token.chars().count() <= 3
}

fn has_equation(line: &str) -> bool {
    let chars: Vec<char> = line.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c != '=' {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        if matches!(prev, Some('=' | '!' | '<' | '>')) || matches!(next, Some('=' | '>')) {
            continue;
        }
        let left: String = chars[..i].iter().collect();
        let right: String = chars[i + 1..].iter().collect();
        let left = left.split_whitespace().last().unwrap_or("");
        let right = right.split_whitespace().next().unwrap_or("");
        if is_symbolic_operand(left) && is_symbolic_operand(right) {
            return true;
        }
    }
    false
}

pub fn classify_format(text: &str) -> BTreeSet<FormatLabel> {
    let (prose, blocks) = split_fences(text);
    let mut labels = BTreeSet::new();

    let prose_text = prose.join("\n");
    let json_block = |b: &Fenced| b.language == "json" || serde_json::from_str::<serde_json::Value>(&b.body).is_ok();
    if contains_json_object(&prose_text) || blocks.iter().any(|b| json_block(b) && contains_json_object(&b.body)) {
        labels.insert(FormatLabel::Json);
    }
    if blocks.iter().any(|b| !json_block(b) && !b.body.trim().is_empty()) {
        labels.insert(FormatLabel::CodeOrPseudocode);
    }
    if has_table(&prose) {
        labels.insert(FormatLabel::MarkdownTable);
    }
    if has_ordered_list(&prose) {
        labels.insert(FormatLabel::OrderedList);
    }
    if prose.iter().filter(|l| BULLET.is_match(l)).count() >= 2 {
        labels.insert(FormatLabel::UnorderedList);
    }
    if has_nested_list(&prose) {
        labels.insert(FormatLabel::MultiLevelList);
    }
    if prose.iter().any(|l| LOGIC_SYMBOL.is_match(l) || LOGIC_WORD.is_match(l)) {
        labels.insert(FormatLabel::LogicalExpression);
    }
    if prose.iter().any(|l| has_equation(l)) {
        labels.insert(FormatLabel::MathEquation);
    }
    if labels.is_empty() {
        labels.insert(FormatLabel::NaturalLanguage);
    }
    labels
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatTally {
    pub counts: BTreeMap<FormatLabel, usize>,
}

impl FormatTally {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tally = Self::default();
        for text in texts {
            tally.add(&classify_format(text));
        }
        tally
    }

    pub fn add(&mut self, labels: &BTreeSet<FormatLabel>) {
        for label in labels {
            *self.counts.entry(*label).or_default() += 1;
        }
    }

    pub fn get(&self, label: FormatLabel) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Reports

/// One line of a results table. `score` is RougeL for dialogue runs and
/// accuracy for reasoning runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub setting: String,
    pub score: Option<f64>,
    pub score_std: Option<f64>,
    pub tokens: Option<f64>,
    pub delta_tokens: Option<f64>,
}

fn cell(value: Option<f64>, decimals: usize) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{:.*}", decimals, round_to(v, decimals as u32)))
}

/// Markdown table: Task | Setting | <score> | # Tokens | ΔTokens.
pub fn render_markdown(rows: &[ReportRow], score_header: &str) -> String {
    let mut out = format!("| Task | Setting | {score_header} | # Tokens | ΔTokens |\n|---|---|---|---|---|\n");
    for row in rows {
        let score = match (row.score, row.score_std) {
            (Some(s), Some(sd)) if sd > 0.0 => format!("{} ± {}", cell(Some(s), 2), cell(Some(sd), 2)),
            (s, _) => cell(s, 2),
        };
        let delta = row.delta_tokens.map_or_else(|| "-".to_string(), |d| format!("{}%", cell(Some(d), 1)));
        let _ = writeln!(out, "| {} | {} | {} | {} | {} |", row.task, row.setting, score, cell(row.tokens, 1), delta);
    }
    out
}

fn csv_field(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("task,setting,score,score_std,tokens,delta_tokens\n");
    let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&row.task),
            csv_field(&row.setting),
            num(row.score),
            num(row.score_std),
            num(row.tokens),
            num(row.delta_tokens)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        // Enumerate every subsequence of the shorter side.
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let is_subseq = |s: &[u8]| {
            let mut it = long.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..(1 << short.len()))
            .filter_map(|mask| {
                let sub: Vec<u8> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i]).collect();
                is_subseq(&sub).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn rouge_examples() {
        let same = rouge_l("the cat sat", "the cat sat");
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_l("", "any reference"), RougeScore::ZERO);
        let s = rouge_l("police killed the gunman", "police kill the gunman");
        assert!((s.precision - 0.75).abs() < 1e-12 && (s.recall - 0.75).abs() < 1e-12 && (s.f1 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rouge_tokenization_ignores_case_and_punctuation() {
        assert_eq!(rouge_tokens("Two decayed-turnips, an OLD brush!"), ["two", "decayed", "turnips", "an", "old", "brush"]);
        assert_eq!(rouge_l("Kansas City.", "kansas city").f1, 1.0);
    }

    #[test]
    fn rouge_max_over_golds() {
        let golds = vec!["new york".to_string(), "kansas city missouri".to_string()];
        assert!((rouge_l_max("kansas city", &golds).f1 - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_max("x", &[]), RougeScore::ZERO);
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length::<u8>(&[], &[1, 2]), 0);
        assert_eq!(lcs_length(&[1, 2, 3], &[1, 2, 3]), 3);
        assert_eq!(lcs_length(b"ABCBDAB", b"BDCABA"), 4);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(round_to(delta_tokens(345.5, 94.3).unwrap(), 1), -72.7);
        assert_eq!(round_to(delta_tokens(237.5, 146.2).unwrap(), 1), -38.4);
        assert_eq!(delta_tokens(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(delta_tokens(0.0, 5.0), Err(MetricsError::ZeroBaseline(0.0)));
        assert!(delta_tokens(f64::NAN, 5.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_runs(&[0.5]).unwrap(), RunAggregate { mean: 0.5, std: 0.0, n: 1 });
        let a = aggregate_runs(&[0.4, 0.5, 0.6]).unwrap();
        assert!((a.mean - 0.5).abs() < 1e-12 && (a.std - 0.1).abs() < 1e-12);
        assert_eq!(aggregate_runs(&[1.0, 1.0, 1.0]).unwrap().std, 0.0);
        assert_eq!(aggregate_runs(&[]), Err(MetricsError::EmptyInput));
    }

    fn labels(text: &str) -> Vec<FormatLabel> {
        classify_format(text).into_iter().collect()
    }

    #[test]
    fn classifier_examples() {
        assert!(classify_format("| House | Pet |\n|---|---|\n| 1 | cat |").contains(&FormatLabel::MarkdownTable));
        assert!(classify_format("1. flip\n2. flip again").contains(&FormatLabel::OrderedList));
        assert_eq!(labels("The coin was flipped twice, so it lands where it started."), [FormatLabel::NaturalLanguage]);
    }

    #[test]
    fn classifier_json_versus_code() {
        let fenced_json = "```json\n{\"step\": 1, \"state\": \"heads\"}\n```";
        assert_eq!(labels(fenced_json), [FormatLabel::Json]);
        let code = "```python\nstate = 'heads'\nfor _ in range(2):\n    state = flip(state)\n```";
        assert_eq!(labels(code), [FormatLabel::CodeOrPseudocode]);
        assert_eq!(labels("Result: {\"a\": [1, 2]} done"), [FormatLabel::Json]);
        assert_eq!(labels("a set {not json} here"), [FormatLabel::NaturalLanguage]);
    }

    #[test]
    fn classifier_lists_and_logic() {
        let nested = "- people\n  - Alice\n  - Bob\n- pets";
        let got = classify_format(nested);
        assert!(got.contains(&FormatLabel::UnorderedList) && got.contains(&FormatLabel::MultiLevelList));
        assert!(!classify_format("- a\n- b").contains(&FormatLabel::MultiLevelList));
        assert!(classify_format("(A ∧ B) ∨ ¬C").contains(&FormatLabel::LogicalExpression));
        assert!(classify_format("Alice AND Bob").contains(&FormatLabel::LogicalExpression));
        assert!(!classify_format("Alice and Bob went home").contains(&FormatLabel::LogicalExpression));
        assert!(classify_format("x = 3 + 4").contains(&FormatLabel::MathEquation));
        assert!(classify_format("total = 2*5 = 10").contains(&FormatLabel::MathEquation));
        assert!(!classify_format("a == b").contains(&FormatLabel::MathEquation));
    }

    #[test]
    fn markdown_and_csv_reports() {
        let rows = vec![
            ReportRow { task: "hotpot_qa".into(), setting: "nl".into(), score: Some(0.5), score_std: None, tokens: Some(345.5), delta_tokens: None },
            ReportRow {
                task: "hotpot_qa".into(),
                setting: "autoform".into(),
                score: Some(0.523),
                score_std: None,
                tokens: Some(94.3),
                delta_tokens: Some(delta_tokens(345.5, 94.3).unwrap()),
            },
        ];
        let md = render_markdown(&rows, "RougeL");
        assert!(md.starts_with("| Task | Setting | RougeL | # Tokens | ΔTokens |"));
        assert!(md.contains("| hotpot_qa | autoform | 0.52 | 94.3 | -72.7% |"));
        assert!(md.contains("| hotpot_qa | nl | 0.50 | 345.5 | - |"));
        let csv = render_csv(&rows);
        assert!(csv.lines().nth(2).unwrap().starts_with("hotpot_qa,autoform,0.523,,94.3,-72.7062228"));
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in prop::collection::vec(0u8..4, 0..=12), b in prop::collection::vec(0u8..4, 0..=12)) {
            let l = lcs_length(&a, &b);
            prop_assert_eq!(l, brute_lcs(&a, &b));
            prop_assert_eq!(l, lcs_length(&b, &a));
            prop_assert!(l <= a.len().min(b.len()));
        }

        #[test]
        fn lcs_deletion_bounds(a in prop::collection::vec(0u8..4, 1..20), b in prop::collection::vec(0u8..4, 0..20), idx in any::<prop::sample::Index>()) {
            let full = lcs_length(&a, &b);
            let mut shorter = a.clone();
            shorter.remove(idx.index(a.len()));
            let l = lcs_length(&shorter, &b);
            prop_assert!(l <= full && l + 1 >= full);
        }

        #[test]
        fn rouge_identity_and_symmetry(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
            let ab = rouge_l(&a, &b);
            let ba = rouge_l(&b, &a);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
            prop_assert!((ab.precision - ba.recall).abs() < 1e-12);
            for v in [ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !rouge_tokens(&a).is_empty() {
                prop_assert_eq!(rouge_l(&a, &a).f1, 1.0);
            }
        }

        #[test]
        fn delta_sign(b in 0.1f64..1e4, t in 0.0f64..1e4) {
            let d = delta_tokens(b, t).unwrap();
            prop_assert_eq!(delta_tokens(b, b).unwrap(), 0.0);
            prop_assert_eq!(d.partial_cmp(&0.0), (t - b).partial_cmp(&0.0));
        }

        #[test]
        fn aggregate_bounds(values in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let a = aggregate_runs(&values).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.std >= 0.0 && a.mean >= lo - 1e-12 && a.mean <= hi + 1e-12);
            prop_assert_eq!(a.n, values.len());
        }

        #[test]
        fn classifier_never_empty(text in "\\PC{0,200}") {
            prop_assert!(!classify_format(&text).is_empty());
        }
    }
}
