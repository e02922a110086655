use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use formbench_core::metrics::{delta_tokens, render_csv, render_markdown, ReportRow};
use formbench_core::prompting::Strategy;

use crate::run::{read_manifest, read_report, RunKind, RunReport};

pub struct Consolidated {
    pub markdown: String,
    pub csv: String,
    pub warnings: Vec<String>,
}

/// Baseline for ΔTokens within a report: the natural-language dialogue run
/// of the same task and backend pair.
fn delta_against_nl(report: &RunReport, all: &[RunReport]) -> Option<f64> {
    if report.kind != RunKind::Dialogue || report.strategy == Strategy::DialogueNl {
        return report.delta_tokens;
    }
    let base = all.iter().find(|r| {
        r.kind == RunKind::Dialogue && r.strategy == Strategy::DialogueNl && r.task == report.task && r.backend_pair == report.backend_pair
    });
    match (base.and_then(|b| b.mean_completion_tokens), report.mean_completion_tokens) {
        (Some(b), Some(t)) => delta_tokens(b, t).ok(),
        _ => report.delta_tokens,
    }
}

pub fn consolidate(dirs: &[PathBuf]) -> Result<Consolidated> {
    let mut reports = Vec::new();
    for dir in dirs {
        read_manifest(dir)?;
        reports.push(read_report(dir).with_context(|| format!("run {} has no report", dir.display()))?);
    }
    reports.sort_by(|a, b| (a.task, a.strategy, &a.backend_pair).cmp(&(b.task, b.strategy, &b.backend_pair)));
    let mut warnings = Vec::new();
    let tasks: BTreeSet<String> = reports.iter().map(|r| r.task.to_string()).collect();
    if tasks.len() > 1 {
        warnings.push(format!("MixedTasks: reports cover several tasks ({})", tasks.into_iter().collect::<Vec<_>>().join(", ")));
    }
    for r in reports.iter().filter(|r| !r.complete) {
        warnings.push(format!("incomplete run: {} {} ({} failure(s))", r.task, r.strategy, r.failures.len()));
    }
    let mut markdown = String::new();
    let mut all_rows = Vec::new();
    for kind in [RunKind::Reason, RunKind::Dialogue] {
        let rows: Vec<ReportRow> = reports
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| ReportRow { delta_tokens: delta_against_nl(r, &reports), ..r.row() })
            .collect();
        if rows.is_empty() {
            continue;
        }
        if !markdown.is_empty() {
            markdown.push('\n');
        }
        let header = if kind == RunKind::Reason { "Accuracy" } else { "RougeL" };
        markdown.push_str(&render_markdown(&rows, header));
        all_rows.extend(rows);
    }
    Ok(Consolidated { markdown, csv: render_csv(&all_rows), warnings })
}

pub fn write(consolidated: &Consolidated, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.md"), &consolidated.markdown)?;
    std::fs::write(out.join("report.csv"), &consolidated.csv)?;
    Ok(())
}
