//! Aggregates every `results.csv` below a directory into a text table.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rankcp::pipeline::{read_results_csv, summarize, SummaryRow};

/// All `results.csv` files under `root`, sorted by path.
pub fn find_results(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).with_context(|| format!("cannot read {}", dir.display()))?;
        for entry in entries {
            let path = entry.with_context(|| format!("cannot read {}", dir.display()))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "results.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// `0.955(.005)` style cell.
pub fn mean_sd_cell(mean: f64, sd: f64) -> String {
    let sd = format!("{sd:.3}");
    let sd = sd.strip_prefix('0').unwrap_or(&sd);
    format!("{mean:.3}({sd})")
}

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub source: String,
    pub summary: SummaryRow,
    pub covered: bool,
    pub closest: bool,
}

/// Summaries of every results file; `closest` marks, per alpha, the row whose
/// mean coverage is nearest to `1 - alpha`.
pub fn collect(root: &Path) -> Result<Vec<ReportRow>> {
    let files = find_results(root)?;
    if files.is_empty() {
        bail!("no results.csv found under {}", root.display());
    }
    let mut rows = Vec::new();
    for file in &files {
        let records = read_results_csv(file).with_context(|| format!("cannot load {}", file.display()))?;
        let source = file
            .parent()
            .and_then(|p| p.strip_prefix(root).ok())
            .map(|p| p.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        for summary in summarize(&records) {
            let covered = summary.coverage_mean >= 1.0 - summary.alpha - 1e-12;
            rows.push(ReportRow {
                source: source.clone(),
                summary,
                covered,
                closest: false,
            });
        }
    }
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.summary.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    for a in alphas {
        let gap = |r: &ReportRow| (r.summary.coverage_mean - (1.0 - a)).abs();
        let closest = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.summary.alpha == a)
            .min_by(|x, y| gap(x.1).total_cmp(&gap(y.1)))
            .map(|(i, _)| i);
        if let Some(i) = closest {
            rows[i].closest = true;
        }
    }
    Ok(rows)
}

pub fn render(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.source.len()).max().unwrap_or(0).max("source".len());
    let mut out = format!(
        "{:<width$}  {:<5}  {:>6}  {:>4}  {:<14}  {:<14}\n",
        "source", "score", "alpha", "runs", "coverage", "ineff"
    );
    for r in rows {
        let s = &r.summary;
        let mark = format!("{}{}", if r.covered { "*" } else { "" }, if r.closest { "^" } else { "" });
        out.push_str(&format!(
            "{:<width$}  {:<5}  {:>6}  {:>4}  {:<14}  {:<14}\n",
            r.source,
            s.score.to_string(),
            format!("{:.3}", s.alpha),
            s.n_runs,
            format!("{}{mark}", mean_sd_cell(s.coverage_mean, s.coverage_sd)),
            mean_sd_cell(s.ineff_mean, s.ineff_sd),
        ));
    }
    out.push_str("* coverage mean at or above 1 - alpha; ^ coverage mean closest to 1 - alpha\n");
    out
}
