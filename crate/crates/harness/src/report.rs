//! Markdown and SVG summaries of everything under a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use comchain::chain::{lta_check, read_metrics, BaselineRun, ChainState, STATE_FILE};
use comchain::complexity::{chain_report, RunCost};
use comchain::train::MetricsRow;

use crate::svg::{line_chart, Series};

/// Files under `dir`, recursively, in sorted order.
pub fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)
            .with_context(|| format!("listing {}", d.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn rel(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

#[derive(Debug)]
pub struct Report {
    pub markdown: PathBuf,
    pub charts: Vec<PathBuf>,
}

/// Writes `report.md` and its charts into `dir`.
pub fn emit_report(dir: &Path, threshold: f64) -> Result<Report> {
    let files = walk(dir)?;
    let metric_files: Vec<&PathBuf> = files
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    if metric_files.is_empty() {
        bail!(
            "no metrics under {}; expected <run>/metrics/<run_id>.jsonl files written by \
             train-baseline, train-chain or sweep",
            dir.display()
        );
    }
    let mut runs: BTreeMap<String, (PathBuf, Vec<MetricsRow>)> = BTreeMap::new();
    for f in &metric_files {
        let rows = read_metrics(f)?;
        if let Some(first) = rows.first() {
            let key = format!("{} ({})", first.run_id, rel(dir, f.parent().unwrap_or(dir)));
            runs.insert(key, ((*f).clone(), rows));
        }
    }
    let mut chains = Vec::new();
    let mut baselines: Vec<BaselineRun> = Vec::new();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == STATE_FILE {
            let text = fs::read_to_string(f)?;
            chains.push((f.clone(), serde_json::from_str::<ChainState>(&text)?));
        } else if name.starts_with("baseline-") && name.ends_with(".json") {
            if let Ok(b) = serde_json::from_str::<BaselineRun>(&fs::read_to_string(f)?) {
                baselines.push(b);
            }
        }
    }

    let mut md = String::from("# Run report\n\n## Runs\n\n");
    md += "| run | model | epochs | final l_task | final l_ifd | final R@1 | MACs |\n|---|---|---:|---:|---:|---:|---:|\n";
    for (key, (_, rows)) in &runs {
        let last = rows.last().expect("non-empty");
        let r1 = rows.iter().rev().find_map(|r| r.eval_r1);
        let _ = writeln!(
            md,
            "| {key} | {} | {} | {:.4} | {:.4} | {} | {:.4e} |",
            last.model,
            last.epoch,
            last.l_task,
            last.l_ifd,
            r1.map_or("n/a".into(), |v| format!("{v:.2}")),
            last.cumulative_macs
        );
    }

    // Longest baseline per model is the reference.
    let mut best: BTreeMap<String, &BaselineRun> = BTreeMap::new();
    for b in &baselines {
        let e = best.entry(b.model.clone()).or_insert(b);
        if b.epochs > e.epochs {
            *e = b;
        }
    }
    for (path, state) in &chains {
        let _ = writeln!(md, "\n## Chain `{}`\n", rel(dir, path.parent().unwrap_or(dir)));
        let epochs: Vec<String> = state.runs.iter().map(|r| format!("{}×{}", r.model, r.epochs)).collect();
        let _ = writeln!(md, "Schedule: {}\n", epochs.join(" → "));
        let base: Option<Vec<RunCost>> = state
            .runs
            .iter()
            .map(|r| best.get(&r.model).map(|b| RunCost { model: b.model.clone(), macs: b.macs }))
            .collect();
        match base {
            Some(base) if !base.is_empty() => {
                let report = chain_report(&state.costs(), &base)?;
                md += "### Cost (GMACs)\n\n";
                md += &report.table(1e9, "GMACs");
                md += "\n### Lossless-acceleration checks\n\n| model | chain R@1 | baseline R@1 | gap | threshold | verdict |\n|---|---:|---:|---:|---:|---|\n";
                for r in state.runs.iter().skip(1) {
                    let (Some(c), Some(b)) = (r.final_eval, best[&r.model].final_eval) else {
                        continue;
                    };
                    let v = lta_check(c.r1(), b.r1(), threshold);
                    let _ = writeln!(
                        md,
                        "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |",
                        r.model,
                        v.candidate,
                        v.baseline,
                        v.gap(),
                        v.threshold,
                        if v.pass { "pass" } else { "fail" }
                    );
                }
            }
            _ => md += "No baseline runs for every chain model; cost and lossless checks skipped.\n",
        }
    }

    let series = |f: &dyn Fn(&MetricsRow) -> Option<(f64, f64)>| -> Vec<Series> {
        runs.iter()
            .map(|(k, (_, rows))| Series { label: k.split(' ').next().unwrap_or(k).to_string(), points: rows.iter().filter_map(f).collect() })
            .collect()
    };
    let charts = [
        ("loss.svg", "Training loss", "epoch", "l_total", series(&|r| Some((r.epoch as f64, r.l_total)))),
        ("accuracy_epochs.svg", "Retrieval R@1", "epoch", "R@1 (%)", series(&|r| r.eval_r1.map(|a| (r.epoch as f64, a)))),
        ("accuracy_macs.svg", "R@1 against cost", "cumulative MACs", "R@1 (%)", series(&|r| r.eval_r1.map(|a| (r.cumulative_macs, a)))),
    ];
    let mut written = Vec::new();
    md += "\n## Charts\n\n";
    for (file, title, x, y, s) in charts {
        let path = dir.join(file);
        fs::write(&path, line_chart(title, x, y, &s)).with_context(|| format!("writing {}", path.display()))?;
        let _ = writeln!(md, "![{title}]({file})");
        written.push(path);
    }
    let markdown = dir.join("report.md");
    fs::write(&markdown, md).with_context(|| format!("writing {}", markdown.display()))?;
    Ok(Report { markdown, charts: written })
}
