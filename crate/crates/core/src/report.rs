//! Summary tables over evaluation records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{mean, EvalRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub compressor: String,
    pub keep_ratio: f64,
    /// Mean accuracy over seeds, per task; `None` where the task was not run.
    pub cells: Vec<Option<f64>>,
    /// Unweighted mean over the tasks present in this row.
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub tasks: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::Data("no evaluation records to summarize".into()));
    }
    let tasks: Vec<String> = records
        .iter()
        .map(|r| r.task.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    // keyed by compressor then ratio, descending ratio via the negated bits
    let mut groups: BTreeMap<(String, i64), BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let key = (r.compressor.clone(), -(r.keep_ratio * 1e6).round() as i64);
        groups
            .entry(key)
            .or_default()
            .entry(&r.task)
            .or_default()
            .push(r.accuracy);
    }
    let rows = groups
        .into_iter()
        .map(|((compressor, neg_ratio), by_task)| {
            let cells: Vec<Option<f64>> = tasks
                .iter()
                .map(|t| by_task.get(t.as_str()).map(|v| mean(v.iter().copied())))
                .collect();
            let avg = mean(cells.iter().flatten().copied());
            SummaryRow {
                compressor,
                keep_ratio: -neg_ratio as f64 / 1e6,
                cells,
                avg,
            }
        })
        .collect();
    Ok(Summary { tasks, rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Ratio |");
        for t in &self.tasks {
            out.push_str(&format!(" {t} |"));
        }
        out.push_str(" AVG |\n|---|---|");
        out.push_str(&"---|".repeat(self.tasks.len() + 1));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} | {} |", r.compressor, r.keep_ratio));
            for c in &r.cells {
                out.push_str(&format!(" {} |", pct(*c)));
            }
            out.push_str(&format!(" {} |\n", pct(Some(r.avg))));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,ratio");
        for t in &self.tasks {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",AVG\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.compressor, r.keep_ratio));
            for c in &r.cells {
                out.push(',');
                if let Some(v) = c {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push_str(&format!(",{:.6}\n", r.avg));
        }
        out
    }
}

/// Reads every `*.json` (array of records) and `*.jsonl` (one record per
/// line) file in `dir`, in file-name order.
pub fn load_records(dir: &Path) -> Result<Vec<EvalRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        if p.extension().is_some_and(|e| e == "jsonl") {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                out.push(serde_json::from_str(line)?);
            }
        } else if let Ok(recs) = serde_json::from_str::<Vec<EvalRecord>>(&text) {
            out.extend(recs);
        }
    }
    Ok(out)
}
