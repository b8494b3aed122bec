use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_file, write_json};
use crate::error::{ensure, Error, Result};
use crate::train::Method;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub metrics: BTreeMap<String, Stat>,
}

/// Aggregated results, methods × datasets, in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub methods: Vec<String>,
    pub datasets: Vec<String>,
    pub entries: Vec<ReportEntry>,
}

#[derive(Deserialize)]
struct ResultFile {
    split: String,
    rows: Vec<serde_json::Value>,
    mean: BTreeMap<String, f64>,
    sd: BTreeMap<String, f64>,
}

fn method_rank(name: &str) -> (usize, String) {
    let idx = Method::ALL.iter().position(|m| m.as_str() == name).unwrap_or(Method::ALL.len());
    (idx, name.to_string())
}

impl ReportTable {
    /// Collects every test-split result file in `results_dir`.
    pub fn from_dir(results_dir: &Path) -> Result<Self> {
        let listing = fs::read_dir(results_dir).map_err(|e| Error::io(results_dir, e))?;
        let mut paths: Vec<_> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut entries = Vec::new();
        for path in paths {
            let s = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: ResultFile = match serde_json::from_str(&s) {
                Ok(f) => f,
                Err(_) => continue,
            };
            if file.split != "test" || file.rows.is_empty() {
                continue;
            }
            let first = &file.rows[0];
            let field = |k: &str| first.get(k).and_then(|v| v.as_str()).unwrap_or("?").to_string();
            entries.push(ReportEntry {
                method: field("method"),
                dataset: field("dataset"),
                n: file.rows.len(),
                metrics: file
                    .mean
                    .iter()
                    .map(|(k, &mean)| (k.clone(), Stat { mean, sd: file.sd.get(k).copied().unwrap_or(0.0) }))
                    .collect(),
            });
        }
        ensure!(
            !entries.is_empty(),
            Empty,
            "no result files in {}; run `balcal eval` first",
            results_dir.display()
        );
        Ok(Self::from_entries(entries))
    }

    pub fn from_entries(mut entries: Vec<ReportEntry>) -> Self {
        entries.sort_by(|a, b| (method_rank(&a.method), &a.dataset).cmp(&(method_rank(&b.method), &b.dataset)));
        let mut methods: Vec<String> = Vec::new();
        for e in &entries {
            if !methods.contains(&e.method) {
                methods.push(e.method.clone());
            }
        }
        let mut datasets: Vec<String> = entries.iter().map(|e| e.dataset.clone()).collect();
        datasets.sort();
        datasets.dedup();
        Self {
            methods,
            datasets,
            entries,
        }
    }

    pub fn get(&self, method: &str, dataset: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.method == method && e.dataset == dataset)
    }
}

const COLUMNS: [(&str, &str, Option<&str>); 3] = [("ACC", "acc", Some("ts_acc")), ("ECE", "ece", Some("ts_ece")), ("AECE", "aece", Some("ts_aece"))];

/// Percent with two decimals.
fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn cell(entry: Option<&ReportEntry>, key: &str, ts_key: Option<&str>) -> String {
    let Some(stat) = entry.and_then(|e| e.metrics.get(key)) else {
        return "-".into();
    };
    let mut s = format!("{} ± {}", pct(stat.mean), pct(stat.sd));
    if let Some(ts) = ts_key.and_then(|k| entry.and_then(|e| e.metrics.get(k))) {
        s.push_str(&format!(" ({})", pct(ts.mean)));
    }
    s
}

/// Methods as rows, `dataset ACC/ECE/AECE` as columns, values ×100 as
/// `mean ± sd`, post-hoc values in parentheses, `-` where missing.
pub fn render_markdown(table: &ReportTable) -> String {
    let mut header = vec!["Method".to_string()];
    for d in &table.datasets {
        for (label, _, _) in COLUMNS {
            header.push(format!("{d} {label}"));
        }
    }
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for m in &table.methods {
        let mut row = vec![m.clone()];
        for d in &table.datasets {
            let e = table.get(m, d);
            for (_, key, ts) in COLUMNS {
                row.push(cell(e, key, ts));
            }
        }
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// Reads `<out>/results`, writes `<out>/report.md` and `<out>/report.json`.
pub fn cmd_report(out_dir: &Path) -> Result<ReportTable> {
    let table = ReportTable::from_dir(&out_dir.join("results"))?;
    write_file(&out_dir.join("report.md"), render_markdown(&table).as_bytes())?;
    write_json(&out_dir.join("report.json"), &table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(method: &str, dataset: &str, ece: Option<f64>) -> ReportEntry {
        let mut metrics = BTreeMap::new();
        metrics.insert("acc".into(), Stat { mean: 0.91234, sd: 0.01 });
        if let Some(e) = ece {
            metrics.insert("ece".into(), Stat { mean: e, sd: 0.0 });
        }
        ReportEntry {
            method: method.into(),
            dataset: dataset.into(),
            n: 1,
            metrics,
        }
    }

    #[test]
    fn single_run_single_row() {
        let t = ReportTable::from_entries(vec![entry("balcal", "blobs10", Some(0.0123))]);
        let md = render_markdown(&t);
        let lines: Vec<_> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "| balcal | 91.23 ± 1.00 | 1.23 ± 0.00 | - |");
    }

    #[test]
    fn ordering_is_fixed_and_missing_cells_dash() {
        let a = vec![
            entry("balcal", "blobs10", Some(0.01)),
            entry("vanilla", "blobs100", None),
            entry("vanilla", "blobs10", Some(0.05)),
        ];
        let mut b = a.clone();
        b.reverse();
        let (ta, tb) = (ReportTable::from_entries(a), ReportTable::from_entries(b));
        assert_eq!(render_markdown(&ta), render_markdown(&tb));
        assert_eq!(ta.methods, vec!["vanilla", "balcal"]);
        assert_eq!(ta.datasets, vec!["blobs10", "blobs100"]);
        let md = render_markdown(&ta);
        let balcal = md.lines().find(|l| l.starts_with("| balcal")).unwrap();
        assert!(balcal.ends_with("| - | - | - |"));
    }

    #[test]
    fn posthoc_in_parentheses() {
        let mut e = entry("vanilla", "blobs10", Some(0.05));
        e.metrics.insert("ts_ece".into(), Stat { mean: 0.02, sd: 0.0 });
        let md = render_markdown(&ReportTable::from_entries(vec![e]));
        assert!(md.contains("5.00 ± 0.00 (2.00)"));
    }
}
