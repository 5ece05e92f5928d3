//! Markdown summary of run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ldr::metrics::MetricsReport;

use crate::run::Manifest;
use crate::CliError;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub metrics: MetricsReport,
}

fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Finds run directories (those holding a manifest) at or below `root`.
fn collect(root: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if root.join("manifest.json").is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if depth == 0 || !root.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        collect(&e, depth - 1, out)?;
    }
    Ok(())
}

/// Loads every successful run with a metrics file.
pub fn load_runs(roots: &[PathBuf]) -> Result<Vec<RunSummary>, CliError> {
    let mut dirs = Vec::new();
    for r in roots {
        if !r.exists() {
            return Err(CliError::config(format!("{} does not exist", r.display())));
        }
        collect(r, 3, &mut dirs)?;
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        let metrics_path = dir.join("metrics.json");
        if manifest.status != "ok" || !metrics_path.is_file() {
            continue;
        }
        runs.push(RunSummary {
            label: manifest.name.clone().unwrap_or(manifest.command.clone()),
            metrics: read_json(&metrics_path)?,
        });
    }
    Ok(runs)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn cell(v: &[f64], digits: usize) -> String {
    if v.is_empty() {
        return "n/a".into();
    }
    let (m, s) = mean_std(v);
    format!("{m:.digits$} ± {s:.digits$}")
}

/// Groups runs by name; one row per group with mean ± sample std over seeds.
/// ESS is reported in percent.
pub fn markdown_table(runs: &[RunSummary]) -> String {
    let mut groups: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in runs {
        groups.entry(&r.label).or_default().push(&r.metrics);
    }
    let mut s = String::new();
    s.push_str("| run | seeds | NLL | ESS (%) | hist KL | energy W2 |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|\n");
    for (label, ms) in groups {
        let nll: Vec<f64> = ms.iter().map(|m| m.nll).collect();
        let ess: Vec<f64> = ms.iter().map(|m| 100.0 * m.ess).collect();
        let kl: Vec<f64> = ms.iter().filter_map(|m| m.hist_kl).collect();
        let w2: Vec<f64> = ms.iter().map(|m| m.energy_w2).collect();
        let _ = writeln!(
            s,
            "| {label} | {} | {} | {} | {} | {} |",
            ms.len(),
            cell(&nll, 3),
            cell(&ess, 2),
            cell(&kl, 4),
            cell(&w2, 3)
        );
    }
    s
}

pub fn cmd_report(roots: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let runs = load_runs(roots)?;
    if runs.is_empty() {
        return Err(CliError::config("no completed runs with metrics found"));
    }
    let table = markdown_table(&runs);
    match out {
        Some(p) => fs::write(p, &table).map_err(|e| CliError::io(p, e)),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
