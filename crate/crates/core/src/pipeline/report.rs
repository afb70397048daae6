use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{Condition, EvalReport, TaskKind};

/// Mean accuracy over one seed's reports for a condition and task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: Condition,
    pub task: TaskKind,
    pub seed: u64,
    pub accuracy: f64,
    pub n_reports: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: Condition,
    pub task: TaskKind,
    pub n_seeds: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
}

/// Seed directories under `dir`: the directory itself when it holds an
/// `eval/` folder, else its `seed-*` children.
fn seed_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("eval").is_dir() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_seed = p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("seed-"));
        if is_seed && p.join("eval").is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn manifest_near(seed_dir: &Path) -> Option<RunManifest> {
    [Some(seed_dir), seed_dir.parent()]
        .into_iter()
        .flatten()
        .find(|d| d.join(MANIFEST_FILE).exists())
        .and_then(|d| RunManifest::load(d).ok())
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn config_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", a, &mut fa);
    flatten("", b, &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "<unset>".into());
            format!("{k}: {} vs {}", show(&fa), show(&fb))
        })
        .collect()
}

fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    let eval = dir.join("eval");
    let mut tasks: Vec<PathBuf> = std::fs::read_dir(&eval)
        .map_err(|e| Error::io(&eval, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    tasks.sort();
    for t in tasks {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&t)
            .map_err(|e| Error::io(&t, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            out.push(serde_json::from_str(&text)?);
        }
    }
    Ok(out)
}

/// Consolidates the evaluation reports under `dirs` into per-seed rows and
/// mean/std summaries, written as CSV and JSON into `out`. Runs with
/// different configuration digests or tool versions are refused.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut seeds = Vec::new();
    for d in dirs {
        let found = seed_dirs(d)?;
        if found.is_empty() {
            return Err(Error::MissingArtifact {
                path: d.join("eval"),
                producer: "eval".into(),
            });
        }
        seeds.extend(found);
    }
    let mut digest: Option<(String, PathBuf, Option<RunManifest>)> = None;
    let mut cells: BTreeMap<(Condition, TaskKind, u64), Vec<f64>> = BTreeMap::new();
    for dir in &seeds {
        let manifest = manifest_near(dir);
        let reports = load_reports(dir)?;
        for r in &reports {
            match &digest {
                None => digest = Some((r.config_digest.clone(), dir.clone(), manifest.clone())),
                Some((d, first, m0)) if *d != r.config_digest => {
                    let diff = match (m0, &manifest) {
                        (Some(a), Some(b)) => config_diff(&a.effective_config, &b.effective_config).join("; "),
                        _ => "effective configs unavailable".into(),
                    };
                    return Err(Error::Config(format!(
                        "config digests differ: {} ({d}) vs {} ({}); differences: {diff}",
                        first.display(),
                        dir.display(),
                        r.config_digest
                    )));
                }
                Some((_, first, Some(m0))) => {
                    if let Some(m) = &manifest {
                        if m.tool_version != m0.tool_version {
                            return Err(Error::Config(format!(
                                "schema versions differ: {} ({}) vs {} ({})",
                                first.display(),
                                m0.tool_version,
                                dir.display(),
                                m.tool_version
                            )));
                        }
                    }
                }
                Some(_) => {}
            }
            cells.entry((r.condition, r.task, r.seed)).or_default().push(r.accuracy);
        }
    }
    let rows: Vec<ReportRow> = cells
        .iter()
        .map(|(&(condition, task, seed), v)| ReportRow {
            condition,
            task,
            seed,
            accuracy: v.iter().sum::<f64>() / v.len() as f64,
            n_reports: v.len(),
        })
        .collect();
    let mut per: BTreeMap<(Condition, TaskKind), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        per.entry((r.condition, r.task)).or_default().push(r.accuracy);
    }
    let summary = per
        .into_iter()
        .map(|((condition, task), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                condition,
                task,
                n_seeds: n,
                mean,
                std,
            }
        })
        .collect();
    let report = Report {
        config_digest: digest.map(|d| d.0).unwrap_or_default(),
        rows,
        summary,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(out.join("report_seeds.csv"))?;
    w.write_record(["condition", "task", "seed", "accuracy", "n_reports"])?;
    for r in &report.rows {
        w.write_record([
            r.condition.name(),
            r.task.name(),
            &r.seed.to_string(),
            &format!("{:.6}", r.accuracy),
            &r.n_reports.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record(["condition", "task", "n_seeds", "mean", "std"])?;
    for s in &report.summary {
        w.write_record([
            s.condition.name(),
            s.task.name(),
            &s.n_seeds.to_string(),
            &format!("{:.6}", s.mean),
            &format!("{:.6}", s.std),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let path = out.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
