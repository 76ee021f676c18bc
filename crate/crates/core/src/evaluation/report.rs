//! Run reports and their aggregated CSV and Markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{secondary_name, Metrics};
use crate::config::{Ablation, Config};
use crate::data::Task;
use crate::error::{CompError, Result};
use crate::training::EpochLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    /// Rate recorded with the mask (after any capping).
    pub mr: f64,
    /// Fraction of missing cells actually in the mask.
    pub realized_mr: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub label: String,
    pub task: Task,
    pub metrics: Metrics,
    /// Test accuracy of each modality head after stage two.
    pub per_modality_acc: BTreeMap<String, f64>,
    /// Test accuracy of each modality head after stage one.
    pub stage1_modality_acc: BTreeMap<String, f64>,
    /// Mean coordinator weight per modality over the evaluation rows; absent
    /// when the coordinator is disabled.
    pub coordinator_weight_means: Option<[f64; 3]>,
    pub epoch_curves: Vec<EpochLog>,
    pub config: Config,
}

impl RunReport {
    /// Copy with wall-clock times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epoch_curves {
            e.wall_time = 0.0;
        }
        out
    }

    pub fn file_stem(&self) -> String {
        format!("{}_mr{:.2}_seed{}", self.label.replace('+', "-"), self.config.mr, self.seed)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| CompError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CompError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One CSV row: a single seed, or the mean over seeds (`seed` = "mean").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    /// Nominal missing rate requested for the run.
    pub mr: f64,
    pub seed: String,
    pub acc: f64,
    pub ua: f64,
    pub f1: f64,
    pub acc_a: f64,
    pub acc_t: f64,
    pub acc_v: f64,
}

fn row_of(label: &str, mr: f64, seed: String, reports: &[&RunReport]) -> AggregateRow {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&RunReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let modality = |m: &'static str| move |r: &RunReport| r.per_modality_acc.get(m).copied().unwrap_or(0.0);
    AggregateRow {
        label: label.to_string(),
        mr,
        seed,
        acc: mean(&|r| r.metrics.acc),
        ua: mean(&|r| r.metrics.ua),
        f1: mean(&|r| r.metrics.f1),
        acc_a: mean(&modality("a")),
        acc_t: mean(&modality("t")),
        acc_v: mean(&modality("v")),
    }
}

/// Per-seed rows followed by a mean row for every `(label, mr)` group, in
/// first-seen order.
pub fn aggregate(reports: &[RunReport]) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, String), Vec<&RunReport>)> = Vec::new();
    for r in reports {
        let key = (r.label.clone(), format!("{:.6}", r.config.mr));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    let mut out = Vec::new();
    for ((label, _), rs) in &groups {
        let mr = rs[0].config.mr;
        for r in rs {
            out.push(row_of(label, mr, r.seed.to_string(), &[*r]));
        }
        out.push(row_of(label, mr, "mean".into(), rs));
    }
    out
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CompError::io(path, e))
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

/// Table with one line per component configuration and one column per
/// missing rate; each cell is `ACC(%)/UA(%)` (or `ACC(%)/F1(%)` for
/// regression) of the mean over seeds.
pub fn markdown_table(reports: &[RunReport]) -> String {
    let task = reports.first().map_or(Task::Classification, |r| r.task);
    let second = secondary_name(task);
    let rows = aggregate(reports);
    let means: Vec<&AggregateRow> = rows.iter().filter(|r| r.seed == "mean").collect();
    let mut mrs: Vec<f64> = Vec::new();
    let mut labels: Vec<(String, Ablation)> = Vec::new();
    for r in reports {
        if !mrs.iter().any(|&m| (m - r.config.mr).abs() < 1e-9) {
            mrs.push(r.config.mr);
        }
        if !labels.iter().any(|(l, _)| *l == r.label) {
            labels.push((r.label.clone(), r.ablation));
        }
    }
    let mut s = String::new();
    let _ = write!(s, "| KP | PG | Cr | GM |");
    for mr in &mrs {
        let _ = write!(s, " MR {mr:.1} ACC(%)/{second}(%) |");
    }
    s.push('\n');
    s.push_str("|---|---|---|---|");
    for _ in &mrs {
        s.push_str("---|");
    }
    s.push('\n');
    for (label, a) in &labels {
        let _ = write!(s, "| {} | {} | {} | {} |", mark(a.kp), mark(a.pg), mark(a.cr), mark(a.gm));
        for mr in &mrs {
            let cell = means
                .iter()
                .find(|r| r.label == *label && (r.mr - mr).abs() < 1e-9)
                .map(|r| {
                    let sec = if task == Task::Classification { r.ua } else { r.f1 };
                    format!("{:.2}/{:.2}", 100.0 * r.acc, 100.0 * sec)
                })
                .unwrap_or_else(|| "-".into());
            let _ = write!(s, " {cell} |");
        }
        s.push('\n');
    }
    s
}

/// Write every report as JSON under `dir/runs/`, plus `aggregate.csv` and
/// `table.md`. Returns the paths written.
pub fn write_reports(dir: &Path, reports: &[RunReport]) -> Result<Vec<PathBuf>> {
    let runs = dir.join("runs");
    fs::create_dir_all(&runs).map_err(|e| CompError::io(&runs, e))?;
    let mut written = Vec::new();
    for r in reports {
        let p = runs.join(format!("{}.json", r.file_stem()));
        r.write_json(&p)?;
        written.push(p);
    }
    let csv_path = dir.join("aggregate.csv");
    write_aggregate_csv(&csv_path, &aggregate(reports))?;
    written.push(csv_path);
    let md = dir.join("table.md");
    fs::write(&md, markdown_table(reports)).map_err(|e| CompError::io(&md, e))?;
    written.push(md);
    Ok(written)
}

/// Load every `*.json` report under `dir/runs` (or `dir` itself), sorted by
/// file name.
pub fn read_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let base = if dir.join("runs").is_dir() { dir.join("runs") } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&base)
        .map_err(|e| CompError::io(&base, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "config.json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| RunReport::read_json(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label_off: &str, mr: f64, seed: u64, acc: f64) -> RunReport {
        let ablation = Ablation::all_on().with_off(label_off).unwrap();
        RunReport {
            dataset: "s".into(),
            mr,
            realized_mr: mr,
            seed,
            ablation,
            label: ablation.label(),
            task: Task::Classification,
            metrics: Metrics { acc, ua: acc, f1: acc },
            per_modality_acc: [("a", 0.5), ("t", 0.5), ("v", 0.5)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            stage1_modality_acc: BTreeMap::new(),
            coordinator_weight_means: None,
            epoch_curves: Vec::new(),
            config: Config {
                mr,
                seed,
                ablation,
                ..Config::default()
            },
        }
    }

    #[test]
    fn aggregate_has_seed_and_mean_rows() {
        let reps = vec![report("", 0.1, 0, 0.8), report("", 0.1, 1, 0.6), report("", 0.3, 0, 0.5)];
        let rows = aggregate(&reps);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[2].seed, "mean");
        assert!((rows[2].acc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let reps = vec![report("", 0.1, 0, 0.8), report("kp,pg,cr,gm", 0.1, 0, 0.5)];
        let t = markdown_table(&reps);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("ACC(%)/UA(%)"));
        assert!(lines[2].contains("80.00/80.00"));
        assert!(lines[3].starts_with("| ✗ | ✗ | ✗ | ✗ |"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let reps = vec![report("", 0.1, 0, 0.8), report("gm", 0.1, 0, 0.7)];
        write_reports(dir.path(), &reps).unwrap();
        let back = read_reports(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(dir.path().join("aggregate.csv").exists());
    }
}
