use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fopro_core::data::Split;
use fopro_core::eval::MetricsReport;
use fopro_core::train::{ExperimentConfig, CONFIG_FILE};

use crate::run::report_path;

/// Metric columns, in table order.
pub const METRICS: [&str; 7] = [
    "balanced_accuracy",
    "accuracy",
    "mcc",
    "macro_f1",
    "head",
    "medium",
    "tail",
];

fn metric(r: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "balanced_accuracy" => Some(r.balanced_accuracy),
        "accuracy" => Some(r.accuracy),
        "mcc" => Some(r.mcc),
        "macro_f1" => Some(r.macro_f1),
        "head" => r.grouped.head,
        "medium" => r.grouped.medium,
        "tail" => r.grouped.tail,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// One experiment: runs whose configs agree up to the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    /// Per metric in `METRICS` order: mean, and sample std when there are
    /// at least two runs. `None` when some run leaves the metric undefined.
    pub stats: Vec<Option<(f64, Option<f64>)>>,
}

impl ComparisonRow {
    pub fn mean(&self, name: &str) -> Option<f64> {
        let i = METRICS.iter().position(|m| *m == name)?;
        self.stats[i].map(|s| s.0)
    }

    pub fn std(&self, name: &str) -> Option<f64> {
        let i = METRICS.iter().position(|m| *m == name)?;
        self.stats[i].and_then(|s| s.1)
    }
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Groups runs by config (seed ignored), sorted by mean balanced accuracy,
/// highest first. All runs must share one class list.
pub fn compare_runs(run_dirs: &[impl AsRef<Path>], split: Split) -> Result<Vec<ComparisonRow>> {
    let mut groups: BTreeMap<String, (String, Vec<MetricsReport>)> = BTreeMap::new();
    let mut classes: Option<(Vec<String>, &Path)> = None;
    for dir in run_dirs {
        let dir = dir.as_ref();
        let mut config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        let path = report_path(dir, split, true);
        let text = fs::read_to_string(&path).with_context(|| {
            format!(
                "reading {}; run `evaluate` on this run first",
                path.display()
            )
        })?;
        let report: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        match &classes {
            Some((names, first)) if *names != report.class_names => bail!(
                "class sets differ: {} has {:?} but {} has {:?}",
                first.display(),
                names,
                dir.display(),
                report.class_names
            ),
            Some(_) => {}
            None => classes = Some((report.class_names.clone(), dir)),
        }
        let label = format!("{}/{}", config.name, config.method.name());
        config.seed = 0;
        groups
            .entry(config.hash())
            .or_insert_with(|| (label, vec![]))
            .1
            .push(report);
    }
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for (label, _) in groups.values() {
        *labels.entry(label.clone()).or_default() += 1;
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(hash, (label, reports))| {
            let label = if labels[&label] > 1 {
                format!("{label}@{}", &hash[..8])
            } else {
                label
            };
            let stats = METRICS
                .iter()
                .map(|m| {
                    let values: Option<Vec<f64>> = reports.iter().map(|r| metric(r, m)).collect();
                    values.map(|v| mean_std(&v))
                })
                .collect();
            ComparisonRow {
                label,
                runs: reports.len(),
                stats,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &ComparisonRow| r.mean("balanced_accuracy").unwrap_or(f64::NEG_INFINITY);
        key(b)
            .total_cmp(&key(a))
            .then_with(|| a.label.cmp(&b.label))
    });
    Ok(rows)
}

fn cell(stat: Option<(f64, Option<f64>)>) -> String {
    match stat {
        None => "-".into(),
        Some((m, None)) => format!("{m:.4}"),
        Some((m, Some(s))) => format!("{m:.4} ± {s:.4}"),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn compare(run_dirs: &[impl AsRef<Path>], split: Split, out: &Path) -> Result<()> {
    let rows = compare_runs(run_dirs, split)?;
    let width = rows
        .iter()
        .map(|r| r.label.chars().count())
        .max()
        .unwrap_or(0)
        .max("experiment".len());
    let mut header = format!("{:<width$} {:>4}", "experiment", "runs");
    for m in METRICS {
        header.push_str(&format!("  {m:>17}"));
    }
    println!("{header}");
    for r in &rows {
        let mut line = format!("{:<width$} {:>4}", r.label, r.runs);
        for s in &r.stats {
            line.push_str(&format!("  {:>17}", cell(*s)));
        }
        println!("{line}");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["experiment".to_string(), "runs".to_string()];
    for m in METRICS {
        head.push(format!("{m}_mean"));
        head.push(format!("{m}_std"));
    }
    w.write_record(&head)?;
    for r in &rows {
        let mut rec = vec![r.label.clone(), r.runs.to_string()];
        for s in &r.stats {
            rec.push(opt(s.map(|s| s.0)));
            rec.push(opt(s.and_then(|s| s.1)));
        }
        w.write_record(&rec)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(out, w.into_inner()?).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {}", out.display());
    Ok(())
}
