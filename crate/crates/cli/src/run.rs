use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fopro_core::data::Split;
use fopro_core::eval::MetricsReport;
use fopro_core::plot::{confusion_heatmap, loss_curves, save_png, validation_curves};
use fopro_core::train::{
    read_metrics, ExperimentConfig, TrainOptions, Trainer, BEST_CHECKPOINT, CONFIG_FILE,
    METRICS_FILE,
};

pub const LOSS_PLOT: &str = "loss_curves.png";
pub const VALIDATION_PLOT: &str = "validation_curves.png";

/// `report-<split>.json`, or `report-<split>-last.json` for the last
/// checkpoint; the confusion files share the suffix.
pub fn report_stem(split: Split, best: bool) -> String {
    if best {
        split.to_string()
    } else {
        format!("{split}-last")
    }
}

pub fn report_path(run_dir: &Path, split: Split, best: bool) -> PathBuf {
    run_dir.join(format!("report-{}.json", report_stem(split, best)))
}

fn default_run_dir(config: &ExperimentConfig, out_root: &Path) -> PathBuf {
    out_root.join(format!(
        "{}-{}-seed{}",
        config.name,
        config.method.name(),
        config.seed
    ))
}

pub fn train(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
    out_root: &Path,
) -> Result<()> {
    let config = config_path
        .map(|p| -> Result<_> {
            let mut c = ExperimentConfig::load(p)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            Ok(c)
        })
        .transpose()?;
    let run_dir = match (&out, &config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(c)) => default_run_dir(c, out_root),
        (None, None) => bail!("--resume without --config needs --out"),
    };
    let mut trainer = if resume {
        if let Some(c) = &config {
            let snapshot = ExperimentConfig::load(&run_dir.join(CONFIG_FILE))?;
            if snapshot.hash() != c.hash() {
                bail!(
                    "{} was trained with a different config; refusing to resume",
                    run_dir.display()
                );
            }
        }
        Trainer::resume(&run_dir)?
    } else {
        Trainer::new(
            config.expect("config is required without --resume"),
            Some(&run_dir),
        )?
    };
    log::info!("run directory {}", run_dir.display());
    let summary = trainer.train(&TrainOptions {
        stop_after_epochs: stop_after,
    })?;

    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    save_png(&loss_curves(&records), &run_dir.join(LOSS_PLOT))?;
    save_png(&validation_curves(&records), &run_dir.join(VALIDATION_PLOT))?;

    let state = &summary.state;
    let finished = state.stopped_early || state.next_epoch >= trainer.config().schedule.max_epochs;
    if !finished {
        println!(
            "stopped after epoch {}; continue with --resume",
            state.next_epoch
        );
        return Ok(());
    }
    let report = trainer.evaluate_best(Split::Test)?;
    write_report(&run_dir, Split::Test, true, &report, trainer.class_names())?;
    println!(
        "best epoch {}: test accuracy {:.4}, balanced accuracy {:.4}, mcc {:.4}, macro-F1 {:.4}",
        state.best_epoch.map_or("-".into(), |e| e.to_string()),
        report.accuracy,
        report.balanced_accuracy,
        report.mcc,
        report.macro_f1
    );
    Ok(())
}

pub fn evaluate(run_dir: &Path, split: Split, best: bool) -> Result<MetricsReport> {
    if best && !run_dir.join(BEST_CHECKPOINT).exists() {
        bail!(
            "no {BEST_CHECKPOINT} in {}; train the run first or pass --last",
            run_dir.display()
        );
    }
    let trainer = Trainer::load_run(run_dir, best)?;
    let report = trainer.evaluate(split)?;
    write_report(run_dir, split, best, &report, trainer.class_names())?;
    println!(
        "{split}: accuracy {:.4}, balanced accuracy {:.4}, mcc {:.4}, macro-F1 {:.4}",
        report.accuracy, report.balanced_accuracy, report.mcc, report.macro_f1
    );
    Ok(report)
}

/// Writes the report JSON, the confusion matrix as CSV and as a heatmap.
fn write_report(
    run_dir: &Path,
    split: Split,
    best: bool,
    report: &MetricsReport,
    class_names: &[String],
) -> Result<()> {
    let stem = report_stem(split, best);
    let json = report_path(run_dir, split, best);
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n")
        .with_context(|| format!("writing {}", json.display()))?;
    let csv = run_dir.join(format!("confusion-{stem}.csv"));
    fs::write(&csv, report.confusion.to_csv(class_names))
        .with_context(|| format!("writing {}", csv.display()))?;
    save_png(
        &confusion_heatmap(&report.confusion, 24),
        &run_dir.join(format!("confusion-{stem}.png")),
    )?;
    Ok(())
}
