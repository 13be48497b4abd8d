use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fopro_core::data::{shot_grouping_with, Split};
use fopro_core::train::{resolve_manifest, ExperimentConfig, MANIFEST_FILE};

pub const COUNTS_FILE: &str = "counts.csv";

pub fn build_dataset(config_path: &Path, out: Option<PathBuf>, out_root: &Path) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    let spec = config.data.longtail_spec()?;
    let manifest = resolve_manifest(&config)?;
    let out = out.unwrap_or_else(|| out_root.join(format!("{}-dataset", config.name)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    manifest.write(&out.join(MANIFEST_FILE))?;

    let k = spec.num_classes();
    let [train, val, test] = [Split::Train, Split::Val, Split::Test].map(|s| manifest.counts(s, k));
    let grouping = shot_grouping_with(&train, config.data.head_min, config.data.tail_max);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "train", "val", "test", "group"])?;
    println!(
        "{:<12} {:>8} {:>6} {:>6}  group",
        "class", "train", "val", "test"
    );
    for c in 0..k {
        let group = serde_json::to_value(grouping.groups[c])?;
        let group = group.as_str().unwrap_or_default();
        let name = &spec.class_names[c];
        println!(
            "{name:<12} {:>8} {:>6} {:>6}  {group}",
            train[c], val[c], test[c]
        );
        w.write_record([
            name,
            &train[c].to_string(),
            &val[c].to_string(),
            &test[c].to_string(),
            group,
        ])?;
    }
    let total = |v: &[usize]| v.iter().sum::<usize>();
    println!(
        "{:<12} {:>8} {:>6} {:>6}",
        "total",
        total(&train),
        total(&val),
        total(&test)
    );
    let counts_path = out.join(COUNTS_FILE);
    fs::write(&counts_path, w.into_inner()?)
        .with_context(|| format!("writing {}", counts_path.display()))?;
    log::info!("wrote {} and {}", MANIFEST_FILE, COUNTS_FILE);
    Ok(())
}
