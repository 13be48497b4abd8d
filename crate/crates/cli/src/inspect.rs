use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fopro_core::data::Split;
use fopro_core::fpg::sample_noise;
use fopro_core::plot::{image_grid, log_amplitude_tile, save_png};
use fopro_core::rng::{derived_rng, tags};
use fopro_core::spectral::{decompose, mix_amplitude, reconstruct, ImageBatch};
use fopro_core::train::Trainer;
use ndarray::{Array3, Axis};
use rand::seq::index::sample;

pub const PROMPTS_DIR: &str = "prompts";
/// Mixing coefficients of the prompted columns; `1.0` leaves the image as is.
pub const ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Writes, under `<run>/prompts/`:
/// `delta.png` (one log-amplitude prompt per row), `x.png` (the sampled test
/// images), `x_hat.png` (one row per sample, one column per alpha),
/// `panel.png` (prompt, image and prompted images side by side) and
/// `inspect.json` (sample indices, labels and alphas).
pub fn inspect_prompts(run_dir: &Path, samples: usize) -> Result<()> {
    let trainer = Trainer::load_run(run_dir, false)?;
    let Some(fpg) = trainer.fpg() else {
        bail!(
            "run {} (method {}) has no prompt generator",
            run_dir.display(),
            trainer.config().method.name()
        );
    };
    let test = trainer.split(Split::Test);
    if samples == 0 || samples > test.len() {
        bail!("--samples must be in 1..={}", test.len());
    }
    let mut rng = derived_rng(trainer.config().seed, &[tags::INSPECT]);
    let indices = sample(&mut rng, test.len(), samples).into_vec();

    let (mut deltas, mut images, mut prompted, mut panel) = (vec![], vec![], vec![], vec![]);
    for &i in &indices {
        let x: Array3<f64> = test.images.index_axis(Axis(0), i).to_owned();
        let prompt = fpg.generate(&sample_noise(&mut rng, fpg.noise_dim()))?;
        let batch = ImageBatch::new(
            x.clone()
                .insert_axis(Axis(0))
                .broadcast((ALPHAS.len(), 3, x.dim().1, x.dim().2))
                .unwrap()
                .to_owned(),
        )?;
        let parts = decompose(&batch)?;
        let mixed = mix_amplitude(&parts.amplitude, &prompt, &ALPHAS)?;
        let x_hat = reconstruct(&mixed, &parts.phase)?.into_inner();
        let delta = log_amplitude_tile(prompt.delta());
        panel.push(delta.clone());
        panel.push(x.clone());
        for row in x_hat.outer_iter() {
            prompted.push(row.to_owned());
            panel.push(row.to_owned());
        }
        deltas.push(delta);
        images.push(x);
    }

    let dir = run_dir.join(PROMPTS_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let scale = (96 / test.images.dim().3).max(1) as u32;
    save_png(&image_grid(&deltas, 1, scale), &dir.join("delta.png"))?;
    save_png(&image_grid(&images, 1, scale), &dir.join("x.png"))?;
    save_png(
        &image_grid(&prompted, ALPHAS.len(), scale),
        &dir.join("x_hat.png"),
    )?;
    save_png(
        &image_grid(&panel, ALPHAS.len() + 2, scale),
        &dir.join("panel.png"),
    )?;
    let meta = serde_json::json!({
        "test_indices": indices,
        "labels": indices.iter().map(|&i| test.labels[i]).collect::<Vec<_>>(),
        "alphas": ALPHAS,
        "scale": scale,
    });
    fs::write(
        dir.join("inspect.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    println!("wrote {samples} prompt samples to {}", dir.display());
    Ok(())
}
