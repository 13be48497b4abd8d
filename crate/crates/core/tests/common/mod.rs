//! Small run configurations shared by the training tests.
#![allow(dead_code)]

use fopro_core::train::ExperimentConfig;

/// Three-class long-tailed toy problem that trains in well under a second
/// per epoch.
pub fn tiny_config(method: &str, seed: u64, max_epochs: usize) -> ExperimentConfig {
    let text = format!(
        r#"
method = "{method}"
seed = {seed}
batch_size = 16

[data]
kind = "synthetic"
full_counts = [70, 40, 30]
train_counts = [50, 16, 6]
val_per_class = 6
test_per_class = 6
resolution = 16
head_min = 40
tail_max = 10

[teacher]
kind = "toy"
channels = [8, 16]
strides = [1, 2]

[student]
channels = [4, 8]
strides = [1, 2]

[fpg]
noise_dim = 16

[schedule]
max_epochs = {max_epochs}
early_stop_patience = {max_epochs}
"#
    );
    ExperimentConfig::from_toml_str(&text).expect("tiny config parses")
}
