//! Imbalance-aware classification metrics over a confusion matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ShotGroup, ShotGrouping};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(EvalError::InvalidInput(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(
        truth: &[usize],
        predicted: &[usize],
        num_classes: usize,
    ) -> Result<Self, EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::InvalidInput(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::zeros(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(EvalError::InvalidInput(format!(
                    "class index out of range for {num_classes} classes"
                )));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    /// Relabels class `k` as `perm[k]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.num_classes());
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.counts[perm[i]][perm[j]] = v;
            }
        }
        out
    }

    /// Recall per true class; `None` where the class never occurs.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect()
    }

    /// Delimiter-separated export with a header of predicted class names.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\predicted");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn require_nonempty(cm: &ConfusionMatrix) -> Result<(), EvalError> {
    if cm.num_classes() == 0 || cm.total() == 0 {
        return Err(EvalError::InvalidInput("empty confusion matrix".into()));
    }
    Ok(())
}

/// Multiclass Matthews correlation coefficient; 0 when either variance
/// factor of the denominator vanishes.
pub fn mcc(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    require_nonempty(cm)?;
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t: Vec<f64> = cm.row_sums().into_iter().map(|v| v as f64).collect();
    let p: Vec<f64> = cm.col_sums().into_iter().map(|v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let (dp, dt) = (s * s - pp, s * s - tt);
    if dp == 0.0 || dt == 0.0 {
        return Ok(0.0);
    }
    Ok((c * s - pt) / (dp.sqrt() * dt.sqrt()))
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    require_nonempty(cm)?;
    Ok(cm.trace() as f64 / cm.total() as f64)
}

/// A class average together with the classes left out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAverage {
    pub value: f64,
    /// Classes with no true samples.
    pub excluded: Vec<usize>,
}

/// Mean per-class recall over the classes that occur.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<ClassAverage, EvalError> {
    require_nonempty(cm)?;
    let recalls = cm.recalls();
    let excluded: Vec<usize> = recalls
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(k, _)| k)
        .collect();
    if !excluded.is_empty() {
        log::warn!("balanced accuracy excludes classes without true samples: {excluded:?}");
    }
    let present: Vec<f64> = recalls.into_iter().flatten().collect();
    Ok(ClassAverage {
        value: present.iter().sum::<f64>() / present.len() as f64,
        excluded,
    })
}

/// Unweighted mean of per-class F1; a class with `TP = FP = FN = 0`
/// contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let k = cm.num_classes();
    if k == 0 {
        return 0.0;
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let sum: f64 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let denom = rows[c] as f64 + cols[c] as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp / denom
            }
        })
        .sum();
    sum / k as f64
}

/// Mean recall per shot group (`None` for an empty group) and the
/// unweighted mean of the defined groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
    pub all: f64,
}

pub fn grouped_accuracy(
    cm: &ConfusionMatrix,
    grouping: &ShotGrouping,
) -> Result<GroupedAccuracy, EvalError> {
    require_nonempty(cm)?;
    if grouping.groups.len() != cm.num_classes() {
        return Err(EvalError::InvalidInput(format!(
            "grouping covers {} classes, matrix has {}",
            grouping.groups.len(),
            cm.num_classes()
        )));
    }
    let recalls = cm.recalls();
    let mean_of = |g: ShotGroup| {
        let vals: Vec<f64> = grouping
            .groups
            .iter()
            .zip(&recalls)
            .filter(|(gg, _)| **gg == g)
            .filter_map(|(_, r)| *r)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let (head, medium, tail) = (
        mean_of(ShotGroup::Head),
        mean_of(ShotGroup::Medium),
        mean_of(ShotGroup::Tail),
    );
    let defined: Vec<f64> = [head, medium, tail].into_iter().flatten().collect();
    if defined.len() < 3 {
        log::warn!("grouped accuracy: empty shot group excluded from the overall mean");
    }
    if defined.is_empty() {
        return Err(EvalError::InvalidInput(
            "no shot group has evaluated samples".into(),
        ));
    }
    Ok(GroupedAccuracy {
        head,
        medium,
        tail,
        all: defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcc: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub excluded_classes: Vec<usize>,
    pub grouped: GroupedAccuracy,
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn compute(
        cm: &ConfusionMatrix,
        grouping: &ShotGrouping,
        class_names: &[String],
    ) -> Result<Self, EvalError> {
        if class_names.len() != cm.num_classes() {
            return Err(EvalError::InvalidInput(
                "one class name per class required".into(),
            ));
        }
        let bacc = balanced_accuracy(cm)?;
        Ok(Self {
            mcc: mcc(cm)?,
            accuracy: accuracy(cm)?,
            macro_f1: macro_f1(cm),
            balanced_accuracy: bacc.value,
            excluded_classes: bacc.excluded,
            grouped: grouped_accuracy(cm, grouping)?,
            class_names: class_names.to_vec(),
            confusion: cm.clone(),
        })
    }
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(logits: &ndarray::Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
