//! Stratified repeated hold-out splits, accuracy, confusion matrices and the
//! cross-validation driver.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{Label, NUM_LEVELS};

pub const MIN_SPLIT_ENTRIES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid split spec: {0}")]
    Spec(String),
    #[error("{0} entries; splitting needs at least {MIN_SPLIT_ENTRIES}")]
    TooFew(usize),
    #[error("class {label} has {size} examples, too few to hold out a {fraction} share")]
    ClassTooSmall { label: Label, size: usize, fraction: f64 },
    #[error("{predictions} predictions for {truths} truths")]
    Shape { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("split {index}: {message}")]
    Split { index: usize, message: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.05,
            repeats: 3,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(EvalError::Spec(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.repeats == 0 {
            return Err(EvalError::Spec("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Indices into the split input, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One stratified split per repeat. Each class contributes
/// `round(test_fraction * class_size)` test examples, taken from a seeded
/// shuffle that advances between repeats.
pub fn split(labels: &[Label], spec: &SplitSpec) -> Result<Vec<Split>> {
    spec.validate()?;
    if labels.len() < MIN_SPLIT_ENTRIES {
        return Err(EvalError::TooFew(labels.len()));
    }
    let mut by_class: [Vec<usize>; NUM_LEVELS] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let mut quota = [0usize; NUM_LEVELS];
    for (k, members) in by_class.iter().enumerate() {
        let size = members.len();
        if size == 0 {
            continue;
        }
        let q = (spec.test_fraction * size as f64).round() as usize;
        if q == 0 || q >= size {
            return Err(EvalError::ClassTooSmall {
                label: Label::ALL[k],
                size,
                fraction: spec.test_fraction,
            });
        }
        quota[k] = q;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut splits = Vec::with_capacity(spec.repeats);
    for _ in 0..spec.repeats {
        order.shuffle(&mut rng);
        let mut taken = [0usize; NUM_LEVELS];
        let mut in_test = vec![false; labels.len()];
        for &i in &order {
            let k = labels[i].index();
            if taken[k] < quota[k] {
                taken[k] += 1;
                in_test[i] = true;
            }
        }
        let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| in_test[i]);
        splits.push(Split { train, test });
    }
    Ok(splits)
}

fn check_lengths(predictions: &[Label], truths: &[Label]) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Shape {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn accuracy(predictions: &[Label], truths: &[Label]) -> Result<f64> {
    check_lengths(predictions, truths)?;
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Entry `[t][p]` counts examples of truth `t` predicted as `p`.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<[[u64; NUM_LEVELS]; NUM_LEVELS]> {
    check_lengths(predictions, truths)?;
    let mut m = [[0u64; NUM_LEVELS]; NUM_LEVELS];
    for (p, t) in predictions.iter().zip(truths) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

fn trace_fraction(m: &[[u64; NUM_LEVELS]; NUM_LEVELS]) -> f64 {
    let total: u64 = m.iter().flatten().sum();
    let diag: u64 = (0..NUM_LEVELS).map(|i| m[i][i]).sum();
    diag as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_fraction: f64,
    pub seed: u64,
    pub split_accuracies: Vec<f64>,
    pub split_sizes: Vec<usize>,
    pub mean_accuracy: f64,
    /// Summed over splits; rows are truth, columns prediction.
    pub confusion: [[u64; NUM_LEVELS]; NUM_LEVELS],
}

impl EvalReport {
    pub fn from_splits(spec: &SplitSpec, confusions: &[[[u64; NUM_LEVELS]; NUM_LEVELS]]) -> Result<Self> {
        if confusions.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut total = [[0u64; NUM_LEVELS]; NUM_LEVELS];
        for m in confusions {
            for t in 0..NUM_LEVELS {
                for p in 0..NUM_LEVELS {
                    total[t][p] += m[t][p];
                }
            }
        }
        let split_accuracies: Vec<f64> = confusions.iter().map(trace_fraction).collect();
        Ok(EvalReport {
            test_fraction: spec.test_fraction,
            seed: spec.seed,
            mean_accuracy: split_accuracies.iter().sum::<f64>() / split_accuracies.len() as f64,
            split_sizes: confusions.iter().map(|m| m.iter().flatten().sum::<u64>() as usize).collect(),
            split_accuracies,
            confusion: total,
        })
    }

    /// Machine-readable record with the confusion matrix flattened row-major.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "test_fraction": self.test_fraction,
            "seed": self.seed,
            "split_accuracies": self.split_accuracies,
            "split_sizes": self.split_sizes,
            "mean_accuracy": self.mean_accuracy,
            "confusion_row_major": self.confusion.iter().flatten().collect::<Vec<_>>(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} splits, test fraction {}, seed {}",
            self.split_accuracies.len(),
            self.test_fraction,
            self.seed
        );
        for (i, (a, n)) in self.split_accuracies.iter().zip(&self.split_sizes).enumerate() {
            let _ = writeln!(s, "split {i}: accuracy {a:.4} on {n} held-out");
        }
        let _ = writeln!(s, "mean accuracy: {:.4}", self.mean_accuracy);
        let _ = writeln!(s, "confusion (rows truth, columns prediction):");
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", "", "low", "neutral", "high");
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8}", Label::ALL[t].as_str(), row[0], row[1], row[2]);
        }
        s
    }
}

/// Runs `fit_predict(split_index, seed, split)` on every split, where `seed`
/// is `spec.seed + split_index`, and scores its test-set predictions.
pub fn cross_validate<E: std::fmt::Display>(
    labels: &[Label],
    spec: &SplitSpec,
    mut fit_predict: impl FnMut(usize, u64, &Split) -> std::result::Result<Vec<Label>, E>,
) -> Result<EvalReport> {
    let splits = split(labels, spec)?;
    let mut confusions = Vec::with_capacity(splits.len());
    for (index, s) in splits.iter().enumerate() {
        let seed = spec.seed.wrapping_add(index as u64);
        let predicted = fit_predict(index, seed, s).map_err(|e| EvalError::Split {
            index,
            message: e.to_string(),
        })?;
        let truths: Vec<Label> = s.test.iter().map(|&i| labels[i]).collect();
        confusions.push(confusion(&predicted, &truths).map_err(|e| EvalError::Split {
            index,
            message: e.to_string(),
        })?);
    }
    EvalReport::from_splits(spec, &confusions)
}
