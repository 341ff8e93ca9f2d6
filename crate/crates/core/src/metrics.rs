//! Accuracy, the per-task accuracy matrix and its average (ACA), and the
//! usefulness / robustness correlation diagnostics for scalar features.

use std::io::Write;
use std::path::Path;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::gradnet::{argmax, Network};
use crate::protocols::LabeledDataset;

/// Fraction of samples whose argmax logit (lowest id on ties) equals the label.
pub fn accuracy(net: &Network, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for s in &dataset.samples {
        let logits = net.logits(&s.x)?;
        if argmax(logits.data()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Lower-triangular matrix of accuracies: entry `(t, i)` is the accuracy on
/// task `i` after training task `t` (both 0-based, `i <= t`).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Matrix(format!(
                    "row {t} has {} entries; a lower-triangular row needs {}",
                    row.len(),
                    t + 1
                )));
            }
            for (i, v) in row.into_iter().enumerate() {
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, i: usize, value: f64) -> Result<()> {
        if t >= self.rows.len() {
            return Err(Error::Matrix(format!("row {t} out of range")));
        }
        if i > t {
            return Err(Error::Matrix(format!(
                "entry ({t}, {i}) lies above the diagonal"
            )));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Matrix(format!("accuracy {value} outside [0, 1]")));
        }
        self.rows[t][i] = Some(value);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied().flatten()
    }

    pub fn final_row(&self) -> Result<Vec<f64>> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| Error::Matrix("empty matrix".into()))?;
        last.iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Matrix(format!("final row missing task {i}"))))
            .collect()
    }

    /// CSV with one row per trained task and one column per evaluated task.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["task".to_string()];
        header.extend((1..=self.tasks()).map(|i| format!("eval_{i}")));
        out.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            for i in 0..self.tasks() {
                rec.push(match row.get(i).copied().flatten() {
                    Some(v) => v.to_string(),
                    None => String::new(),
                });
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Mean of the final row: average accuracy over all tasks after the last.
pub fn aca(matrix: &AccuracyMatrix) -> Result<f64> {
    let row = matrix.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Inputs with `±1` labels.
#[derive(Debug, Clone)]
pub struct BinarySet<'a> {
    pub inputs: Vec<&'a Array>,
    pub labels: Vec<i8>,
}

/// Re-encode a multiclass dataset as `+1` for `class` and `-1` otherwise.
pub fn one_vs_rest(dataset: &LabeledDataset, class: usize) -> BinarySet<'_> {
    BinarySet {
        inputs: dataset.samples.iter().map(|s| &s.x).collect(),
        labels: dataset
            .samples
            .iter()
            .map(|s| if s.label == class { 1 } else { -1 })
            .collect(),
    }
}

/// `mean(y * z)` where `z` is `values` standardized to zero mean and unit
/// (population) variance.
pub fn standardized_correlation(values: &[f64], labels: &[i8]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if values.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "feature values vs labels",
            left: vec![values.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(y) = labels.iter().find(|&&y| y != 1 && y != -1) {
        return Err(Error::InvalidConfig(format!("label {y} is not ±1")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature value".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateFeature);
    }
    Ok(values
        .iter()
        .zip(labels)
        .map(|(v, &y)| f64::from(y) * (v - mean) / sd)
        .sum::<f64>()
        / n)
}

/// Empirical usefulness of a scalar feature on one binary task.
pub fn usefulness<F>(feature: F, set: &BinarySet<'_>) -> Result<f64>
where
    F: Fn(&Array) -> f64,
{
    let values: Vec<f64> = set.inputs.iter().map(|x| feature(x)).collect();
    standardized_correlation(&values, &set.labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Robustness {
    /// Correlation on each task, in the order given.
    pub per_task: Vec<f64>,
    pub min: f64,
}

impl Robustness {
    pub fn is_robust(&self, gamma: f64) -> bool {
        self.min >= gamma
    }
}

/// Usefulness of one feature on every task seen so far, with the minimum.
pub fn cl_robustness<F>(feature: F, sets: &[BinarySet<'_>]) -> Result<Robustness>
where
    F: Fn(&Array) -> f64,
{
    if sets.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_task = sets
        .iter()
        .map(|s| usefulness(&feature, s))
        .collect::<Result<Vec<_>>>()?;
    let min = per_task.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Robustness { per_task, min })
}
