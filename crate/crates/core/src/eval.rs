//! Classification metrics shared by the teacher, the student and the
//! integer model.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{StudentNet, TeacherNet};
use crate::scalar::Scalar;

/// Rows evaluated per forward call.
pub const EVAL_BATCH: usize = 250;

/// Anything that maps dataset rows to one logit vector per row.
pub trait Classifier: Sync {
    fn logits(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub samples: usize,
    pub top1_errors: usize,
    pub top5_errors: usize,
    /// Mean softmax cross-entropy.
    pub loss: f64,
}

impl Metrics {
    pub fn top1_error(&self) -> f64 {
        self.top1_errors as f64 / self.samples.max(1) as f64
    }

    pub fn top5_error(&self) -> f64 {
        self.top5_errors as f64 / self.samples.max(1) as f64
    }

    pub fn top1_accuracy(&self) -> f64 {
        1.0 - self.top1_error()
    }

    pub fn from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if logits.len() != labels.len() {
            return Err(Error::Dimension(format!("{} logit rows for {} labels", logits.len(), labels.len())));
        }
        let mut m = Metrics { samples: labels.len(), top1_errors: 0, top5_errors: 0, loss: 0.0 };
        let mut loss = 0.0;
        for (row, &label) in logits.iter().zip(labels) {
            if label >= row.len() {
                return Err(Error::Data(format!("label {label} outside {} logits", row.len())));
            }
            let r = rank(row, label);
            m.top1_errors += usize::from(r >= 1);
            m.top5_errors += usize::from(r >= 5);
            loss += cross_entropy(row, label);
        }
        m.loss = loss / labels.len().max(1) as f64;
        Ok(m)
    }
}

/// Position of `label` when classes are sorted by descending logit, equal
/// logits ordered by class index.
pub fn rank(logits: &[f64], label: usize) -> usize {
    let v = logits[label];
    logits.iter().enumerate().filter(|&(j, &l)| l > v || (l == v && j < label)).count()
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

/// Top-1/top-5 error and mean cross-entropy over the whole dataset.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, data: &Dataset) -> Result<Metrics> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<Vec<f64>>> =
        rows.par_chunks(EVAL_BATCH).map(|c| model.logits(data, c)).collect::<Result<_>>()?;
    let logits: Vec<Vec<f64>> = chunks.into_iter().flatten().collect();
    Metrics::from_logits(&logits, data.labels())
}

fn rows_of<T: Scalar>(logits: &crate::Tensor<T>) -> Vec<Vec<f64>> {
    let n = logits.batch();
    let k = logits.len() / n;
    logits.data().chunks(k).map(|r| r.iter().map(|v| v.to_f64()).collect()).collect()
}

impl<T: Scalar> Classifier for TeacherNet<T> {
    fn logits(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let x = data.batch::<T>(rows, &self.spec().input_shape)?;
        Ok(rows_of(&self.forward_eval(&x)?.0))
    }
}

impl<T: Scalar> Classifier for StudentNet<T> {
    fn logits(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let x = data.batch::<T>(rows, &self.spec().input_shape)?;
        Ok(rows_of(&self.forward(&x, None)?.0))
    }
}
