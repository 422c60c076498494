//! Confusion matrix and mean intersection-over-union.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::LabelMap;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!(
                "confusion matrix needs at least 2 classes, got {classes}"
            )));
        }
        Ok(Self {
            classes,
            counts: vec![0; classes * classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel; pixels labeled [`LabelMap::IGNORE`] in the
    /// truth are skipped.
    pub fn accumulate(&mut self, predicted: &LabelMap, truth: &LabelMap) -> Result<()> {
        if predicted.height() != truth.height() || predicted.width() != truth.width() {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: vec![predicted.height(), predicted.width()],
                rhs: vec![truth.height(), truth.width()],
            });
        }
        truth.validate(self.classes)?;
        if let Some(&bad) = predicted.labels().iter().find(|&&p| p as usize >= self.classes) {
            return Err(invalid(format!(
                "predicted class {bad} out of range for {} classes",
                self.classes
            )));
        }
        for (&p, &t) in predicted.labels().iter().zip(truth.labels()) {
            if t != LabelMap::IGNORE {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Classes absent from both truth and prediction are left out of the
    /// mean.
    pub fn iou(&self) -> Result<IouReport> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let diag = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - diag;
                (union > 0).then(|| diag as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(invalid("mIoU undefined: no scored pixels"));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport { per_class, miou })
    }

    /// `class,iou` rows followed by a `mean` row; absent classes are blank.
    pub fn to_csv(&self) -> Result<String> {
        let report = self.iou()?;
        let mut out = String::from("class,iou\n");
        for (k, v) in report.per_class.iter().enumerate() {
            match v {
                Some(v) => writeln!(out, "{k},{v:.6}"),
                None => writeln!(out, "{k},"),
            }
            .expect("writing to a String");
        }
        writeln!(out, "mean,{:.6}", report.miou).expect("writing to a String");
        Ok(out)
    }
}
