//! Three-class decoding metrics: per-class TPR, precision and F1, balanced
//! accuracy, target recall and macro F1.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predictions.
    pub confusion: [[u64; 3]; 3],
    pub tpr: [f64; 3],
    pub precision: [f64; 3],
    pub f1: [f64; 3],
    pub ba: f64,
    /// Mean TPR over the two target classes.
    pub recall: f64,
    pub f1_macro: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; 3]; 3]) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let mut tpr = [0.0; 3];
        let mut precision = [0.0; 3];
        let mut f1 = [0.0; 3];
        for k in 0..3 {
            let row: u64 = confusion[k].iter().sum();
            let col: u64 = (0..3).map(|j| confusion[j][k]).sum();
            tpr[k] = ratio(confusion[k][k], row);
            precision[k] = ratio(confusion[k][k], col);
            let s = tpr[k] + precision[k];
            f1[k] = if s == 0.0 { 0.0 } else { 2.0 * tpr[k] * precision[k] / s };
        }
        Self {
            confusion,
            tpr,
            precision,
            f1,
            ba: (tpr[0] + tpr[1] + tpr[2]) / 3.0,
            recall: (tpr[1] + tpr[2]) / 2.0,
            f1_macro: (f1[0] + f1[1] + f1[2]) / 3.0,
        }
    }

    pub fn from_predictions(y_true: &[u8], y_pred: &[u8]) -> Result<Self> {
        check_dim("predictions", y_true.len(), y_pred.len())?;
        if y_true.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let mut confusion = [[0u64; 3]; 3];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t > 2 {
                return Err(Error::InvalidLabel(t));
            }
            if p > 2 {
                return Err(Error::InvalidLabel(p));
            }
            confusion[t as usize][p as usize] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    /// Row counts (true class totals).
    pub fn class_totals(&self) -> [u64; 3] {
        std::array::from_fn(|k| self.confusion[k].iter().sum())
    }
}

/// Mean and (population) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let m = MetricsReport::from_confusion([[90, 5, 5], [2, 7, 1], [3, 2, 5]]);
        assert!((m.ba - 0.7).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert_eq!(m.class_totals(), [100, 10, 10]);
    }

    #[test]
    fn empty_column_has_zero_precision() {
        let m = MetricsReport::from_predictions(&[0, 1, 2], &[0, 0, 0]).unwrap();
        assert_eq!(m.precision[1], 0.0);
        assert_eq!(m.f1[1], 0.0);
        assert!((m.ba - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(matches!(MetricsReport::from_predictions(&[], &[]), Err(Error::Empty(_))));
    }
}
