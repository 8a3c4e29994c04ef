use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::split::Pixel;
use crate::error::{Error, Result};

/// Confusion matrix (rows = truth, columns = prediction) and the summary
/// accuracies derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<MetricsReport> {
        let k = confusion.len();
        if confusion.iter().any(|row| row.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("cannot compute metrics over an empty set".into()));
        }
        let n = total as f64;
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let oa = trace as f64 / n;
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (n * n);
        let kappa = if pe >= 1.0 {
            if oa >= 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(MetricsReport {
            confusion,
            per_class,
            oa,
            aa,
            kappa,
        })
    }

    /// Aligned plain-text table: one row per class, then OA, AA and K.
    pub fn table(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class_{}", i + 1));
        let width = (0..self.per_class.len()).map(|i| name(i).len()).chain([5]).max().unwrap_or(5);
        let mut s = String::new();
        writeln!(s, "{:<width$}  {:>8}  {:>7}", "class", "accuracy", "pixels").unwrap();
        for (i, acc) in self.per_class.iter().enumerate() {
            let count: u64 = self.confusion[i].iter().sum();
            let acc = acc.map_or_else(|| "-".to_string(), |a| format!("{:.4}", a));
            writeln!(s, "{:<width$}  {:>8}  {:>7}", name(i), acc, count).unwrap();
        }
        for (label, v) in [("OA", self.oa), ("AA", self.aa), ("K", self.kappa)] {
            writeln!(s, "{label:<width$}  {v:>8.4}").unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Metrics of a row-major class map (values `1..=classes`) over `pixels`.
pub fn compute_metrics(pred: &[u32], width: usize, classes: usize, pixels: &[Pixel]) -> Result<MetricsReport> {
    if pixels.is_empty() {
        return Err(Error::Contract("cannot compute metrics over an empty set".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for p in pixels {
        let y = pred[p.row * width + p.col];
        if p.label == 0 || p.label as usize > classes {
            return Err(Error::Contract(format!("pixel ({}, {}) has label {}", p.row, p.col, p.label)));
        }
        if y == 0 || y as usize > classes {
            return Err(Error::Contract(format!("prediction {y} at ({}, {}) is not a class", p.row, p.col)));
        }
        confusion[p.label as usize - 1][y as usize - 1] += 1;
    }
    MetricsReport::from_confusion(confusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_class_confusion() {
        let m = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).unwrap();
        assert!((m.oa - 0.75).abs() < 1e-12);
        assert!((m.aa - 0.75).abs() < 1e-12);
        assert!((m.kappa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let m = MetricsReport::from_confusion(vec![vec![5, 0], vec![0, 2]]).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let m = MetricsReport::from_confusion(vec![vec![4, 0], vec![4, 0]]).unwrap();
        assert_eq!(m.oa, 0.5);
        assert_eq!(m.kappa, 0.0);
        let m = MetricsReport::from_confusion(vec![vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!((m.aa, m.kappa), (1.0, 1.0));
    }

    #[test]
    fn absent_classes_are_skipped_in_aa() {
        let m = MetricsReport::from_confusion(vec![vec![1, 1, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(m.per_class[1], None);
        assert!((m.aa - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(compute_metrics(&[1], 1, 1, &[]).is_err());
        assert!(MetricsReport::from_confusion(vec![vec![0]]).is_err());
    }

    #[test]
    fn table_lists_summary_rows() {
        let m = MetricsReport::from_confusion(vec![vec![3, 1], vec![1, 3]]).unwrap();
        let t = m.table(&["water".into(), "trees".into()]);
        assert!(t.contains("water"));
        assert!(t.lines().any(|l| l.starts_with("OA") && l.ends_with("0.7500")));
        assert!(t.lines().any(|l| l.starts_with("K") && l.ends_with("0.5000")));
    }
}
