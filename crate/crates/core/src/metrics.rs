//! Accuracy matrix and the FP / AP / Forget summaries.
//!
//! Entries are stored as fractions in `[0, 1]`; every summary is returned on
//! the 0–100 scale.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    /// Row-major `a[q][m]`, `None` where not yet evaluated.
    entries: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: vec![None; n * n],
        }
    }

    /// Builds a fully populated matrix from rows `a[q][·]` given as fractions.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::new(n);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(config("accuracy matrix", "must be square"));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(q, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Records the accuracy on task `q` after training task `m` (0-based).
    pub fn set(&mut self, q: usize, m: usize, accuracy: f64) -> Result<()> {
        if q >= self.n || m >= self.n {
            return Err(config("accuracy matrix", format!("index ({q}, {m}) outside {0}x{0}", self.n)));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(config("accuracy", format!("{accuracy} outside [0, 1]")));
        }
        self.entries[q * self.n + m] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, q: usize, m: usize) -> Option<f64> {
        if q >= self.n || m >= self.n {
            return None;
        }
        self.entries[q * self.n + m]
    }

    fn require(&self, q: usize, m: usize) -> Result<f64> {
        self.get(q, m).ok_or(Error::MissingEntry { task: q, after: m })
    }

    /// Rows as `Option`s scaled to percent, for reporting.
    pub fn percent_rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.n)
            .map(|q| (0..self.n).map(|m| self.get(q, m).map(|v| 100.0 * v)).collect())
            .collect()
    }

    /// Same tasks relabelled: new task `i` is old task `perm[i]`, in both axes.
    /// FP is only preserved when `perm` keeps the last task last.
    pub fn relabel(&self, perm: &[usize]) -> Self {
        let mut out = Self::new(self.n);
        for q in 0..self.n {
            for m in 0..self.n {
                out.entries[q * self.n + m] = self.get(perm[q], perm[m]);
            }
        }
        out
    }
}

/// Final performance: mean of the last column, in percent.
pub fn fp(matrix: &AccuracyMatrix) -> Result<f64> {
    let n = matrix.len();
    if n == 0 {
        return Err(config("accuracy matrix", "empty"));
    }
    let mut sum = 0.0;
    for q in 0..n {
        sum += matrix.require(q, n - 1)?;
    }
    Ok(100.0 * sum / n as f64)
}

/// Adaptation performance: mean of the diagonal, in percent.
pub fn ap(matrix: &AccuracyMatrix) -> Result<f64> {
    let n = matrix.len();
    if n == 0 {
        return Err(config("accuracy matrix", "empty"));
    }
    let mut sum = 0.0;
    for q in 0..n {
        sum += matrix.require(q, q)?;
    }
    Ok(100.0 * sum / n as f64)
}

/// `ap − fp`; negative means backward transfer.
pub fn forget(matrix: &AccuracyMatrix) -> Result<f64> {
    Ok(forget_from(ap(matrix)?, fp(matrix)?))
}

pub fn forget_from(ap: f64, fp: f64) -> f64 {
    ap - fp
}

/// Rounds to one decimal place, the precision of published tables.
pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub order: String,
    pub seed: u64,
    pub fp: f64,
    pub ap: f64,
    pub forget: f64,
}

impl MetricsRecord {
    pub fn from_matrix(method: &str, order: &str, seed: u64, matrix: &AccuracyMatrix) -> Result<Self> {
        let fp = fp(matrix)?;
        let ap = ap(matrix)?;
        Ok(Self {
            method: method.to_string(),
            order: order.to_string(),
            seed,
            fp,
            ap,
            forget: forget_from(ap, fp),
        })
    }

    pub const CSV_HEADER: &'static str = "method,order,seed,fp,ap,forget";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.method, self.order, self.seed, self.fp, self.ap, self.forget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_matrix() {
        let m = AccuracyMatrix::from_rows(&vec![vec![0.6; 3]; 3]).unwrap();
        assert!((fp(&m).unwrap() - 60.0).abs() < 1e-12);
        assert!((ap(&m).unwrap() - 60.0).abs() < 1e-12);
        assert!(forget(&m).unwrap().abs() < 1e-12);
        let full = AccuracyMatrix::from_rows(&vec![vec![1.0; 2]; 2]).unwrap();
        assert_eq!(fp(&full).unwrap(), 100.0);
    }

    #[test]
    fn two_task_hand_cases() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9, 0.8], vec![0.0, 0.7]]).unwrap();
        assert!((fp(&m).unwrap() - 75.0).abs() < 1e-12);
        assert!((ap(&m).unwrap() - 80.0).abs() < 1e-12);
        let m = AccuracyMatrix::from_rows(&[vec![0.5, 0.8], vec![0.0, 0.6]]).unwrap();
        assert!((fp(&m).unwrap() - 70.0).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let mut m = AccuracyMatrix::new(1);
        m.set(0, 0, 0.42).unwrap();
        assert!((ap(&m).unwrap() - 42.0).abs() < 1e-12);
        assert!((fp(&m).unwrap() - 42.0).abs() < 1e-12);
    }

    #[test]
    fn missing_entries_rejected() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        assert!(matches!(fp(&m), Err(Error::MissingEntry { task: 0, after: 1 })));
        assert!(matches!(ap(&m), Err(Error::MissingEntry { task: 1, after: 1 })));
        assert!(m.set(0, 0, 1.5).is_err());
        assert!(m.set(2, 0, 0.5).is_err());
    }

    #[test]
    fn published_rows_round_trip() {
        assert_eq!(round1(forget_from(80.7, 74.9)), 5.8);
        assert_eq!(round1(forget_from(80.6, 81.8)), -1.2);
    }

    #[test]
    fn record_csv() {
        let m = AccuracyMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let r = MetricsRecord::from_matrix("data", "0-1", 3, &m).unwrap();
        assert_eq!(r.csv_row(), "data,0-1,3,75,100,25");
    }
}
