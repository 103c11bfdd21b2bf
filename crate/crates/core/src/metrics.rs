//! Average accuracy and forgetting over the task-by-task accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `R[l][j]`: accuracy on task `j` after training task `l`, for `1 ≤ j ≤ l ≤ K`.
/// Indices are 1-based; every entry is written at most once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: vec![vec![None; tasks]; tasks],
        }
    }

    /// Builds a complete lower-triangular matrix from rows of lengths 1..=K.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (l, row) in rows.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(Error::Metric(format!(
                    "row {} has {} entries, expected {}",
                    l + 1,
                    row.len(),
                    l + 1
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(l + 1, j + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, after: usize, task: usize, accuracy: f64) -> Result<()> {
        if task == 0 || task > after || after > self.tasks {
            return Err(Error::Metric(format!(
                "entry R[{after}][{task}] lies outside the lower triangle of a {0}×{0} matrix",
                self.tasks
            )));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Metric(format!("accuracy {accuracy} outside [0, 1]")));
        }
        let slot = &mut self.rows[after - 1][task - 1];
        if slot.is_some() {
            return Err(Error::Metric(format!(
                "entry R[{after}][{task}] written twice"
            )));
        }
        *slot = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.rows
            .get(after.checked_sub(1)?)?
            .get(task.checked_sub(1)?)
            .copied()
            .flatten()
    }

    /// The defined entries `R[after][1..=after]`, if all are present.
    pub fn row(&self, after: usize) -> Option<Vec<f64>> {
        (1..=after).map(|j| self.get(after, j)).collect()
    }

    pub fn is_complete(&self) -> bool {
        (1..=self.tasks).all(|l| self.row(l).is_some())
    }

    /// `after_task,task_1..task_K`; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for j in 1..=self.tasks {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for l in 1..=self.tasks {
            out.push_str(&l.to_string());
            for j in 1..=self.tasks {
                out.push(',');
                if let Some(v) = self.get(l, j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Metric("empty matrix csv".into()))?;
        let tasks = header.split(',').count().saturating_sub(1);
        let mut m = AccuracyMatrix::new(tasks);
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != tasks + 1 {
                return Err(Error::Metric(format!(
                    "matrix csv row {} has {} cells",
                    i + 1,
                    cells.len()
                )));
            }
            let after: usize = cells[0]
                .trim()
                .parse()
                .map_err(|_| Error::Metric(format!("bad row label `{}`", cells[0])))?;
            for (j, cell) in cells[1..].iter().enumerate() {
                if cell.trim().is_empty() {
                    continue;
                }
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Metric(format!("bad accuracy `{cell}`")))?;
                m.set(after, j + 1, v)?;
            }
        }
        Ok(m)
    }
}

/// `(1/K) Σ_j R[K][j]`.
pub fn average_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    let k = r.tasks();
    let row = r
        .row(k)
        .filter(|_| k > 0)
        .ok_or_else(|| Error::Metric("final row of the accuracy matrix is incomplete".into()))?;
    Ok(row.iter().sum::<f64>() / k as f64)
}

/// Mean over `j < K` of `max_{l<K} R[l][j] − R[K][j]`. Negative values
/// (backward transfer) are returned as-is.
pub fn forgetting(r: &AccuracyMatrix) -> Result<f64> {
    let k = r.tasks();
    if k < 2 {
        return Err(Error::Metric("forgetting needs at least two tasks".into()));
    }
    if !r.is_complete() {
        return Err(Error::Metric("accuracy matrix is incomplete".into()));
    }
    let total: f64 = (1..k)
        .map(|j| {
            let peak = (j..k)
                .filter_map(|l| r.get(l, j))
                .fold(f64::NEG_INFINITY, f64::max);
            peak - r.get(k, j).expect("complete matrix")
        })
        .sum();
    Ok(total / (k - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_matrix() {
        let r = AccuracyMatrix::from_rows(&[vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(average_accuracy(&r).unwrap(), 1.0);
        assert_eq!(forgetting(&r).unwrap(), 0.0);
    }

    #[test]
    fn hand_examples() {
        let r = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.5, 0.8]]).unwrap();
        assert!((average_accuracy(&r).unwrap() - 0.65).abs() < 1e-15);
        assert!((forgetting(&r).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn constant_columns_do_not_forget() {
        let r =
            AccuracyMatrix::from_rows(&[vec![0.7], vec![0.7, 0.4], vec![0.7, 0.4, 0.9]]).unwrap();
        assert_eq!(forgetting(&r).unwrap(), 0.0);
    }

    #[test]
    fn backward_transfer_is_negative() {
        let r =
            AccuracyMatrix::from_rows(&[vec![0.5], vec![0.6, 0.8], vec![0.9, 0.9, 0.9]]).unwrap();
        assert!(forgetting(&r).unwrap() < 0.0);
    }

    #[test]
    fn single_task_has_no_forgetting_metric() {
        let r = AccuracyMatrix::from_rows(&[vec![0.3]]).unwrap();
        assert_eq!(average_accuracy(&r).unwrap(), 0.3);
        assert!(matches!(forgetting(&r), Err(Error::Metric(_))));
    }

    #[test]
    fn incomplete_final_row() {
        let mut r = AccuracyMatrix::new(2);
        r.set(1, 1, 0.5).unwrap();
        r.set(2, 1, 0.5).unwrap();
        assert!(average_accuracy(&r).is_err());
        assert!(forgetting(&r).is_err());
    }

    #[test]
    fn write_once_lower_triangle() {
        let mut r = AccuracyMatrix::new(3);
        assert!(r.set(1, 2, 0.5).is_err());
        assert!(r.set(4, 1, 0.5).is_err());
        assert!(r.set(2, 1, 1.5).is_err());
        r.set(2, 1, 0.5).unwrap();
        assert!(r.set(2, 1, 0.6).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = AccuracyMatrix::from_rows(&[
            vec![0.1 + 0.2],
            vec![1.0 / 3.0, 0.875],
            vec![0.0, 2.0 / 7.0, 1.0],
        ])
        .unwrap();
        assert_eq!(AccuracyMatrix::from_csv(&r.to_csv()).unwrap(), r);
    }
}
