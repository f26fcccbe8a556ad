//! Continual-learning metrics over lower-triangular accuracy matrices.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[i][j]`: accuracy on task `j` after training through task `i`, `j <= i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Contract(format!("row {i} holds {} entries, expected {}", r.len(), i + 1)));
            }
            if let Some(v) = r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Contract(format!("accuracy {v} in row {i} outside [0, 1]")));
            }
        }
        Ok(AccuracyMatrix { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// CSV with one row per training step; cells above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let t = self.tasks();
        let mut s = String::from("after_task");
        for j in 0..t {
            let _ = write!(s, ",task{j}");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{i}");
            for j in 0..t {
                match r.get(j) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean of the final row.
pub fn average_accuracy(r: &AccuracyMatrix) -> Result<f64> {
    let last = r.last_row().ok_or_else(|| Error::Contract("empty accuracy matrix".into()))?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean change from just-learned to final accuracy over the tasks before
/// the last; `None` for fewer than two tasks.
pub fn forgetting(r: &AccuracyMatrix) -> Option<f64> {
    let t = r.tasks();
    if t < 2 {
        return None;
    }
    let last = &r.rows[t - 1];
    let s: f64 = (0..t - 1).map(|j| last[j] - r.rows[j][j]).sum();
    Some(s / (t - 1) as f64)
}

pub fn transfer(cl_last: f64, expert_last: f64) -> f64 {
    cl_last - expert_last
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub transfer: Option<f64>,
    /// Final trunk module count.
    pub modules: usize,
    pub params: usize,
}

impl Summary {
    pub fn compute(r: &AccuracyMatrix, module_counts: &[usize], params: usize, expert_last: Option<f64>) -> Result<Self> {
        let last = r.last_row().and_then(|l| l.last()).copied();
        Ok(Summary {
            average_accuracy: average_accuracy(r)?,
            forgetting: forgetting(r),
            transfer: match (last, expert_last) {
                (Some(c), Some(e)) => Some(transfer(c, e)),
                _ => None,
            },
            modules: module_counts.last().copied().unwrap_or(0),
            params,
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per run: `name,A,F,T,M,params`.
pub fn comparison_csv(rows: &[(String, Summary)]) -> String {
    let mut s = String::from("run,A,F,T,M,params\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{}",
            m.average_accuracy,
            fmt_opt(m.forgetting),
            fmt_opt(m.transfer),
            m.modules,
            m.params
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: Vec<Vec<f64>>) -> AccuracyMatrix {
        AccuracyMatrix::new(rows).unwrap()
    }

    #[test]
    fn two_task_cases() {
        assert_eq!(average_accuracy(&m(vec![vec![1.0], vec![1.0, 0.5]])).unwrap(), 0.75);
        assert_eq!(forgetting(&m(vec![vec![0.9], vec![0.9, 0.8]])), Some(0.0));
        let f = forgetting(&m(vec![vec![0.9], vec![0.7, 0.8]])).unwrap();
        assert!((f + 0.2).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let r = m(vec![vec![0.4]]);
        assert_eq!(average_accuracy(&r).unwrap(), 0.4);
        assert_eq!(forgetting(&r), None);
    }

    #[test]
    fn uniform_row_formats_like_a_percentage_table_entry() {
        let r = m(vec![vec![0.672], vec![0.672, 0.672]]);
        assert_eq!(format!("{:.1}", 100.0 * average_accuracy(&r).unwrap()), "67.2");
    }

    #[test]
    fn transfer_is_a_difference() {
        assert!((transfer(0.70, 0.60) - 0.10).abs() < 1e-12);
        assert_eq!(transfer(0.5, 0.5), 0.0);
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        assert!(AccuracyMatrix::new(vec![vec![0.5, 0.5]]).is_err());
        assert!(AccuracyMatrix::new(vec![vec![1.5]]).is_err());
        assert!(average_accuracy(&AccuracyMatrix::default()).is_err());
    }

    #[test]
    fn csv_leaves_upper_triangle_empty() {
        let csv = m(vec![vec![1.0], vec![0.5, 0.25]]).to_csv();
        assert_eq!(csv, "after_task,task0,task1\n0,1,\n1,0.5,0.25\n");
    }

    #[test]
    fn sample_std() {
        let (mu, sd) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(mu, 2.0);
        assert!((sd - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    proptest! {
        #[test]
        fn entries_in_unit_interval_bound_the_metrics(vals in proptest::collection::vec(0.0f64..=1.0, 10)) {
            let mut rows = Vec::new();
            let mut k = 0;
            for i in 0..4 {
                rows.push(vals[k..k + i + 1].to_vec());
                k += i + 1;
            }
            let r = m(rows);
            let a = average_accuracy(&r).unwrap();
            let f = forgetting(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((-1.0..=1.0).contains(&f));
        }

        #[test]
        fn constant_past_rows_give_zero_forgetting(v in 0.0f64..=1.0, t in 2usize..6) {
            let rows: Vec<Vec<f64>> = (0..t).map(|i| vec![v; i + 1]).collect();
            prop_assert_eq!(forgetting(&m(rows)), Some(0.0));
        }
    }
}
