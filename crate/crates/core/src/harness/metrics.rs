//! Accuracy matrix and derived continual-learning metrics.

use crate::error::{Error, Result};

/// Results of one stream run.
///
/// `acc[t][i]` is the accuracy on the task at stream position `i` after
/// training position `t`; row `t` has `t + 1` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub order_id: String,
    /// Task slot ids in stream order.
    pub task_ids: Vec<usize>,
    pub acc: Vec<Vec<f64>>,
    /// Trainable parameters while training each task.
    pub trainable_params: Vec<usize>,
    pub wall_clock_secs: Vec<f64>,
    pub base_params: usize,
    pub adapter_params: usize,
    pub selector_params: usize,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(method: impl Into<String>, seed: u64, order_id: impl Into<String>, config_digest: impl Into<String>) -> Self {
        MetricsReport {
            method: method.into(),
            seed,
            order_id: order_id.into(),
            task_ids: Vec::new(),
            acc: Vec::new(),
            trainable_params: Vec::new(),
            wall_clock_secs: Vec::new(),
            base_params: 0,
            adapter_params: 0,
            selector_params: 0,
            config_digest: config_digest.into(),
        }
    }

    /// Number of completed tasks.
    pub fn num_tasks(&self) -> usize {
        self.acc.len()
    }

    /// Append the accuracy row for the next task.
    pub fn push_row(&mut self, row: Vec<f64>, trainable: usize, secs: f64) -> Result<()> {
        if row.len() != self.acc.len() + 1 {
            return Err(Error::Validation(format!(
                "accuracy row after task {} must have {} entries, got {}",
                self.acc.len() + 1,
                self.acc.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Validation("accuracy outside [0, 1]".into()));
        }
        self.acc.push(row);
        self.trainable_params.push(trainable);
        self.wall_clock_secs.push(secs);
        Ok(())
    }

    /// Mean accuracy over all tasks after the last task.
    pub fn final_average(&self) -> f64 {
        match self.acc.last() {
            Some(row) => row.iter().sum::<f64>() / row.len() as f64,
            None => 0.0,
        }
    }

    /// `max_t acc[t][i] − acc[N][i]` per task.
    pub fn forgetting(&self) -> Vec<f64> {
        let Some(last) = self.acc.last() else {
            return Vec::new();
        };
        (0..last.len())
            .map(|i| {
                let peak = self.acc[i..].iter().map(|row| row[i]).fold(f64::NEG_INFINITY, f64::max);
                peak - last[i]
            })
            .collect()
    }

    /// Mean forgetting over every task but the last; 0 for one task.
    pub fn mean_forgetting(&self) -> f64 {
        let f = self.forgetting();
        if f.len() < 2 {
            return 0.0;
        }
        f[..f.len() - 1].iter().sum::<f64>() / (f.len() - 1) as f64
    }

    /// Mean accuracy over seen tasks after each task.
    pub fn seen_average(&self) -> Vec<f64> {
        self.acc.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
    }

    /// Trainable parameters while training the last task.
    pub fn final_trainable(&self) -> usize {
        self.trainable_params.last().copied().unwrap_or(0)
    }
}

/// Mean of `f` over reports.
pub fn mean_over<F: Fn(&MetricsReport) -> f64>(reports: &[MetricsReport], f: F) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    reports.iter().map(f).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(rows: &[&[f64]]) -> MetricsReport {
        let mut r = MetricsReport::new("m", 0, "1", "x");
        for row in rows {
            r.push_row(row.to_vec(), 1, 0.0).unwrap();
        }
        r
    }

    #[test]
    fn averages_and_forgetting() {
        let r = report(&[&[0.9], &[0.5, 0.8], &[0.6, 0.7, 1.0]]);
        assert!((r.final_average() - 0.7666666666666667).abs() < 1e-12);
        let f = r.forgetting();
        assert!((f[0] - 0.3).abs() < 1e-12);
        assert!((f[1] - 0.1).abs() < 1e-12);
        assert_eq!(f[2], 0.0);
        assert!((r.mean_forgetting() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let r = report(&[&[0.4]]);
        assert_eq!(r.forgetting(), vec![0.0]);
        assert_eq!(r.mean_forgetting(), 0.0);
    }

    #[test]
    fn rejects_non_triangular_rows() {
        let mut r = report(&[&[0.4]]);
        assert!(r.push_row(vec![0.1], 1, 0.0).is_err());
        assert!(r.push_row(vec![0.1, 1.5], 1, 0.0).is_err());
    }
}
