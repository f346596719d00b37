//! Continual evaluation: accuracy matrix, average/last accuracy, forgetting
//! and overhead accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{task_param_delta, DyToxModel, ParamReport};
use crate::tensor::{Real, Tensor};

/// Exact-match fraction.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `a[k][j]`: accuracy on task `j`'s test split after learning step `k`,
/// for `j ≤ k`, plus the pooled accuracy over all seen classes per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Steps recorded so far.
    pub fn steps(&self) -> usize {
        self.rows.len()
    }

    /// Appends step `k = steps()`; `per_task` must hold `k + 1` entries.
    pub fn push_step(&mut self, per_task: Vec<f64>, pooled: f64) -> Result<()> {
        if per_task.len() != self.rows.len() + 1 {
            return Err(Error::invalid(format!(
                "step {} needs {} task accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                per_task.len()
            )));
        }
        if per_task.iter().chain([&pooled]).any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("accuracies must lie in [0, 1]"));
        }
        self.rows.push(per_task);
        self.pooled.push(pooled);
        Ok(())
    }

    pub fn get(&self, step: usize, task: usize) -> Option<f64> {
        self.rows.get(step).and_then(|r| r.get(task)).copied()
    }

    fn check(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::invalid("accuracy matrix is empty"));
        }
        let complete = self.rows.iter().enumerate().all(|(k, r)| r.len() == k + 1) && self.pooled.len() == self.rows.len();
        if !complete {
            return Err(Error::invalid("accuracy matrix is incomplete"));
        }
        Ok(())
    }
}

/// Mean over steps of the pooled seen-class accuracy.
pub fn avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.check()?;
    Ok(m.pooled.iter().sum::<f64>() / m.pooled.len() as f64)
}

/// Pooled seen-class accuracy after the final step.
pub fn last_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.check()?;
    Ok(*m.pooled.last().expect("non-empty"))
}

/// Mean over tasks `j < T` of `max_{l<T} a[l][j] − a[T][j]`. Negative
/// values mean the task improved.
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    m.check()?;
    let t = m.rows.len() - 1;
    if t == 0 {
        return Err(Error::invalid("forgetting needs at least two steps"));
    }
    let total: f64 = (0..t)
        .map(|j| {
            let best = (j..t).map(|l| m.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            best - m.rows[t][j]
        })
        .sum();
    Ok(total / t as f64)
}

/// Cost of adding one task, relative to the model it is added to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub tasks: usize,
    pub params_total: usize,
    /// Parameters added by the newest task's token and classifier.
    pub params_task_delta: usize,
    pub params_task_ratio: f64,
    /// Parameters added by the newest task token alone.
    pub token_delta: usize,
    pub token_ratio: f64,
    pub flops_total: u64,
    pub flops_task_delta: u64,
    /// `flops_task_delta / flops_total(1)`
    pub flops_task_ratio: f64,
}

/// Parameter and MAC overhead of the model's latest task.
pub fn overhead_report<T: Real>(model: &DyToxModel<T>) -> OverheadReport {
    let params: ParamReport = model.count_params();
    let tasks = model.num_tasks();
    let d = model.config.embed_dim;
    let newest = model.class_counts().last().copied().unwrap_or(0);
    let delta = if tasks == 0 { 0 } else { task_param_delta(d, newest) };
    let token_delta = if model.options.token_expansion || tasks <= 1 { d } else { 0 };
    let flops = model.count_flops(tasks.max(1));
    let base = model.count_flops(1).total;
    OverheadReport {
        tasks,
        params_total: params.total,
        params_task_delta: delta,
        params_task_ratio: delta as f64 / params.total as f64,
        token_delta,
        token_ratio: token_delta as f64 / params.total as f64,
        flops_total: flops.total,
        flops_task_delta: flops.tab_per_task,
        flops_task_ratio: flops.tab_per_task as f64 / base as f64,
    }
}

/// Seconds per forward pass over `tasks` tasks, median of `reps` runs.
pub fn time_forward<T: Real>(model: &DyToxModel<T>, images: &Tensor<T>, tasks: usize, reps: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        model.forward_all(images, tasks)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Measured forward time with `tasks` tasks relative to one task, minus one.
pub fn wall_time_overhead<T: Real>(model: &DyToxModel<T>, images: &Tensor<T>, tasks: usize, reps: usize) -> Result<f64> {
    let one = time_forward(model, images, 1, reps)?;
    let many = time_forward(model, images, tasks, reps)?;
    Ok(many / one - 1.0)
}

/// Final summary of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_acc: f64,
    pub last_acc: f64,
    /// Absent for single-step runs.
    pub forgetting: Option<f64>,
    pub params_total: usize,
    pub params_per_task_delta: Vec<usize>,
    pub flops_total: Vec<u64>,
    pub matrix: AccuracyMatrix,
    pub epoch_losses: Vec<Vec<f64>>,
    pub memory_sizes: Vec<usize>,
    pub loss_terms: Vec<String>,
}

impl MetricsReport {
    /// Fills the accuracy summaries from `matrix`.
    pub fn from_matrix(matrix: AccuracyMatrix) -> Result<Self> {
        Ok(MetricsReport {
            avg_acc: avg_accuracy(&matrix)?,
            last_acc: last_accuracy(&matrix)?,
            forgetting: if matrix.steps() >= 2 { Some(forgetting(&matrix)?) } else { None },
            matrix,
            ..MetricsReport::default()
        })
    }
}
