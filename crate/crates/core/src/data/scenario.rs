use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// An ordered partition of the dataset's classes into equally sized tasks.
///
/// Classes are renumbered in task order: the `k`-th class of the permuted
/// order gets incremental label `k`, so task `t` owns a contiguous range of
/// model outputs. Tasks are indexed from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassIncrementalScenario {
    /// Original class ids in presentation order.
    pub class_order: Vec<usize>,
    /// Original class ids of each task.
    pub tasks: Vec<Vec<usize>>,
    /// Dataset indices of each task's samples, in dataset order.
    pub task_indices: Vec<Vec<usize>>,
    pub seed: u64,
    incremental: Vec<usize>,
}

pub fn build_scenario(dataset: &LabeledDataset, num_steps: usize, seed: u64) -> Result<ClassIncrementalScenario> {
    let classes = dataset.num_classes();
    if num_steps == 0 || !classes.is_multiple_of(num_steps) {
        return Err(Error::invalid(format!(
            "{classes} classes cannot be split into {num_steps} equal tasks"
        )));
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let per = classes / num_steps;
    let tasks: Vec<Vec<usize>> = order.chunks(per).map(|c| c.to_vec()).collect();
    let mut incremental = vec![0; classes];
    for (k, &c) in order.iter().enumerate() {
        incremental[c] = k;
    }
    let mut scenario = ClassIncrementalScenario {
        class_order: order,
        tasks,
        task_indices: Vec::new(),
        seed,
        incremental,
    };
    scenario.task_indices = (0..num_steps).map(|t| scenario.indices_for(dataset, t)).collect();
    Ok(scenario)
}

impl ClassIncrementalScenario {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    /// Incremental label of an original class id.
    pub fn incremental_label(&self, class: usize) -> usize {
        self.incremental[class]
    }

    /// First incremental label of task `t`.
    pub fn class_offset(&self, t: usize) -> usize {
        self.tasks[..t].iter().map(Vec::len).sum()
    }

    /// Task owning an incremental label.
    pub fn task_of(&self, label: usize) -> usize {
        let mut acc = 0;
        for (t, c) in self.tasks.iter().enumerate() {
            acc += c.len();
            if label < acc {
                return t;
            }
        }
        self.tasks.len()
    }

    /// Samples of task `t` in another split of the same dataset (e.g. test).
    pub fn indices_for(&self, dataset: &LabeledDataset, t: usize) -> Vec<usize> {
        let mut member = vec![false; self.incremental.len()];
        for &c in &self.tasks[t] {
            member[c] = true;
        }
        (0..dataset.len())
            .filter(|&i| member.get(dataset.label(i)).copied().unwrap_or(false))
            .collect()
    }
}
