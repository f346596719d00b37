use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClassIncrementalScenario, LabeledDataset, RehearsalMemory};

/// `(dataset index, incremental label)` pairs for one training phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStream {
    pub samples: Vec<(usize, usize)>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffles with `seed` and cuts into batches of `batch_size` (the last
    /// batch may be smaller).
    pub fn batches(&self, seed: u64, batch_size: usize) -> Vec<Vec<(usize, usize)>> {
        let mut order = self.samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
    }
}

/// Task `t`'s samples followed by every stored exemplar, each exactly once.
pub fn task_loader(
    scenario: &ClassIncrementalScenario,
    t: usize,
    memory: &RehearsalMemory,
    dataset: &LabeledDataset,
) -> TaskStream {
    let mut samples: Vec<(usize, usize)> = scenario.task_indices[t]
        .iter()
        .map(|&i| (i, scenario.incremental_label(dataset.label(i))))
        .collect();
    samples.extend(memory.samples());
    TaskStream { samples }
}
