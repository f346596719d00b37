use std::collections::BTreeMap;

use super::{ClassIncrementalScenario, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::DyToxModel;
use crate::tensor::Real;

/// Squared distances closer than this count as ties.
const TIE_TOLERANCE: f64 = 1e-12;

/// Greedy herding: repeatedly picks the sample that keeps the running mean
/// of the selected features closest to the class mean.
///
/// `features` holds `n` rows of `dim` values (expected L2-normalised). At
/// step `k` the pick minimises `‖μ − (φ(x) + Σ_chosen φ) / k‖`; ties (up to
/// rounding) go to the lowest index and no sample is chosen twice. The result is in
/// selection order, so any prefix is itself a herding selection.
pub fn herding_select(features: &[f64], dim: usize, m: usize) -> Result<Vec<usize>> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::shape("herding_select", format!("{} values for dim {dim}", features.len())));
    }
    let n = features.len() / dim;
    if m > n {
        return Err(Error::invalid(format!("cannot select {m} exemplars from {n} samples")));
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut mu = vec![0.0; dim];
    for i in 0..n {
        mu.iter_mut().zip(row(i)).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);

    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut acc = vec![0.0; dim];
    for k in 1..=m {
        let mut best = (usize::MAX, f64::INFINITY);
        for i in (0..n).filter(|&i| !taken[i]) {
            let dist: f64 = row(i)
                .iter()
                .zip(&acc)
                .zip(&mu)
                .map(|((f, a), u)| {
                    let d = u - (f + a) / k as f64;
                    d * d
                })
                .sum();
            if dist < best.1 - TIE_TOLERANCE {
                best = (i, dist);
            }
        }
        taken[best.0] = true;
        acc.iter_mut().zip(row(best.0)).for_each(|(a, f)| *a += f);
        chosen.push(best.0);
    }
    Ok(chosen)
}

pub fn l2_normalize(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Exemplar store with a fixed total budget shared by all seen classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RehearsalMemory {
    pub budget: usize,
    /// Incremental label → dataset indices in herding order.
    per_class: BTreeMap<usize, Vec<usize>>,
}

impl RehearsalMemory {
    pub fn new(budget: usize) -> Self {
        RehearsalMemory {
            budget,
            per_class: BTreeMap::new(),
        }
    }

    pub fn per_class_budget(&self, seen_classes: usize) -> usize {
        self.budget.checked_div(seen_classes).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.per_class.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    /// `(dataset index, incremental label)` for every exemplar, grouped by class.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.per_class
            .iter()
            .flat_map(|(&c, idx)| idx.iter().map(move |&i| (i, c)))
            .collect()
    }

    /// Smallest per-class count over stored classes.
    pub fn min_class_len(&self) -> usize {
        self.per_class.values().map(Vec::len).min().unwrap_or(0)
    }

    /// Keeps the first `m` exemplars of every class.
    pub fn truncate(&mut self, m: usize) {
        for v in self.per_class.values_mut() {
            v.truncate(m);
        }
    }

    /// Stores exemplars for one class from precomputed features.
    pub fn insert_class(&mut self, label: usize, indices: &[usize], features: &[f64], dim: usize, m: usize) -> Result<()> {
        let pick = herding_select(features, dim, m.min(indices.len()))?;
        self.per_class.insert(label, pick.into_iter().map(|p| indices[p]).collect());
        Ok(())
    }

    /// Adds exemplars for the classes of task `t` and shrinks older classes
    /// to the new per-class budget.
    ///
    /// Features are the newest task embedding of each un-augmented image,
    /// L2-normalised, computed in a single pass. Old classes are never
    /// re-herded.
    pub fn update<T: Real>(
        &mut self,
        model: &DyToxModel<T>,
        dataset: &LabeledDataset,
        scenario: &ClassIncrementalScenario,
        t: usize,
        batch_size: usize,
    ) -> Result<()> {
        let seen = scenario.class_offset(t) + scenario.tasks[t].len();
        let m = self.per_class_budget(seen);
        self.truncate(m);
        if m == 0 {
            self.per_class.clear();
            return Ok(());
        }
        let dim = model.config.embed_dim;
        for &class in &scenario.tasks[t] {
            let indices = dataset.indices_of(class);
            let mut features = Vec::with_capacity(indices.len() * dim);
            for chunk in indices.chunks(batch_size.max(1)) {
                let imgs = dataset.batch::<T>(chunk)?;
                let e = model.newest_embedding(&imgs)?;
                for row in e.data().chunks(dim) {
                    let mut r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    l2_normalize(&mut r);
                    features.extend(r);
                }
            }
            self.insert_class(scenario.incremental_label(class), &indices, &features, dim, m)?;
        }
        Ok(())
    }
}
