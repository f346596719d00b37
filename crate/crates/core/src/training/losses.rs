//! Classification, distillation and divergence losses and their weighting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Probability clamp used by every binary cross-entropy term.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weight of the divergence term.
pub const LAMBDA_DIV: f64 = 0.1;

/// Row-major one-hot targets `[labels.len(), classes]`.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} outside {classes} seen classes")));
        }
        out[r * classes + l] = T::one();
    }
    Ok(out)
}

/// Multi-label BCE of sigmoid outputs `probs [B, C]` against (possibly soft)
/// targets over all seen classes, averaged over classes and batch.
pub fn bce_classification_loss<T: Real>(tape: &mut Tape<T>, probs: Var, targets: Vec<T>) -> Result<Var> {
    tape.bce(probs, targets, T::lit(PROB_CLAMP))
}

/// Soft-target BCE between the student's old-class probabilities and the
/// teacher's.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, student_old: Var, teacher: &Tensor<T>) -> Result<Var> {
    if tape.shape(student_old) != teacher.shape() {
        return Err(Error::shape(
            "kd_loss",
            format!("student {:?} vs teacher {:?}", tape.shape(student_old), teacher.shape()),
        ));
    }
    tape.bce(student_old, teacher.data().to_vec(), T::lit(PROB_CLAMP))
}

/// Temperature-scaled softmax distillation on logits, scaled by `τ²`.
pub fn kd_loss_softmax<T: Real>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    temperature: f64,
) -> Result<Var> {
    if tape.shape(student_logits) != teacher_logits.shape() || teacher_logits.ndim() != 2 {
        return Err(Error::shape(
            "kd_loss",
            format!("student {:?} vs teacher {:?}", tape.shape(student_logits), teacher_logits.shape()),
        ));
    }
    let inv = T::lit(1.0 / temperature);
    let cols = teacher_logits.shape()[1];
    let scaled: Vec<T> = teacher_logits.data().iter().map(|&v| v * inv).collect();
    let target = crate::tensor::kernels::softmax(&scaled, scaled.len() / cols.max(1), cols, 1);
    let s = tape.scale(student_logits, inv);
    let ce = tape.soft_cross_entropy(s, target)?;
    Ok(tape.scale(ce, T::lit(temperature * temperature)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KdKind {
    /// BCE on sigmoid probabilities, temperature 1.
    #[default]
    SigmoidBce,
    /// Softmax distillation with the given temperature (times 100).
    SoftmaxTemperature { centi_temperature: u32 },
}

/// Folds class targets `[B, C]` onto the divergence head's outputs:
/// current-task classes keep their within-task index, everything older
/// lands on the extra last column.
pub fn divergence_targets<T: Real>(class_targets: &[T], classes: usize, offset: usize, current: usize) -> Result<Vec<T>> {
    if classes == 0 || !class_targets.len().is_multiple_of(classes) || offset + current > classes {
        return Err(Error::shape(
            "divergence_targets",
            format!("{} targets, {classes} classes, task range {offset}..{}", class_targets.len(), offset + current),
        ));
    }
    let mut out = Vec::with_capacity(class_targets.len() / classes * (current + 1));
    for row in class_targets.chunks(classes) {
        out.extend_from_slice(&row[offset..offset + current]);
        let old: T = row[..offset].iter().copied().sum::<T>() + row[offset + current..].iter().copied().sum::<T>();
        out.push(old);
    }
    Ok(out)
}

/// Softmax cross-entropy of the divergence head over `|C_t| + 1` outputs.
/// Only defined for tasks after the first (`task >= 1`, 0-based).
pub fn divergence_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    class_targets: &[T],
    classes: usize,
    offset: usize,
    current: usize,
    task: usize,
) -> Result<Var> {
    if task == 0 {
        return Err(Error::invalid("divergence loss needs at least one previous task"));
    }
    let targets = divergence_targets(class_targets, classes, offset, current)?;
    tape.soft_cross_entropy(logits, targets)
}

/// Fraction of old classes among all seen classes at task `task` (0-based).
pub fn alpha_schedule(class_counts: &[usize], task: usize) -> f64 {
    let old: usize = class_counts[..task].iter().sum();
    let all: usize = old + class_counts[task];
    if all == 0 {
        0.0
    } else {
        old as f64 / all as f64
    }
}

/// Loss terms of one step; absent terms are simply skipped.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub clf: Var,
    pub kd: Option<Var>,
    pub div: Option<Var>,
}

/// `(1 − α)·L_clf + α·L_kd + λ·L_div`. With neither optional term the
/// classification loss is returned untouched.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: LossTerms, alpha: f64, lambda: f64) -> Result<Var> {
    if terms.kd.is_none() && terms.div.is_none() {
        return Ok(terms.clf);
    }
    let mut total = match terms.kd {
        Some(kd) => {
            let c = tape.scale(terms.clf, T::lit(1.0 - alpha));
            let k = tape.scale(kd, T::lit(alpha));
            tape.add(c, k)?
        }
        None => terms.clf,
    };
    if let Some(div) = terms.div {
        let d = tape.scale(div, T::lit(lambda));
        total = tape.add(total, d)?;
    }
    Ok(total)
}
