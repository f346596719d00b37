//! Per-task optimisation loop and balanced finetuning.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::freeze::{apply_freeze_policy, FreezeMask, Phase};
use super::losses::{
    alpha_schedule, bce_classification_loss, divergence_loss, kd_loss, kd_loss_softmax, one_hot, total_loss, KdKind,
    LossTerms, LAMBDA_DIV,
};
use super::mixup::{mixup, MIXUP_ALPHA};
use crate::data::{LabeledDataset, RehearsalMemory, TaskStream};
use crate::error::{Error, Result};
use crate::model::{DyToxModel, Module};
use crate::tensor::{AdamConfig, AdamState, DecayKind, LrSchedule, Real, Tape, Tensor};

/// Optimisation schedule shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs_per_task: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    /// Set from the experiment's global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_per_task: 500,
            warmup_epochs: 5,
            base_lr: 5e-4,
            finetune_epochs: 20,
            finetune_lr: 5e-5,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        if self.epochs_per_task == 0 {
            return Err(Error::config(key("epochs_per_task"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(key("base_lr"), "must be finite and non-negative"));
        }
        if !(self.finetune_lr >= 0.0 && self.finetune_lr.is_finite()) {
            return Err(Error::config(key("finetune_lr"), "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs_per_task,
            decay: DecayKind::Cosine,
        }
    }
}

/// Which loss terms and augmentations are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub kd: bool,
    pub kd_kind: KdKind,
    pub divergence: bool,
    pub lambda_div: f64,
    pub finetune: bool,
    /// Also freezes the tokenizer, the self-attention stack and the
    /// task-attention block during the main phase.
    pub freeze_shared: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            mixup: false,
            mixup_alpha: MIXUP_ALPHA,
            kd: true,
            kd_kind: KdKind::SigmoidBce,
            divergence: true,
            lambda_div: LAMBDA_DIV,
            finetune: true,
            freeze_shared: false,
        }
    }
}

/// Frozen copy of the model as it was after the previous task.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot<T: Real> {
    model: DyToxModel<T>,
}

impl<T: Real> TeacherSnapshot<T> {
    pub fn new(model: &DyToxModel<T>) -> Self {
        let mut model = model.clone();
        model.drop_divergence();
        let all = model.params("").into_iter().map(|(n, _)| n).collect();
        model.set_frozen(&all);
        TeacherSnapshot { model }
    }

    pub fn model(&self) -> &DyToxModel<T> {
        &self.model
    }

    /// Output width `Σ |C_i|` over the teacher's tasks.
    pub fn width(&self) -> usize {
        self.model.num_classes()
    }

    /// Logits and probabilities over every class the teacher knows.
    pub fn outputs(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::inference();
        let out = self.model.forward(&mut tape, images, self.model.num_tasks(), false)?;
        tape.check_finite()?;
        Ok((tape.to_tensor(out.logits), tape.to_tensor(out.probs)))
    }
}

/// Mean loss per epoch of each phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub epoch_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub steps: u64,
    pub frozen_main: usize,
    pub frozen_finetune: usize,
}

/// Per-step state shared by both phases.
struct StepContext<'a, T: Real> {
    dataset: &'a LabeledDataset,
    teacher: Option<&'a TeacherSnapshot<T>>,
    options: TrainOptions,
    phase: Phase,
    task: usize,
}

fn epoch_rng(seed: u64, task: usize, epoch: usize, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = match phase {
        Phase::Main => 0,
        Phase::Finetune => 1,
    };
    rng.set_stream(((task as u64) << 32) | (p << 31) | epoch as u64);
    rng
}

fn train_step<T: Real>(
    model: &mut DyToxModel<T>,
    adam: &mut AdamState<T>,
    ctx: &StepContext<'_, T>,
    batch: &[(usize, usize)],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = ctx.task;
    let seen = model.num_classes();
    let indices: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
    let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();
    let mut images = ctx.dataset.batch::<T>(&indices)?;
    let mut targets = one_hot::<T>(&labels, seen)?;
    if ctx.options.mixup && ctx.phase == Phase::Main && batch.len() >= 2 {
        let mixed = mixup(&images, &targets, ctx.options.mixup_alpha, rng)?;
        images = mixed.images;
        targets = mixed.targets;
    }

    let use_div = ctx.options.divergence && ctx.phase == Phase::Main && t > 0 && model.divergence.is_some();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &images, t + 1, use_div)?;
    let clf = bce_classification_loss(&mut tape, out.probs, targets.clone())?;

    let teacher = ctx.teacher.filter(|_| ctx.options.kd && t > 0);
    let (kd, alpha) = match teacher {
        Some(teacher) => {
            let old = teacher.width();
            let (t_logits, t_probs) = teacher.outputs(&images)?;
            let term = match ctx.options.kd_kind {
                KdKind::SigmoidBce => {
                    let student = tape.narrow(out.probs, 1, 0, old)?;
                    kd_loss(&mut tape, student, &t_probs)?
                }
                KdKind::SoftmaxTemperature { centi_temperature } => {
                    let student = tape.narrow(out.logits, 1, 0, old)?;
                    kd_loss_softmax(&mut tape, student, &t_logits, centi_temperature as f64 / 100.0)?
                }
            };
            (Some(term), alpha_schedule(model.class_counts(), t))
        }
        None => (None, 0.0),
    };
    let div = match out.divergence {
        Some(logits) => {
            let counts = model.class_counts();
            let offset: usize = counts[..t].iter().sum();
            Some(divergence_loss(&mut tape, logits, &targets, seen, offset, counts[t], t)?)
        }
        None => None,
    };
    let loss = total_loss(&mut tape, LossTerms { clf, kd, div }, alpha, ctx.options.lambda_div)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item()?.as_f64();

    model.zero_grads();
    model.accumulate_grads(&grads)?;
    let mut params = model.params_mut("");
    adam.step(params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)), lr)?;
    Ok(value)
}

fn run_phase<T: Real>(
    model: &mut DyToxModel<T>,
    ctx: &StepContext<'_, T>,
    stream: &TaskStream,
    schedule: &TrainSchedule,
    epochs: usize,
    lr: impl Fn(usize) -> f64,
    report: &mut TaskReport,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut rng = epoch_rng(schedule.seed, ctx.task, epoch, ctx.phase);
        let batches = stream.batches(rng.next_u64(), schedule.batch_size);
        let rate = lr(epoch);
        let mut sum = 0.0;
        for batch in &batches {
            sum += train_step(model, &mut adam, ctx, batch, rate, &mut rng)?;
            report.steps += 1;
        }
        losses.push(sum / batches.len().max(1) as f64);
    }
    model.zero_grads();
    Ok(losses)
}

/// Class-balanced finetuning set: every stored class keeps its first `k`
/// exemplars and every class of the current task is subsampled to `k`
/// samples, where `k` is the smallest per-class count available.
pub fn balanced_stream(stream: &TaskStream, memory: &RehearsalMemory, seed: u64) -> TaskStream {
    let stored: std::collections::BTreeSet<usize> = memory.classes().map(|(c, _)| c).collect();
    let mut fresh: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &(i, l) in &stream.samples {
        if !stored.contains(&l) {
            fresh.entry(l).or_default().push(i);
        }
    }
    let k = fresh
        .values()
        .map(Vec::len)
        .chain(std::iter::once(memory.min_class_len()))
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (c, idx) in memory.classes() {
        samples.extend(idx.iter().take(k).map(|&i| (i, c)));
    }
    for (c, mut idx) in fresh {
        idx.shuffle(&mut rng);
        samples.extend(idx.into_iter().take(k).map(|i| (i, c)));
    }
    TaskStream { samples }
}

/// Everything `train_task` needs besides the model.
pub struct TaskInputs<'a, T: Real> {
    pub dataset: &'a LabeledDataset,
    pub stream: &'a TaskStream,
    pub memory: &'a RehearsalMemory,
    pub teacher: Option<&'a TeacherSnapshot<T>>,
    pub schedule: &'a TrainSchedule,
    pub options: TrainOptions,
}

/// Trains the newest task (0-based index `num_tasks − 1`): the main phase
/// over new data plus rehearsal, then balanced finetuning for later tasks
/// when enabled. Returns the report and the snapshot to distil from next.
pub fn train_task<T: Real>(model: &mut DyToxModel<T>, inputs: TaskInputs<'_, T>) -> Result<(TaskReport, TeacherSnapshot<T>)> {
    let t = model
        .num_tasks()
        .checked_sub(1)
        .ok_or_else(|| Error::invalid("expand_task must be called before training"))?;
    if inputs.stream.is_empty() {
        return Err(Error::Data(format!("task {t} has no training samples")));
    }
    if t > 0 && inputs.options.kd && inputs.teacher.is_none() {
        return Err(Error::invalid("distillation needs a teacher snapshot"));
    }
    let mut report = TaskReport {
        task: t,
        ..TaskReport::default()
    };

    let mut mask = apply_freeze_policy(model, Phase::Main, t);
    if inputs.options.freeze_shared {
        mask.names.extend(
            model
                .params("")
                .into_iter()
                .map(|(n, _)| n)
                .filter(|n| matches!(n.split('.').next(), Some("tokenizer" | "sabs" | "tab"))),
        );
    }
    report.frozen_main = mask.len();
    model.set_frozen(&mask.names);
    let ctx = StepContext {
        dataset: inputs.dataset,
        teacher: inputs.teacher,
        options: inputs.options,
        phase: Phase::Main,
        task: t,
    };
    let lr = inputs.schedule.lr_schedule();
    report.epoch_losses = run_phase(
        model,
        &ctx,
        inputs.stream,
        inputs.schedule,
        inputs.schedule.epochs_per_task,
        |e| lr.lr(e),
        &mut report,
    )?;

    if t > 0 && inputs.options.finetune && inputs.schedule.finetune_epochs > 0 && !inputs.memory.is_empty() {
        report.finetune_losses = finetune_balanced(model, &inputs, &mut report)?;
    }
    model.set_frozen(&FreezeMask::default().names);
    Ok((report, TeacherSnapshot::new(model)))
}

/// Balanced finetuning with the encoder frozen, at a constant rate.
pub fn finetune_balanced<T: Real>(
    model: &mut DyToxModel<T>,
    inputs: &TaskInputs<'_, T>,
    report: &mut TaskReport,
) -> Result<Vec<f64>> {
    let t = model.num_tasks().saturating_sub(1);
    if t == 0 {
        return Err(Error::invalid("balanced finetuning needs a previous task"));
    }
    let stream = balanced_stream(inputs.stream, inputs.memory, inputs.schedule.seed ^ t as u64);
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let mask = apply_freeze_policy(model, Phase::Finetune, t);
    report.frozen_finetune = mask.len();
    model.set_frozen(&mask.names);
    let ctx = StepContext {
        dataset: inputs.dataset,
        teacher: inputs.teacher,
        options: inputs.options,
        phase: Phase::Finetune,
        task: t,
    };
    let rate = inputs.schedule.finetune_lr;
    run_phase(model, &ctx, &stream, inputs.schedule, inputs.schedule.finetune_epochs, |_| rate, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_scenario, gen_synthetic, task_loader, SyntheticBlobConfig};
    use crate::model::{ModelConfig, ModelOptions};

    fn setup() -> (LabeledDataset, crate::data::ClassIncrementalScenario, DyToxModel<f32>, ChaCha8Rng) {
        let data = gen_synthetic(&SyntheticBlobConfig {
            num_classes: 4,
            image_size: 8,
            train_per_class: 8,
            ..SyntheticBlobConfig::default()
        })
        .unwrap();
        let scenario = build_scenario(&data, 2, 0).unwrap();
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            sab_count: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DyToxModel::new(cfg, ModelOptions::default(), &mut rng).unwrap();
        (data, scenario, model, rng)
    }

    fn schedule(epochs: usize, lr: f64) -> TrainSchedule {
        TrainSchedule {
            epochs_per_task: epochs,
            warmup_epochs: 0,
            base_lr: lr,
            finetune_epochs: 2,
            finetune_lr: lr,
            batch_size: 8,
            seed: 3,
        }
    }

    fn snapshot(m: &DyToxModel<f32>) -> Vec<(String, Vec<f32>)> {
        m.params("").into_iter().map(|(n, t)| (n, t.data().to_vec())).collect()
    }

    #[test]
    fn loss_decreases_on_first_task() {
        let (data, scenario, mut model, mut rng) = setup();
        model.expand_task(2, &mut rng).unwrap();
        let memory = RehearsalMemory::new(8);
        let stream = task_loader(&scenario, 0, &memory, &data);
        let sched = schedule(5, 1e-3);
        let (report, _) = train_task(
            &mut model,
            TaskInputs {
                dataset: &data,
                stream: &stream,
                memory: &memory,
                teacher: None,
                schedule: &sched,
                options: TrainOptions::default(),
            },
        )
        .unwrap();
        assert_eq!(report.epoch_losses.len(), 5);
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.epoch_losses);
        }
    }

    #[test]
    fn zero_lr_leaves_model_unchanged_and_teacher_is_frozen() {
        let (data, scenario, mut model, mut rng) = setup();
        model.expand_task(2, &mut rng).unwrap();
        let mut memory = RehearsalMemory::new(8);
        let stream = task_loader(&scenario, 0, &memory, &data);
        let sched = schedule(2, 0.0);
        let before = snapshot(&model);
        let inputs = TaskInputs {
            dataset: &data,
            stream: &stream,
            memory: &memory,
            teacher: None,
            schedule: &sched,
            options: TrainOptions::default(),
        };
        let (_, teacher) = train_task(&mut model, inputs).unwrap();
        assert_eq!(snapshot(&model), before);

        memory.update(&model, &data, &scenario, 0, 8).unwrap();
        let probe = data.batch::<f32>(&[0, 1, 2]).unwrap();
        let teacher_out = teacher.outputs(&probe).unwrap().1;
        model.expand_task(2, &mut rng).unwrap();
        let stream = task_loader(&scenario, 1, &memory, &data);
        let sched = schedule(2, 1e-3);
        train_task(
            &mut model,
            TaskInputs {
                dataset: &data,
                stream: &stream,
                memory: &memory,
                teacher: Some(&teacher),
                schedule: &sched,
                options: TrainOptions::default(),
            },
        )
        .unwrap();
        assert_eq!(teacher.outputs(&probe).unwrap().1, teacher_out);
    }

    #[test]
    fn balanced_set_is_balanced() {
        let (data, scenario, mut model, mut rng) = setup();
        model.expand_task(2, &mut rng).unwrap();
        let mut memory = RehearsalMemory::new(6);
        memory.update(&model, &data, &scenario, 0, 8).unwrap();
        let stream = task_loader(&scenario, 1, &memory, &data);
        let balanced = balanced_stream(&stream, &memory, 0);
        let mut counts = std::collections::BTreeMap::new();
        for &(_, l) in &balanced.samples {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 3), "{counts:?}");
    }

    #[test]
    fn finetune_keeps_encoder_and_old_heads_move() {
        let (data, scenario, mut model, mut rng) = setup();
        model.expand_task(2, &mut rng).unwrap();
        let mut memory = RehearsalMemory::new(8);
        let sched = schedule(1, 1e-3);
        let stream = task_loader(&scenario, 0, &memory, &data);
        let (_, teacher) = train_task(
            &mut model,
            TaskInputs {
                dataset: &data,
                stream: &stream,
                memory: &memory,
                teacher: None,
                schedule: &sched,
                options: TrainOptions::default(),
            },
        )
        .unwrap();
        memory.update(&model, &data, &scenario, 0, 8).unwrap();
        model.expand_task(2, &mut rng).unwrap();
        let stream = task_loader(&scenario, 1, &memory, &data);
        let main_only = TrainSchedule {
            finetune_epochs: 0,
            ..sched.clone()
        };
        let mut reference = model.clone();
        let inputs = TaskInputs {
            dataset: &data,
            stream: &stream,
            memory: &memory,
            teacher: Some(&teacher),
            schedule: &main_only,
            options: TrainOptions::default(),
        };
        train_task(&mut reference, inputs).unwrap();
        let inputs = TaskInputs {
            dataset: &data,
            stream: &stream,
            memory: &memory,
            teacher: Some(&teacher),
            schedule: &sched,
            options: TrainOptions::default(),
        };
        let (report, _) = train_task(&mut model, inputs).unwrap();
        assert_eq!(report.finetune_losses.len(), 2);
        let after_main: std::collections::BTreeMap<_, _> = snapshot(&reference).into_iter().collect();
        for (name, values) in snapshot(&model) {
            if name.starts_with("sabs.") || name.starts_with("tokenizer.") {
                assert_eq!(after_main[&name], values, "{name}");
            }
        }
        let final_head = snapshot(&model).into_iter().find(|(n, _)| n == "heads.0.linear.weight").unwrap().1;
        assert_ne!(after_main["heads.0.linear.weight"], final_head);
    }

    #[test]
    fn empty_stream_is_rejected() {
        let (data, _, mut model, mut rng) = setup();
        model.expand_task(2, &mut rng).unwrap();
        let memory = RehearsalMemory::new(0);
        let sched = schedule(1, 1e-3);
        let r = train_task(
            &mut model,
            TaskInputs {
                dataset: &data,
                stream: &TaskStream::default(),
                memory: &memory,
                teacher: None,
                schedule: &sched,
                options: TrainOptions::default(),
            },
        );
        assert!(r.is_err());
    }
}
