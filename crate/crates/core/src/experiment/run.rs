use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{DatasetSpec, ExperimentConfig};
use super::emit::{emit_metrics, write_json};
use crate::data::{
    build_scenario, gen_synthetic_split, load_cifar100_binary, task_loader, ClassIncrementalScenario, LabeledDataset,
    RehearsalMemory, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{overhead_report, wall_time_overhead, AccuracyMatrix, MetricsReport};
use crate::model::DyToxModel;
use crate::training::{train_task, TaskInputs, TaskReport, TeacherSnapshot};

pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const TIMINGS_FILE: &str = "timings.json";

/// Wall-clock measurements, kept apart from the deterministic metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: Vec<f64>,
    pub seconds_per_epoch: Vec<f64>,
    /// Forward time with all seen tasks relative to one task, minus one.
    pub forward_overhead: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub timings: Timings,
    pub model: DyToxModel<f32>,
    pub memory: RehearsalMemory,
    pub scenario: ClassIncrementalScenario,
    pub task_reports: Vec<TaskReport>,
}

/// Training and test splits.
pub fn load_datasets(spec: &DatasetSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    match spec {
        DatasetSpec::Synthetic(s) => Ok((gen_synthetic_split(s, Split::Train)?, gen_synthetic_split(s, Split::Test)?)),
        DatasetSpec::Cifar100 { train, test } => Ok((load_cifar100_binary(train)?, load_cifar100_binary(test)?)),
    }
}

/// Accuracy on each of the first `tasks` tasks' test samples and pooled over
/// all of them, with predictions over every class the model knows.
pub fn evaluate(
    model: &DyToxModel<f32>,
    test: &LabeledDataset,
    scenario: &ClassIncrementalScenario,
    tasks: usize,
    batch_size: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut per_task = Vec::with_capacity(tasks);
    let (mut hits, mut total) = (0usize, 0usize);
    for j in 0..tasks {
        let indices = scenario.indices_for(test, j);
        if indices.is_empty() {
            return Err(Error::Data(format!("task {j} has no test samples")));
        }
        let mut task_hits = 0;
        for chunk in indices.chunks(batch_size.max(1)) {
            let preds = model.predict(&test.batch::<f32>(chunk)?)?;
            task_hits += preds
                .iter()
                .zip(chunk)
                .filter(|(&p, &i)| p == scenario.incremental_label(test.label(i)))
                .count();
        }
        per_task.push(task_hits as f64 / indices.len() as f64);
        hits += task_hits;
        total += indices.len();
    }
    Ok((per_task, hits as f64 / total as f64))
}

fn active_terms(cfg: &ExperimentConfig) -> Vec<String> {
    let mut terms = vec!["classification".to_string()];
    if cfg.toggles.kd {
        terms.push("distillation".into());
    }
    if cfg.toggles.divergence {
        terms.push("divergence".into());
    }
    if cfg.toggles.mixup {
        terms.push("mixup".into());
    }
    if cfg.memory_size > 0 {
        terms.push("rehearsal".into());
    }
    if cfg.toggles.finetune {
        terms.push("balanced_finetune".into());
    }
    terms
}

/// Runs the whole class-incremental pipeline and writes metrics after every
/// step plus a final checkpoint into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_datasets(&cfg.dataset)?;
    let scenario = build_scenario(&train, cfg.scenario.num_steps, cfg.scenario.class_order_seed)?;
    let schedule = cfg.train_schedule();
    let options = cfg.train_options();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DyToxModel::<f32>::new(cfg.model.clone(), cfg.model_options(), &mut rng)?;
    let mut memory = RehearsalMemory::new(cfg.memory_size);
    let mut teacher: Option<TeacherSnapshot<f32>> = None;
    let mut matrix = AccuracyMatrix::new();
    let mut report = MetricsReport {
        loss_terms: active_terms(cfg),
        ..MetricsReport::default()
    };
    let mut timings = Timings::default();
    let mut task_reports = Vec::new();
    std::fs::create_dir_all(&cfg.output_dir)?;

    let probe_len = test.len().min(16);
    let probe = test.batch::<f32>(&(0..probe_len).collect::<Vec<_>>())?;

    for (t, &classes) in scenario.class_counts().iter().enumerate() {
        model.expand_task(classes, &mut rng)?;
        let stream = task_loader(&scenario, t, &memory, &train);
        let start = Instant::now();
        let (task_report, snapshot) = train_task(
            &mut model,
            TaskInputs {
                dataset: &train,
                stream: &stream,
                memory: &memory,
                teacher: teacher.as_ref(),
                schedule: &schedule,
                options,
            },
        )?;
        let elapsed = start.elapsed().as_secs_f64();
        timings.train_seconds.push(elapsed);
        timings
            .seconds_per_epoch
            .push(elapsed / (schedule.epochs_per_task + schedule.finetune_epochs * usize::from(t > 0)).max(1) as f64);
        teacher = Some(snapshot);
        model.drop_divergence();

        if cfg.memory_size > 0 {
            memory.update(&model, &train, &scenario, t, cfg.eval_batch_size)?;
        }
        if memory.len() > cfg.memory_size {
            return Err(Error::Data(format!("memory holds {} samples over budget {}", memory.len(), cfg.memory_size)));
        }

        let (per_task, pooled) = evaluate(&model, &test, &scenario, t + 1, cfg.eval_batch_size)?;
        matrix.push_step(per_task, pooled)?;
        let overhead = overhead_report(&model);
        report.params_total = overhead.params_total;
        report.params_per_task_delta.push(overhead.params_task_delta);
        report.flops_total.push(overhead.flops_total);
        report.epoch_losses.push(task_report.epoch_losses.clone());
        report.memory_sizes.push(memory.len());
        task_reports.push(task_report);
        if probe_len > 0 {
            timings.forward_overhead.push(wall_time_overhead(&model, &probe, t + 1, 3)?);
        }

        let step_report = MetricsReport {
            matrix: matrix.clone(),
            ..report.clone()
        };
        let filled = MetricsReport::from_matrix(matrix.clone())?;
        report = MetricsReport {
            avg_acc: filled.avg_acc,
            last_acc: filled.last_acc,
            forgetting: filled.forgetting,
            ..step_report
        };
        emit_metrics(&report, &cfg.output_dir)?;
        write_json(&timings, cfg.output_dir.join(TIMINGS_FILE))?;
    }
    save_checkpoint(&model, Some(&rng), cfg.output_dir.join(CHECKPOINT_FILE))?;
    Ok(RunOutcome {
        report,
        timings,
        model,
        memory,
        scenario,
        task_reports,
    })
}
