//! Acceptance checks. Each criterion prints one PASS/FAIL line; the binary
//! exits non-zero when any of them fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use dytox::data::{
    build_scenario, gen_synthetic, herding_select, l2_normalize, load_cifar100_binary, task_loader, RehearsalMemory,
    SyntheticBlobConfig, RECORD_LEN,
};
use dytox::experiment::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, parse_config, run_experiment, save_checkpoint,
    ExperimentConfig, RunOutcome, CURVE_FILE, MATRIX_FILE, METRICS_FILE,
};
use dytox::metrics::overhead_report;
use dytox::model::{
    count_flops, trunc_normal, Attention, DyToxModel, LayerNorm, Linear, Mlp, ModelConfig, ModelOptions, Module,
    PatchTokenizer, SabLayer, TabLayer, TaskHead,
};
use dytox::tensor::{grad_check, relative_error, Tape, Tensor, Var};
use dytox::training::{
    alpha_schedule, bce_classification_loss, divergence_loss, kd_loss, mix_pairs, one_hot, sample_lambda, total_loss,
    train_task, LossTerms, TaskInputs, TeacherSnapshot, TrainOptions, TrainSchedule, LAMBDA_DIV, MIXUP_ALPHA,
    PROB_CLAMP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

mod common;
use common::herding_oracle;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn lib<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Worst relative error between tape gradients and central differences
/// over every parameter coordinate of `m`.
fn param_grad_error<M: Module<f64>>(
    m: &mut M,
    loss: impl Fn(&M, &mut Tape<f64>) -> dytox::Result<Var>,
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let l = lib(loss(m, &mut tape))?;
    let grads = lib(tape.backward(l))?;
    let analytic: Vec<Vec<f64>> = m
        .params("")
        .iter()
        .map(|(_, p)| grads.for_param(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let eval = |m: &M| -> Result<f64, String> {
        let mut tape = Tape::inference();
        let v = lib(loss(m, &mut tape))?;
        lib(tape.value(v).item())
    };
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for (k, &g) in grad.iter().enumerate() {
            let orig = m.params_mut("")[pi].1.data()[k];
            m.params_mut("")[pi].1.data_mut()[k] = orig + FD_STEP;
            let up = eval(m)?;
            m.params_mut("")[pi].1.data_mut()[k] = orig - FD_STEP;
            let down = eval(m)?;
            m.params_mut("")[pi].1.data_mut()[k] = orig;
            worst = worst.max(relative_error(g, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Moves every parameter away from its small initial scale so gradients are
/// well above finite-difference noise.
fn spread<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, 0.25).unwrap();
    for (_, p) in m.params_mut("") {
        p.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t: Tensor<f64> = trunc_normal(rng, shape, 1.0);
    t.requires_grad = false;
    t
}

/// `Σ out ⊙ R` for a fixed random `R`, so no output coordinate cancels.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> dytox::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn layer_check<M: Module<f64>>(
    name: &str,
    mut m: M,
    input_shape: &[usize],
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&M, &mut Tape<f64>, Var) -> dytox::Result<Var>,
) -> Result<(String, f64), String> {
    spread(&mut m, rng);
    let x = random(rng, input_shape);
    let r = random(rng, out_shape);
    let wrt_input = lib(grad_check(
        |tape, xv| {
            let y = f(&m, tape, xv)?;
            project(tape, y, &r)
        },
        &x,
        FD_STEP,
    ))?;
    let wrt_params = param_grad_error(&mut m, |m, tape| {
        let xv = tape.constant(x.clone());
        let y = f(m, tape, xv)?;
        project(tape, y, &r)
    })?;
    Ok((name.to_string(), wrt_input.max(wrt_params)))
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        sab_count: 2,
        mlp_ratio: 2,
        norm_eps: 1e-6,
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = toy_config();
    let (d, n) = (cfg.embed_dim, cfg.num_tokens());
    let mut results = Vec::new();

    let lin = Linear::<f64>::new(&mut rng, d, 8, true);
    results.push(layer_check("linear", lin, &[2, 5, d], &[2, 5, 8], &mut rng, |m, t, x| m.forward(t, x))?);
    results.push(layer_check("layer_norm", LayerNorm::<f64>::new(d, 1e-6), &[2, 5, d], &[2, 5, d], &mut rng, |m, t, x| {
        m.forward(t, x)
    })?);
    let mlp = Mlp::<f64>::new(&mut rng, d, 2 * d);
    results.push(layer_check("mlp", mlp, &[2, 5, d], &[2, 5, d], &mut rng, |m, t, x| m.forward(t, x))?);
    let sa = Attention::<f64>::new(&mut rng, d, 2);
    results.push(layer_check("self_attention", sa, &[2, n, d], &[2, n, d], &mut rng, |m, t, x| {
        Ok(m.self_attention(t, x)?.out)
    })?);
    let ta = Attention::<f64>::new(&mut rng, d, 2);
    results.push(layer_check("task_attention", ta, &[2, n + 1, d], &[2, 1, d], &mut rng, |m, t, x| {
        Ok(m.task_attention(t, x)?.out)
    })?);
    let sab = SabLayer::<f64>::new(&mut rng, &cfg);
    results.push(layer_check("sab", sab, &[2, n, d], &[2, n, d], &mut rng, |m, t, x| m.forward(t, x))?);
    let tab = TabLayer::<f64>::new(&mut rng, &cfg);
    let theta = random(&mut rng, &[d]);
    results.push(layer_check("tab", tab, &[2, n, d], &[2, d], &mut rng, |m, t, x| {
        let th = t.constant(theta.clone());
        m.forward(t, x, th)
    })?);
    let head = TaskHead::<f64>::new(&mut rng, &cfg, 3);
    results.push(layer_check("task_head", head, &[4, d], &[4, 3], &mut rng, |m, t, x| m.forward(t, x))?);

    let mut tok = PatchTokenizer::<f64>::new(&mut rng, &cfg);
    spread(&mut tok, &mut rng);
    let images = random(&mut rng, &[2, 3, 16, 16]);
    let r = random(&mut rng, &[2, n, d]);
    let e = param_grad_error(&mut tok, |m, t| {
        let y = m.forward(t, &images)?;
        project(t, y, &r)
    })?;
    results.push(("tokenizer".into(), e));

    // full loss of a 2-task model: classification, distillation and divergence
    let mut model = lib(DyToxModel::<f64>::new(cfg.clone(), ModelOptions::default(), &mut rng))?;
    lib(model.expand_task(2, &mut rng))?;
    spread(&mut model, &mut rng);
    let teacher = TeacherSnapshot::new(&model);
    lib(model.expand_task(2, &mut rng))?;
    spread(&mut model, &mut rng);
    let images = random(&mut rng, &[4, 3, 16, 16]);
    let labels = [0usize, 1, 2, 3];
    let (_, teacher_probs) = lib(teacher.outputs(&images))?;
    let e = param_grad_error(&mut model, |m, tape| {
        let out = m.forward(tape, &images, 2, true)?;
        let targets = one_hot::<f64>(&labels, 4)?;
        let clf = bce_classification_loss(tape, out.probs, targets.clone())?;
        let old = tape.narrow(out.probs, 1, 0, 2)?;
        let kd = kd_loss(tape, old, &teacher_probs)?;
        let div = divergence_loss(tape, out.divergence.expect("divergence head"), &targets, 4, 2, 2, 1)?;
        let terms = LossTerms {
            clf,
            kd: Some(kd),
            div: Some(div),
        };
        total_loss(tape, terms, alpha_schedule(m.class_counts(), 1), LAMBDA_DIV)
    })?;
    results.push(("full_loss".into(), e));

    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    ensure!(worst <= GRAD_TOL, "max rel err {worst:.2e} > {GRAD_TOL:e}: {}", detail.join(" "));
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("max rel err {worst:.2e} over {} checks in {secs:.1}s", results.len()))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=4);
        let n = rng.random_range(1..=20);
        let b = rng.random_range(1..=3);
        let attn = Attention::<f64>::new(&mut rng, d, heads);
        let mut tape = Tape::inference();
        let x = tape.constant(random(&mut rng, &[b, n, d]).reshape(&[b, n, d]).unwrap());
        let sa = lib(attn.self_attention(&mut tape, x))?;
        ensure!(tape.shape(sa.weights) == [b, heads, n, n], "SA map {:?}", tape.shape(sa.weights));
        for row in tape.value(sa.weights).data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let z = tape.constant(random(&mut rng, &[b, n + 1, d]));
        let ta = lib(attn.task_attention(&mut tape, z))?;
        ensure!(
            tape.shape(ta.weights) == [b, heads, 1, n + 1],
            "TA map {:?} for N = {n}",
            tape.shape(ta.weights)
        );
        ensure!(tape.shape(ta.out) == [b, 1, d], "TA output {:?}", tape.shape(ta.out));
        for row in tape.value(ta.weights).data().chunks(n + 1) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "row sum off by {worst:e}");
    Ok(format!("1000 instances, max |row sum - 1| = {worst:.1e}"))
}

fn criterion_3() -> Check {
    let cfg = ModelConfig::default();
    ensure!(
        (cfg.sab_count, cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.patch_size, cfg.image_size) == (5, 384, 12, 4, 4, 32),
        "unexpected default config {cfg:?}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut model = lib(DyToxModel::<f32>::new(cfg, ModelOptions::default(), &mut rng))?;
    let mut totals = Vec::new();
    let mut ratios = Vec::new();
    for _ in 0..10 {
        let before = model.count_params();
        lib(model.expand_task(10, &mut rng))?;
        let after = model.count_params();
        let token_delta = after.tokens - before.tokens;
        ensure!(token_delta == 384, "token delta {token_delta}");
        totals.push(after.total);
        ratios.push(100.0 * token_delta as f64 / after.total as f64);
    }
    for &t in &totals {
        ensure!((10_200_000..=11_300_000).contains(&t), "total {t} outside [10.2M, 11.3M]");
    }
    for &r in &ratios {
        ensure!((0.003..=0.004).contains(&r), "token ratio {r:.5}% outside [0.003%, 0.004%]");
    }
    let report = overhead_report(&model);
    ensure!(report.token_delta == 384, "overhead report token delta {}", report.token_delta);
    Ok(format!(
        "total {} (1 task) .. {} (10 tasks), token delta 384, ratio {:.4}%",
        totals[0], totals[9], ratios[0]
    ))
}

fn criterion_4() -> Check {
    let imagenet = ModelConfig {
        image_size: 224,
        patch_size: 16,
        ..ModelConfig::default()
    };
    ensure!(imagenet.num_tokens() == 196, "N = {}", imagenet.num_tokens());
    let one = count_flops(&imagenet, 1);
    let ratio = one.tab_per_task as f64 / one.total as f64;
    ensure!((0.01..=0.05).contains(&ratio), "MAC ratio {:.3}%", ratio * 100.0);
    let deltas: Vec<u64> = (2..=10)
        .map(|t| count_flops(&imagenet, t).total - count_flops(&imagenet, t - 1).total)
        .collect();
    ensure!(deltas.iter().all(|&d| d == one.tab_per_task), "per-task deltas vary: {deltas:?}");

    let wider = ModelConfig {
        image_size: 320,
        ..imagenet.clone()
    };
    let n_ratio = wider.num_tokens() as f64 / imagenet.num_tokens() as f64;
    let big = count_flops(&wider, 1);
    let ta_growth = big.ta_score as f64 / one.ta_score as f64;
    let sa_growth = big.sa_score as f64 / one.sa_score as f64;
    ensure!((ta_growth / 2.0 - 1.0).abs() <= 0.1, "TA score grows {ta_growth:.3}x for N x{n_ratio:.3}");
    ensure!(sa_growth >= 3.0, "SA score grows only {sa_growth:.3}x");
    Ok(format!(
        "MAC ratio {:.2}%, constant delta {}, N x{n_ratio:.2}: TA x{ta_growth:.2}, SA x{sa_growth:.2}",
        ratio * 100.0,
        one.tab_per_task
    ))
}

/// Runs of the synthetic benchmark shared by criteria 5 to 7.
struct Benchmark {
    naive: RunOutcome,
    baseline: RunOutcome,
    full: RunOutcome,
    plus: RunOutcome,
    seconds: f64,
}

fn benchmark_config() -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_small.json");
    lib(parse_config(path))
}

fn benchmark(dir: &Path) -> Result<Benchmark, String> {
    let base = benchmark_config()?;
    let run = |name: &str, edit: &dyn Fn(&mut ExperimentConfig)| -> Result<RunOutcome, String> {
        let mut cfg = base.clone();
        cfg.output_dir = dir.join(name);
        edit(&mut cfg);
        lib(run_experiment(&cfg))
    };
    let start = Instant::now();
    let naive = run("naive", &|c| {
        c.memory_size = 0;
        c.toggles.kd = false;
        c.toggles.divergence = false;
        c.toggles.token_expansion = false;
        c.toggles.independent_heads = false;
        c.toggles.finetune = false;
    })?;
    let baseline = run("baseline", &|c| {
        c.toggles.divergence = false;
        c.toggles.token_expansion = false;
        c.toggles.independent_heads = false;
        c.toggles.finetune = false;
    })?;
    let full = run("full", &|_| {})?;
    let plus = run("plus", &|c| c.toggles.mixup = true)?;
    Ok(Benchmark {
        naive,
        baseline,
        full,
        plus,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn forgetting(o: &RunOutcome) -> f64 {
    o.report.forgetting.unwrap_or(f64::NAN)
}

fn criterion_5(b: &Benchmark) -> Check {
    let cfg = benchmark_config()?;
    let summary = format!(
        "last: naive {:.4} < baseline {:.4} < full {:.4}; forgetting full {:.4} vs naive {:.4}; {:.0}s",
        b.naive.report.last_acc,
        b.baseline.report.last_acc,
        b.full.report.last_acc,
        forgetting(&b.full),
        forgetting(&b.naive),
        b.seconds
    );
    let synthetic = match &cfg.dataset {
        dytox::experiment::DatasetSpec::Synthetic(s) => s.num_classes == 8 && s.image_size == 16,
        _ => false,
    };
    ensure!(
        synthetic
            && cfg.scenario.num_steps == 4
            && cfg.memory_size == 40
            && cfg.schedule.epochs_per_task == 30,
        "benchmark config differs from the required setting"
    );
    ensure!(b.naive.report.last_acc < b.baseline.report.last_acc, "{summary}");
    ensure!(b.baseline.report.last_acc < b.full.report.last_acc, "{summary}");
    ensure!(b.full.report.last_acc - b.naive.report.last_acc >= 0.15, "{summary}");
    ensure!(forgetting(&b.full) < forgetting(&b.naive), "{summary}");
    ensure!(b.seconds < 900.0, "{summary}");
    Ok(summary)
}

fn criterion_6(b: &Benchmark) -> Check {
    let (plus, full) = (forgetting(&b.plus), forgetting(&b.full));
    ensure!(plus <= full, "forgetting with mixup {plus:.4} > without {full:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let images = random(&mut rng, &[4, 6]);
    let targets = lib(one_hot::<f64>(&[0, 1, 2, 1], 3))?;
    let partners = [1usize, 2, 3, 0];
    let (same, same_t) = lib(mix_pairs(&images, &targets, &partners, &[1.0; 4]))?;
    ensure!(same.data() == images.data() && same_t == targets, "lambda = 1 is not the identity");

    let lambdas: Vec<f64> = (0..4).map(|_| lib(sample_lambda(MIXUP_ALPHA, &mut rng))).collect::<Result<_, _>>()?;
    let (mixed, mixed_t) = lib(mix_pairs(&images, &targets, &partners, &lambdas))?;
    for i in 0..4 {
        let (l, j) = (lambdas[i], partners[i]);
        for k in 0..6 {
            let want = l * images.data()[i * 6 + k] + (1.0 - l) * images.data()[j * 6 + k];
            ensure!((mixed.data()[i * 6 + k] - want).abs() < 1e-12, "image {i} is not a convex mix");
        }
        let row = &mixed_t[i * 3..i * 3 + 3];
        ensure!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "target row {i} sums to {}", row.iter().sum::<f64>());
    }

    let draws = 100_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        sum += lib(sample_lambda(MIXUP_ALPHA, &mut rng))?;
    }
    let mean = sum / draws as f64;
    ensure!((mean - 0.5).abs() <= 0.01, "Beta mean {mean:.4}");
    Ok(format!("forgetting {plus:.4} (mixup) <= {full:.4}; Beta mean {mean:.4}; convexity and identity hold"))
}

fn criterion_7(b: &Benchmark) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for case in 0..100 {
        let n = rng.random_range(1..=12);
        let m = rng.random_range(1..=n.min(5));
        let dim = rng.random_range(1..=8);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        rows.iter_mut().for_each(|r| l2_normalize(r));
        let got = lib(herding_select(&rows.concat(), dim, m))?;
        let want = herding_oracle(&rows, m);
        ensure!(got == want, "case {case}: herding {got:?}, oracle {want:?}");
    }
    let budget = benchmark_config()?.memory_size;
    for run in [&b.baseline, &b.full, &b.plus] {
        let sizes = &run.report.memory_sizes;
        ensure!(!sizes.is_empty(), "no memory sizes recorded");
        ensure!(sizes.iter().all(|&s| s <= budget), "memory sizes {sizes:?} exceed {budget}");
        ensure!(run.memory.len() <= budget, "final memory {} exceeds {budget}", run.memory.len());
    }
    Ok(format!(
        "100 instances match the oracle; memory sizes {:?} <= {budget}",
        b.full.report.memory_sizes
    ))
}

fn frozen_old_logits(freeze_shared: bool) -> Result<(Vec<f32>, Vec<f32>), String> {
    let data = lib(gen_synthetic(&SyntheticBlobConfig {
        num_classes: 6,
        image_size: 8,
        train_per_class: 8,
        test_per_class: 2,
        seed: 9,
        ..SyntheticBlobConfig::default()
    }))?;
    let scenario = lib(build_scenario(&data, 3, 2))?;
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        sab_count: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut model = lib(DyToxModel::<f32>::new(cfg, ModelOptions::default(), &mut rng))?;
    let schedule = TrainSchedule {
        epochs_per_task: 3,
        warmup_epochs: 0,
        base_lr: 1e-3,
        finetune_epochs: 0,
        batch_size: 8,
        seed: 4,
        ..TrainSchedule::default()
    };
    let mut memory = RehearsalMemory::new(6);
    let mut teacher: Option<TeacherSnapshot<f32>> = None;
    let probe = lib(data.batch::<f32>(&[0, 5, 10, 20, 30, 40]))?;
    let mut before = Vec::new();
    for (t, &classes) in scenario.class_counts().iter().enumerate() {
        if t == 2 {
            before = lib(model.forward_all(&probe, 2))?.into_data();
        }
        lib(model.expand_task(classes, &mut rng))?;
        let stream = task_loader(&scenario, t, &memory, &data);
        let options = TrainOptions {
            finetune: false,
            freeze_shared: freeze_shared && t == 2,
            ..TrainOptions::default()
        };
        let inputs = TaskInputs {
            dataset: &data,
            stream: &stream,
            memory: &memory,
            teacher: teacher.as_ref(),
            schedule: &schedule,
            options,
        };
        let (_, snap) = lib(train_task(&mut model, inputs))?;
        teacher = Some(snap);
        model.drop_divergence();
        lib(memory.update(&model, &data, &scenario, t, 8))?;
    }
    let all = lib(model.forward_all(&probe, 3))?;
    let width = all.shape()[1];
    let after: Vec<f32> = all.data().chunks(width).flat_map(|r| r[..4].to_vec()).collect();
    Ok((before, after))
}

fn criterion_8() -> Check {
    let (before, after) = frozen_old_logits(false)?;
    let (before_frozen, after_frozen) = frozen_old_logits(true)?;
    ensure!(before == before_frozen, "runs diverged before the third task");
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(
        bits(&before_frozen) == bits(&after_frozen),
        "old-task outputs moved with the shared blocks frozen"
    );
    let moved = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    ensure!(moved > 0, "old-task outputs never moved, so the shared blocks were not trained");
    Ok(format!(
        "old-task outputs bit-identical with shared blocks frozen; {moved}/{} moved through shared updates",
        before.len()
    ))
}

fn criterion_9() -> Check {
    let cases: [(&[usize], usize, f64); 6] = [
        (&[10, 10, 10], 1, 10.0 / 20.0),
        (&[10, 10, 10], 2, 20.0 / 30.0),
        (&[2, 3, 5], 1, 2.0 / 5.0),
        (&[2, 3, 5], 2, 5.0 / 10.0),
        (&[50, 10], 1, 50.0 / 60.0),
        (&[50, 10], 0, 0.0),
    ];
    for (counts, t, want) in cases {
        let got = alpha_schedule(counts, t);
        ensure!(got == want, "alpha({counts:?}, {t}) = {got}, expected {want}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut model = lib(DyToxModel::<f32>::new(toy_config(), ModelOptions::default(), &mut rng))?;
    lib(model.expand_task(3, &mut rng))?;
    let mut images: Tensor<f32> = trunc_normal(&mut rng, &[4, 3, 16, 16], 1.0);
    images.requires_grad = false;
    let mut tape = Tape::new();
    let out = lib(model.forward(&mut tape, &images, 1, true))?;
    let targets = lib(one_hot::<f32>(&[0, 1, 2, 0], 3))?;
    let clf = lib(bce_classification_loss(&mut tape, out.probs, targets))?;
    let terms = LossTerms {
        clf,
        kd: None,
        div: None,
    };
    let total = lib(total_loss(&mut tape, terms, alpha_schedule(model.class_counts(), 0), LAMBDA_DIV))?;
    let (c, l) = (lib(tape.value(clf).item())?, lib(tape.value(total).item())?);
    ensure!(c.to_bits() == l.to_bits(), "first-task total {l} differs from classification {c}");

    let mut tape = Tape::<f64>::new();
    let zeros = tape.constant(Tensor::zeros(&[2, 3]));
    let p = tape.sigmoid(zeros);
    let bce = lib(tape.bce(p, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], PROB_CLAMP))?;
    let v = lib(tape.value(bce).item())?;
    ensure!((v - std::f64::consts::LN_2).abs() <= 1e-9, "BCE at sigmoid(0) = {v}");
    Ok("alpha exact on 3 count vectors; first-task total == classification; BCE(0.5) = ln 2".into())
}

fn tiny_config(dir: PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: dytox::experiment::DatasetSpec::Synthetic(SyntheticBlobConfig {
            num_classes: 4,
            image_size: 8,
            train_per_class: 6,
            test_per_class: 4,
            seed: 12,
            ..SyntheticBlobConfig::default()
        }),
        model: ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            sab_count: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        memory_size: 4,
        output_dir: dir,
        ..ExperimentConfig::default()
    };
    cfg.scenario.num_steps = 2;
    cfg.schedule = TrainSchedule {
        epochs_per_task: 2,
        warmup_epochs: 1,
        base_lr: 1e-3,
        finetune_epochs: 1,
        finetune_lr: 1e-4,
        batch_size: 4,
        seed: 0,
    };
    cfg
}

fn criterion_10(dir: &Path) -> Check {
    let first = lib(run_experiment(&tiny_config(dir.join("first"))))?;
    lib(run_experiment(&tiny_config(dir.join("second"))))?;
    for file in [METRICS_FILE, MATRIX_FILE, CURVE_FILE] {
        let a = lib(std::fs::read(dir.join("first").join(file)))?;
        let b = lib(std::fs::read(dir.join("second").join(file)))?;
        ensure!(!a.is_empty() && a == b, "{file} differs between seeded runs");
    }

    let model = &first.model;
    let path = dir.join("round_trip.ckpt");
    lib(save_checkpoint(model, None, &path))?;
    let loaded = lib(load_checkpoint(&path))?;
    let probe = lib(gen_synthetic(&SyntheticBlobConfig {
        num_classes: 4,
        image_size: 8,
        train_per_class: 2,
        seed: 77,
        ..SyntheticBlobConfig::default()
    }))?;
    let images = lib(probe.batch::<f32>(&(0..probe.len()).collect::<Vec<_>>()))?;
    let a = lib(model.forward_all(&images, model.num_tasks()))?;
    let b = lib(loaded.model.forward_all(&images, loaded.model.num_tasks()))?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&a) == bits(&b), "forward outputs differ after reload");
    let again = lib(checkpoint_bytes(&loaded.model, None))?;
    ensure!(again == lib(std::fs::read(&path))?, "re-saved checkpoint bytes differ");
    ensure!(lib(checkpoint_from_bytes(&again[..again.len() - 1])).is_err(), "truncated checkpoint accepted");

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cifar100_two_records.bin");
    let raw = lib(std::fs::read(&fixture))?;
    ensure!(raw.len() == 2 * RECORD_LEN, "fixture has {} bytes", raw.len());
    let ds = lib(load_cifar100_binary(&fixture))?;
    ensure!(ds.len() == 2 && ds.labels() == [30, 81], "labels {:?}", ds.labels());
    for r in 0..2 {
        let pixels = &raw[r * RECORD_LEN + 2..(r + 1) * RECORD_LEN];
        let want_byte = |i: usize| if r == 0 { (i * 7 % 256) as u8 } else { 255 - (i % 256) as u8 };
        for (i, (&byte, &v)) in pixels.iter().zip(ds.image(r)).enumerate() {
            ensure!(byte == want_byte(i), "record {r} byte {i} is {byte}");
            ensure!(v == f32::from(byte) / 255.0, "record {r} pixel {i} decoded as {v}");
        }
    }
    Ok("metrics byte-identical across seeded runs; checkpoint round trip bit-exact; CIFAR fixture exact".into())
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, result: Check| {
        match result {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail})");
            }
        }
    };
    report(1, "gradient fidelity", criterion_1());
    report(2, "attention invariants", criterion_2());
    report(3, "memory overhead", criterion_3());
    report(4, "compute overhead", criterion_4());
    match benchmark(&dir.path().join("benchmark")) {
        Ok(b) => {
            report(5, "forgetting ordering", criterion_5(&b));
            report(6, "mixup effect", criterion_6(&b));
            report(7, "herding and memory budget", criterion_7(&b));
        }
        Err(e) => {
            for (n, name) in [(5, "forgetting ordering"), (6, "mixup effect"), (7, "herding and memory budget")] {
                report(n, name, Err(format!("benchmark failed: {e}")));
            }
        }
    }
    report(8, "frozen-path determinism", criterion_8());
    report(9, "loss schedule", criterion_9());
    report(10, "persistence and format", criterion_10(dir.path()));
    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
