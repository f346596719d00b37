use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dytox::data::build_scenario;
use dytox::experiment::{
    apply_override, config_from_value, evaluate, load_checkpoint, load_datasets, run_experiment, ExperimentConfig,
};
use dytox::metrics::overhead_report;
use dytox::Result;

#[derive(Parser)]
#[command(name = "dytox", version, about = "Class-incremental training with dynamic task tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over every task of a config and write metrics and a checkpoint.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Evaluate a checkpoint on the test split described by a config.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Print parameter and MAC counts of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted `key=value` assignment applied to the config; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load_config(path: Option<&PathBuf>, flags: &Flags) -> Result<ExperimentConfig> {
    let mut value: Value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => json!({}),
    };
    for o in &flags.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = flags.seed {
        value["seed"] = json!(seed);
    }
    if let Some(out) = &flags.out {
        value["output_dir"] = json!(out);
    }
    config_from_value(value)
}

fn print(value: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = load_config(Some(&config), &flags)?;
            let outcome = run_experiment(&cfg)?;
            let r = &outcome.report;
            print(&json!({
                "output_dir": cfg.output_dir,
                "avg_acc": r.avg_acc,
                "last_acc": r.last_acc,
                "forgetting": r.forgetting,
                "params_total": r.params_total,
            }))
        }
        Command::Eval { checkpoint, config, flags } => {
            let cfg = load_config(config.as_ref(), &flags)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (train, test) = load_datasets(&cfg.dataset)?;
            let scenario = build_scenario(&train, cfg.scenario.num_steps, cfg.scenario.class_order_seed)?;
            let tasks = ckpt.model.num_tasks();
            let (per_task, pooled) = evaluate(&ckpt.model, &test, &scenario, tasks, cfg.eval_batch_size)?;
            print(&json!({ "tasks": tasks, "per_task": per_task, "pooled": pooled }))
        }
        Command::Inspect { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let m = &ckpt.model;
            print(&json!({
                "config": m.config,
                "options": m.options,
                "class_counts": m.class_counts(),
                "params": m.count_params(),
                "flops": m.count_flops(m.num_tasks().max(1)),
                "overhead": overhead_report(m),
            }))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
