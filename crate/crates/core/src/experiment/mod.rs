//! Configuration, the end-to-end pipeline, checkpoints and output files.

mod checkpoint;
mod config;
mod emit;
mod run;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use config::{
    apply_override, config_from_value, parse_config, parse_config_str, DatasetSpec, ExperimentConfig, ScenarioConfig,
    Toggles,
};
pub use emit::{emit_metrics, write_curve_csv, write_json, write_matrix_csv, CURVE_FILE, MATRIX_FILE, METRICS_FILE};
pub use run::{evaluate, load_datasets, run_experiment, RunOutcome, Timings, CHECKPOINT_FILE, TIMINGS_FILE};
