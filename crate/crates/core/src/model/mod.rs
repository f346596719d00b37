//! The dynamic token-expansion transformer.

mod config;
mod cost;
mod dytox;
pub(crate) mod layers;

pub use config::{ModelConfig, ModelOptions};
pub use cost::{count_flops, count_params, task_param_delta, FlopReport, ParamReport};
pub use dytox::{
    unfold_patches, DyToxModel, ForwardOutput, PassCounters, PatchTokenizer, SabLayer, TabLayer,
    TaskHead, TaskToken,
};
pub use layers::{trunc_normal, Attention, AttentionOutput, LayerNorm, Linear, Mlp, Module, INIT_STD};
