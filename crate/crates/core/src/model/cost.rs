//! Parameter and multiply-accumulate accounting.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::dytox::DyToxModel;
use super::layers::Module;
use crate::tensor::Real;

/// Parameter counts by component. `total` covers everything used at
/// inference; the training-only divergence head is reported apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub tokenizer: usize,
    pub sabs: usize,
    pub tab: usize,
    pub tokens: usize,
    pub heads: usize,
    pub divergence: usize,
    pub total: usize,
}

/// Counts parameters by walking the model's tensors.
pub fn count_params<T: Real>(model: &DyToxModel<T>) -> ParamReport {
    let mut r = ParamReport::default();
    for (name, t) in model.params("") {
        let n = t.numel();
        let slot = match name.split('.').next().unwrap_or("") {
            "tokenizer" => &mut r.tokenizer,
            "sabs" => &mut r.sabs,
            "tab" => &mut r.tab,
            "tokens" => &mut r.tokens,
            "heads" | "unified_head" => &mut r.heads,
            "divergence" => &mut r.divergence,
            other => unreachable!("unexpected parameter group {other}"),
        };
        *slot += n;
    }
    r.total = r.tokenizer + r.sabs + r.tab + r.tokens + r.heads;
    r
}

/// Closed-form parameter growth of one task with independent classifiers:
/// a `D` token plus a classifier `classes · (D + 1)` and its norm `2D`.
pub fn task_param_delta(embed_dim: usize, classes: usize) -> usize {
    embed_dim + classes * (embed_dim + 1) + 2 * embed_dim
}

/// Forward multiply-accumulate counts for one image. Norms, activations
/// and softmax are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub tokenizer: u64,
    pub sab_per_layer: u64,
    pub sab_total: u64,
    /// `Q·Kᵀ` term of one self-attention layer: `N · N · D`.
    pub sa_score: u64,
    pub tab_per_task: u64,
    /// `Q·Kᵀ` term of one task-attention pass: `h · (N+1) · (D/h)`.
    pub ta_score: u64,
    pub tasks: usize,
    /// `tokenizer + sab_total + tasks · tab_per_task`
    pub total: u64,
}

/// Analytic forward MACs of the architecture with `tasks` task tokens.
pub fn count_flops(cfg: &ModelConfig, tasks: usize) -> FlopReport {
    let n = cfg.num_tokens() as u64;
    let d = cfg.embed_dim as u64;
    let h = cfg.heads as u64;
    let hidden = cfg.hidden_dim() as u64;
    let mlp = |rows: u64| 2 * rows * d * hidden;

    let tokenizer = n * cfg.patch_dim() as u64 * d;

    let sa_score = h * n * n * (d / h);
    let sab_per_layer = 4 * n * d * d + 2 * sa_score + mlp(n);

    let keys = n + 1;
    let ta_score = h * keys * (d / h);
    // query and output projections see one row, keys and values see N+1.
    let tab_per_task = 2 * d * d + 2 * keys * d * d + 2 * ta_score + mlp(1);

    let sab_total = sab_per_layer * cfg.sab_count as u64;
    FlopReport {
        tokenizer,
        sab_per_layer,
        sab_total,
        sa_score,
        tab_per_task,
        ta_score,
        tasks,
        total: tokenizer + sab_total + tasks as u64 * tab_per_task,
    }
}

impl<T: Real> DyToxModel<T> {
    pub fn count_params(&self) -> ParamReport {
        count_params(self)
    }

    pub fn count_flops(&self, tasks: usize) -> FlopReport {
        count_flops(&self.config, tasks)
    }
}
