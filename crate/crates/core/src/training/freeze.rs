use std::collections::BTreeSet;

use crate::model::{DyToxModel, Module};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Main,
    Finetune,
}

/// Names of parameters excluded from optimisation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub names: BTreeSet<String>,
}

impl FreezeMask {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }
}

/// Main phase of task `t` (0-based) freezes the tokens and classifiers of
/// every earlier task. The balanced finetuning phase instead freezes the
/// patch tokenizer and all self-attention blocks and trains everything else.
pub fn apply_freeze_policy<T: Real>(model: &DyToxModel<T>, phase: Phase, t: usize) -> FreezeMask {
    let mut names = BTreeSet::new();
    for (name, _) in model.params("") {
        let mut parts = name.split('.');
        let group = parts.next().unwrap_or("");
        let index: Option<usize> = parts.next().and_then(|s| s.parse().ok());
        let frozen = match phase {
            Phase::Main => match (group, index) {
                // a shared single token is also the current task's token
                ("tokens", Some(i)) => i < t && i + 1 < model.tokens.len(),
                ("heads", Some(i)) => i < t,
                _ => false,
            },
            Phase::Finetune => matches!(group, "sabs" | "tokenizer"),
        };
        if frozen {
            names.insert(name);
        }
    }
    FreezeMask { names }
}
