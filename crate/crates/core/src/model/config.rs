use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Number of self-attention blocks in the encoder.
    pub sab_count: usize,
    pub mlp_ratio: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 384,
            heads: 12,
            sab_count: 5,
            mlp_ratio: 4,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Patch tokens per image.
    pub fn num_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Checks the structural invariants; `prefix` is prepended to key names
    /// in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("sab_count", self.sab_count),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(key(k), "must be at least 1"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                key("patch_size"),
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                key("heads"),
                format!("{} does not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config(key("norm_eps"), "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Switches for the ablation study. Both on is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// One new task token per task; when off a single token is shared.
    pub token_expansion: bool,
    /// One sigmoid classifier per task; when off a single linear classifier
    /// over the concatenated task embeddings grows with every task.
    pub independent_heads: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            token_expansion: true,
            independent_heads: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let c = ModelConfig::default();
        assert_eq!(c.num_tokens(), 64);
        let big = ModelConfig {
            image_size: 224,
            patch_size: 16,
            ..ModelConfig::default()
        };
        assert_eq!(big.num_tokens(), 196);
    }

    #[test]
    fn validation_names_key() {
        let c = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        match c.validate("model") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.patch_size"),
            other => panic!("{other:?}"),
        }
        let c = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate("").is_err());
        assert!(ModelConfig::default().validate("").is_ok());
    }
}
