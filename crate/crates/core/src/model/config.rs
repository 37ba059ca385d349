use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ActivationKind;

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Architecture hyper-parameters of the dense pre-norm transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub tied_embeddings: bool,
    #[serde(default)]
    pub activation: ActivationKind,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Standard deviation of the weight initialization; `1/sqrt(dim)` when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

/// Closed-form parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub non_embedding: u64,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layers: usize,
        dim: usize,
        mlp_dim: usize,
        q_heads: usize,
        kv_heads: usize,
        vocab: usize,
        seq_len: usize,
        tied_embeddings: bool,
    ) -> Self {
        Self {
            layers,
            dim,
            mlp_dim,
            q_heads,
            kv_heads,
            vocab,
            seq_len,
            tied_embeddings,
            activation: ActivationKind::Silu,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            init_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dim == 0 || self.q_heads == 0 || self.kv_heads == 0 {
            return bad("dim and head counts must be positive");
        }
        if self.dim % self.q_heads != 0 {
            return bad("dim must be divisible by q_heads");
        }
        if self.q_heads % self.kv_heads != 0 {
            return bad("q_heads must be divisible by kv_heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head_dim must be even for rotary embeddings");
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive");
        }
        if self.vocab <= 1 {
            return bad("vocab must exceed 1");
        }
        if self.layers > 0 && self.mlp_dim == 0 {
            return bad("mlp_dim must be positive");
        }
        if !(self.norm_eps > 0.0) || !(self.rope_base > 0.0) {
            return bad("norm_eps and rope_base must be positive");
        }
        self.activation.resolve()?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.q_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim()
    }

    /// Rows of the stacked `[Q; K; V]` projection.
    pub fn qkv_rows(&self) -> usize {
        self.dim + 2 * self.kv_dim()
    }

    pub fn init_std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / (self.dim as f64).sqrt())
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(self)
    }

    /// Apertus-v1.1 0.5B: 20 layers, width 1024, tied embeddings.
    pub fn apertus_0_5b() -> Self {
        Self::new(20, 1024, 6144, 16, 4, 131072, 4096, true)
    }

    pub fn apertus_1_5b() -> Self {
        Self::new(16, 2048, 12288, 32, 8, 131072, 4096, false)
    }

    pub fn apertus_4b() -> Self {
        Self::new(24, 3072, 16384, 24, 8, 131072, 4096, false)
    }

    pub fn apertus_8b() -> Self {
        Self::new(32, 4096, 21504, 32, 8, 131072, 4096, false)
    }
}

/// Exact parameter count: embedding and head are counted once when tied and
/// twice otherwise; the MLP is the two-matrix (up/down) form.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let d = config.dim as u64;
    let per_layer = 2 * d // norm gains
        + config.qkv_rows() as u64 * d
        + d * d
        + 2 * config.mlp_dim as u64 * d;
    let non_embedding = config.layers as u64 * per_layer + d;
    let embed = config.vocab as u64 * d;
    let total = non_embedding + if config.tied_embeddings { embed } else { 2 * embed };
    ParamCount {
        total,
        non_embedding,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_config_counts_embedding_and_final_norm() {
        let c = ModelConfig::new(0, 8, 0, 2, 1, 256, 4, true);
        assert_eq!(c.count_params().total, 2048 + 8);
    }

    #[test]
    fn validation_rejects_bad_heads() {
        let mut c = ModelConfig::new(1, 30, 64, 4, 2, 16, 8, true);
        assert!(c.validate().is_err());
        c.dim = 32;
        c.kv_heads = 3;
        assert!(c.validate().is_err());
        c.kv_heads = 2;
        assert!(c.validate().is_ok());
        c.vocab = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn xielu_slot_is_unknown_until_registered() {
        let mut c = ModelConfig::new(1, 16, 32, 2, 1, 16, 8, true);
        c.activation = ActivationKind::Plugin("xielu".into());
        assert!(matches!(c.validate(), Err(Error::UnknownActivation(_))));
    }

    #[test]
    fn json_defaults_fill_optional_fields() {
        let c: ModelConfig = serde_json::from_str(
            r#"{"layers":1,"dim":16,"mlp_dim":32,"q_heads":2,"kv_heads":1,
                "vocab":257,"seq_len":64,"tied_embeddings":true}"#,
        )
        .unwrap();
        assert_eq!(c.activation, ActivationKind::Silu);
        assert_eq!(c.rope_base, 10000.0);
        assert_eq!(c.init_std(), 0.25);
    }
}
