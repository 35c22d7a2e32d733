use serde::{Deserialize, Serialize};

use crate::canonical::canonical_digest;
use crate::error::{Error, Result};

/// Architecture flavor of the reference model and of extracted blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    /// LayerNorm before each sublayer, learned positions, plain GELU MLP, biases.
    Gpt2,
    /// RMSNorm before each sublayer, RoPE, gated SiLU MLP, grouped KV heads.
    Llama,
}

impl Flavor {
    pub fn gated_mlp(self) -> bool {
        matches!(self, Flavor::Llama)
    }

    pub fn has_biases(self) -> bool {
        matches!(self, Flavor::Gpt2)
    }

    pub fn uses_rope(self) -> bool {
        matches!(self, Flavor::Llama)
    }

    pub fn norm(self) -> NormKind {
        match self {
            Flavor::Gpt2 => NormKind::Layer,
            Flavor::Llama => NormKind::Rms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::GeluTanh => crate::tensor::gelu(x),
            Activation::Silu => crate::tensor::silu(x),
        }
    }

    /// Upper bound on `|f'(x)|` over the reals.
    pub fn max_slope(self) -> f64 {
        match self {
            // max of d/dx gelu_tanh ≈ 1.1289
            Activation::GeluTanh => 1.13,
            // max of d/dx silu ≈ 1.0998
            Activation::Silu => 1.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Layer,
    Rms,
}

/// How per-token losses are pooled into perplexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPooling {
    /// One mean over every predicted token of every prompt.
    #[default]
    TokenWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub flavor: Flavor,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub init_seed: u64,
    pub activation: Activation,
    pub norm_eps: f32,
    pub rope_theta: f32,
    pub loss_pooling: LossPooling,
}

impl ModelConfig {
    /// Desk-scale toy configuration for `flavor`.
    pub fn toy(flavor: Flavor, seed: u64) -> Self {
        let (name, n_kv_heads, activation) = match flavor {
            Flavor::Gpt2 => ("toy-gpt2", 4, Activation::GeluTanh),
            Flavor::Llama => ("toy-llama", 2, Activation::Silu),
        };
        ModelConfig {
            name: name.to_string(),
            flavor,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads,
            d_ff: 256,
            vocab_size: 96,
            max_seq: 32,
            init_seed: seed,
            activation,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            loss_pooling: LossPooling::TokenWeighted,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return err("d_model, n_heads and n_kv_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return err(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.flavor.uses_rope() && self.d_head() % 2 != 0 {
            return err(format!("rope needs an even head width, got {}", self.d_head()));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq == 0 {
            return err("d_ff, vocab_size and max_seq must be positive".into());
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return err(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return err(format!("rope_theta must be positive, got {}", self.rope_theta));
        }
        Ok(())
    }

    /// SHA-256 of the canonical encoding.
    pub fn digest(&self) -> Result<String> {
        canonical_digest(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_validate() {
        ModelConfig::toy(Flavor::Gpt2, 1).validate().unwrap();
        ModelConfig::toy(Flavor::Llama, 1).validate().unwrap();
    }

    #[test]
    fn head_divisibility() {
        let mut c = ModelConfig::toy(Flavor::Gpt2, 1);
        c.d_model = 8;
        c.n_heads = 3;
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(Flavor::Llama, 1);
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_names() {
        let c = ModelConfig::toy(Flavor::Llama, 3);
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["flavor"], "llama");
        assert_eq!(v["activation"], "silu");
        assert_eq!(v["loss_pooling"], "token_weighted");
        let back: ModelConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
    }
}
