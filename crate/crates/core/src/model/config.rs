use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Context window: the longest sequence a forward pass accepts.
    pub ctx_len: usize,
    pub attn_dropout: f64,
    pub embd_dropout: f64,
    pub resid_dropout: f64,
    #[serde(default = "default_true")]
    pub tie_lm_head: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// A config with `d_ff = 4 * d_model`, tied head and no dropout.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, ctx_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            ctx_len,
            attn_dropout: 0.0,
            embd_dropout: 0.0,
            resid_dropout: 0.0,
            tie_lm_head: true,
        }
    }

    /// Named architecture presets: `"0.1B"` (12 layers, 12 heads, width 768,
    /// context 768) and `"0.3B"` (24 layers, 16 heads, width 1024, context
    /// 1024). Both use a 64,000-token vocabulary and dropout 0.1 everywhere.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, heads, d, ctx) = match name {
            "0.1B" => (12, 12, 768, 768),
            "0.3B" => (24, 16, 1024, 1024),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        Ok(Self {
            attn_dropout: 0.1,
            embd_dropout: 0.1,
            resid_dropout: 0.1,
            ..Self::new(layers, heads, d, 64_000, ctx)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("ctx_len", self.ctx_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, p) in [
            ("attn_dropout", self.attn_dropout),
            ("embd_dropout", self.embd_dropout),
            ("resid_dropout", self.resid_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0,1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form count of learnable scalars.
    ///
    /// Per block: qkv `3d^2 + 3d`, output projection `d^2 + d`, MLP
    /// `2 d d_ff + d_ff + d`, two layer norms `4d`. With `d_ff = 4d` that is
    /// `12d^2 + 13d`.
    pub fn param_count(&self) -> u64 {
        let (v, d, ff, ctx, l) = (
            self.vocab_size as u64,
            self.d_model as u64,
            self.d_ff as u64,
            self.ctx_len as u64,
            self.n_layers as u64,
        );
        let block = 4 * d * d + 4 * d + 2 * d * ff + ff + d + 4 * d;
        let head = if self.tie_lm_head { 0 } else { v * d };
        v * d + ctx * d + l * block + 2 * d + head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_tables() {
        let small = ModelConfig::preset("0.1B").unwrap();
        assert_eq!(small.n_layers, 12);
        assert_eq!(small.n_heads, 12);
        assert_eq!(small.vocab_size, 64_000);
        assert_eq!(small.ctx_len, 768);
        assert_eq!(small.attn_dropout, 0.1);
        let medium = ModelConfig::preset("0.3B").unwrap();
        assert_eq!(medium.n_layers, 24);
        assert_eq!(medium.ctx_len, 1024);
        assert!(ModelConfig::preset("7B").is_err());
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(ModelConfig::preset("0.1B").unwrap().param_count(), 134_797_824);
        assert_eq!(ModelConfig::preset("0.3B").unwrap().param_count(), 368_896_000);
        let degenerate = ModelConfig::new(0, 1, 1, 1, 1);
        assert_eq!(degenerate.param_count(), 4);
        let untied = ModelConfig {
            tie_lm_head: false,
            ..ModelConfig::preset("0.1B").unwrap()
        };
        assert_eq!(untied.param_count(), 134_797_824 + 64_000 * 768);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::new(2, 3, 8, 16, 8).validate().is_err());
        assert!(ModelConfig::new(2, 2, 8, 16, 8).validate().is_ok());
        let bad = ModelConfig {
            attn_dropout: 1.0,
            ..ModelConfig::new(2, 2, 8, 16, 8)
        };
        assert!(bad.validate().is_err());
    }
}
