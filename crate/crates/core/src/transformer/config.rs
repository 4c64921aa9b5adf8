use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};

/// Architecture hyperparameters shared by the LM and the NMT model.
///
/// Reference scale is `d_model = 1024`, 6 layers, 8 heads (adapters of 256);
/// the defaults here are desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_lm: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub n_languages: usize,
    pub adapter_dim: Option<usize>,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers_lm: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_positions: 128,
            dropout: 0.1,
            vocab_size: 0,
            n_languages: 1,
            adapter_dim: None,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers_lm == 0 || self.ffn_dim == 0 || self.max_positions < 2 {
            return bad("n_layers_lm, ffn_dim must be positive and max_positions ≥ 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size <= crate::bpe::NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no room for real tokens", self.vocab_size));
        }
        if !(1..=2).contains(&self.n_languages) {
            return bad(format!("n_languages must be 1 or 2, got {}", self.n_languages));
        }
        if self.adapter_dim == Some(0) {
            return bad("adapter_dim must be positive".into());
        }
        if !self.tie_embeddings {
            return bad("tie_embeddings is fixed to true".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_layers_lm", self.n_layers_lm.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("vocab_size", self.vocab_size.to_string()),
            ("n_languages", self.n_languages.to_string()),
            (
                "adapter_dim",
                self.adapter_dim.map_or("none".to_string(), |b| b.to_string()),
            ),
            ("tie_embeddings", self.tie_embeddings.to_string()),
        ]
    }

    pub fn from_kv(text: &str) -> std::result::Result<Self, CheckpointError> {
        let mut c = ModelConfig::default();
        let mut seen = 0;
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
            let bad = || CheckpointError::Malformed(format!("config value {k}={v}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "d_model" => c.d_model = int()?,
                "n_layers_lm" => c.n_layers_lm = int()?,
                "n_heads" => c.n_heads = int()?,
                "ffn_dim" => c.ffn_dim = int()?,
                "max_positions" => c.max_positions = int()?,
                "dropout" => c.dropout = v.parse().map_err(|_| bad())?,
                "vocab_size" => c.vocab_size = int()?,
                "n_languages" => c.n_languages = int()?,
                "adapter_dim" => {
                    c.adapter_dim = if v == "none" { None } else { Some(int()?) }
                }
                "tie_embeddings" => c.tie_embeddings = v.parse().map_err(|_| bad())?,
                _ => return Err(CheckpointError::Malformed(format!("unknown config key {k}"))),
            }
            seen += 1;
        }
        if seen != 10 {
            return Err(CheckpointError::Malformed("incomplete config section".into()));
        }
        Ok(c)
    }

    /// First field that differs from `expected`, if any.
    pub fn first_difference(&self, expected: &ModelConfig) -> Option<(String, String, String)> {
        self.to_kv()
            .into_iter()
            .zip(expected.to_kv())
            .find(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k.to_string(), a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig {
            vocab_size: 300,
            adapter_dim: Some(16),
            ..Default::default()
        };
        let text: String = c.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        assert_eq!(ModelConfig::from_kv(&text).unwrap(), c);
    }

    #[test]
    fn heads_must_divide() {
        let c = ModelConfig {
            d_model: 10,
            n_heads: 4,
            vocab_size: 50,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
