//! Architecture configuration.
//!
//! The canonical JSON form (field declaration order, no whitespace) is what
//! checkpoints embed, so two configs compare equal exactly when their JSON
//! bytes do.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Plain encoder-decoder: every layer runs the baseline form, retrieval
    /// is never consulted.
    None,
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NbEncoderKind {
    Classic,
    Conditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub nl_layers: usize,
    pub nb_layers: usize,
    pub dec_layers: usize,
    /// Chunk size for retrieval alignment.
    pub m: usize,
    /// Neighbours consulted per chunk.
    pub k: usize,
    /// Aggregation period: layers with 1-based index ≡ 0 (mod p) aggregate.
    pub p: usize,
    pub aggregation: Aggregation,
    pub nb_encoder: NbEncoderKind,
    /// Attention-weight dropout on cross-attention paths during training.
    pub dropout: f64,
    pub code_vocab_size: usize,
    pub nl_vocab_size: usize,
    pub max_code_len: usize,
    pub max_nl_len: usize,
}

#[derive(Debug, thiserror::Error)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

impl ModelConfig {
    /// Full-size defaults; only the data-dependent fields are required.
    pub fn with_defaults(m: usize, code_vocab_size: usize, nl_vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 256,
            heads: 8,
            nl_layers: 6,
            nb_layers: 6,
            dec_layers: 6,
            m,
            k: 2,
            p: 3,
            aggregation: Aggregation::Sequential,
            nb_encoder: NbEncoderKind::Classic,
            dropout: 0.4,
            code_vocab_size,
            nl_vocab_size,
            max_code_len: 128,
            max_nl_len: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if self.d_model == 0 || self.heads == 0 {
            return fail("d_model and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if (self.d_model / self.heads) % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even for rotary positions",
                self.d_model / self.heads
            ));
        }
        if self.nl_layers == 0 || self.nb_layers == 0 || self.dec_layers == 0 {
            return fail("layer counts must be at least 1".into());
        }
        if self.m == 0 {
            return fail("chunk size m must be at least 1".into());
        }
        if self.p == 0 {
            return fail("aggregation period p must be at least 1".into());
        }
        if self.aggregation != Aggregation::None && self.k == 0 {
            return fail("k must be at least 1 when aggregation is enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.code_vocab_size < 4 || self.nl_vocab_size < 4 {
            return fail("vocabularies must include the four reserved tokens".into());
        }
        if self.max_code_len == 0 || self.max_nl_len == 0 {
            return fail("max lengths must be positive".into());
        }
        Ok(())
    }

    /// True when 1-based decoder layer `ell` runs an aggregation form.
    pub fn is_aggregation_layer(&self, ell: usize) -> bool {
        self.aggregation != Aggregation::None && ell >= 1 && ell % self.p == 0
    }

    /// Lowest aggregation layer index, if the schedule has one.
    pub fn first_aggregation_layer(&self) -> Option<usize> {
        (1..=self.dec_layers).find(|&ell| self.is_aggregation_layer(ell))
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelConfig, ConfigError> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_the_published_hyperparameters() {
        let c = ModelConfig::with_defaults(8, 1000, 500);
        assert_eq!(c.d_model, 256);
        assert_eq!(c.heads, 8);
        assert_eq!(c.nl_layers, 6);
        assert_eq!(c.nb_layers, 6);
        assert_eq!(c.dec_layers, 6);
        assert_eq!(c.k, 2);
        assert_eq!(c.p, 3);
        assert_eq!(c.dropout, 0.4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn aggregation_schedule_is_every_p_layers() {
        let c = ModelConfig::with_defaults(8, 100, 100);
        let agg: Vec<usize> = (1..=6).filter(|&l| c.is_aggregation_layer(l)).collect();
        assert_eq!(agg, vec![3, 6]);
        assert_eq!(c.first_aggregation_layer(), Some(3));

        let mut none = c.clone();
        none.aggregation = Aggregation::None;
        assert!((1..=6).all(|l| !none.is_aggregation_layer(l)));
        assert_eq!(none.first_aggregation_layer(), None);

        let mut late = c;
        late.p = 9;
        assert_eq!(late.first_aggregation_layer(), None);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let base = ModelConfig::with_defaults(8, 100, 100);
        let mut c = base.clone();
        c.d_model = 30; // 30/8 not integral
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.heads = 128; // head dim 2 ok, then 256/128=2 even — fine
        assert!(c.validate().is_ok());
        let mut c = base.clone();
        c.d_model = 24;
        c.heads = 8; // head dim 3 odd
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.p = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.code_vocab_size = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn canonical_json_round_trips_and_rejects_unknown_keys() {
        let c = ModelConfig::with_defaults(4, 64, 32);
        let json = c.canonical_json();
        let back = ModelConfig::from_json(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), json);

        let with_extra = json.replace("{", "{\"surprise\":1,");
        assert!(ModelConfig::from_json(&with_extra).is_err());
    }
}
