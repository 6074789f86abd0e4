use serde::{Deserialize, Serialize};

use super::EncoderError;

/// Shape of the transformer classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Class count; 1 selects regression.
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 64,
            max_len: 64,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |why: String| Err(EncoderError::InvalidConfig(why));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layers, heads, d_model and d_ff must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size < 6 {
            return bad("vocab_size must cover the five specials and one token".into());
        }
        if self.n_classes == 0 {
            return bad("n_classes must be 1 (regression) or at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn is_regression(&self) -> bool {
        self.n_classes == 1
    }
}

/// Optimiser and loss settings for fine-tuning and pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hinge margin of the alignment loss.
    pub margin: f64,
    /// Weight of the alignment loss.
    pub lambda_m: f64,
    /// Differentiate through the inner gradient of the importance scores.
    pub second_order: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            margin: 0.1,
            lambda_m: 1.0,
            second_order: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |why: &str| Err(EncoderError::InvalidConfig(why.to_string()));
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.margin >= 0.0) || !(self.lambda_m >= 0.0) {
            return bad("margin and lambda_m must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.head_dim(), 16);
        c.d_model = 30;
        c.heads = 4;
        assert!(matches!(c.validate(), Err(EncoderError::InvalidConfig(_))));
    }

    #[test]
    fn train_defaults_validate() {
        let t = TrainConfig::default();
        assert!(t.validate().is_ok());
        assert_eq!(t.margin, 0.1);
        assert!(TrainConfig { lr: 0.0, ..t.clone() }.validate().is_err());
        assert!(TrainConfig { margin: -1.0, ..t }.validate().is_err());
    }
}
