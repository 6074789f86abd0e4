use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grammar::{Special, SPECIAL_COUNT};
use crate::numerics::{central_difference, max_relative_error, Tensor};
use crate::rng;

use super::forward::forward;
use super::{forward_suffix, layer_gradients, sample_gradient, LossWeights, EncoderConfig, EncoderError, EncoderParams};
use crate::grammar::{Encoded, Label};

/// Model and probe settings of the finite-difference self-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfcheckConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Regular tokens in the probe input.
    pub tokens: usize,
    pub eps: f64,
    /// Std of the random parameters; larger than the training init so that
    /// gradients sit well above finite-difference round-off.
    pub param_std: f64,
    pub seed: u64,
}

impl Default for SelfcheckConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 12,
            max_len: 12,
            tokens: 8,
            eps: 1e-5,
            param_std: 0.25,
            seed: 0,
        }
    }
}

/// Worst component of one compared gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub components: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub checks: Vec<GradientCheck>,
    pub max_relative_error: f64,
}

impl SelfcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Random parameters and a random valid input for the self-check.
pub fn selfcheck_instance(cfg: &SelfcheckConfig) -> Result<(EncoderParams<f64>, Encoded, usize), EncoderError> {
    let ec = EncoderConfig {
        layers: cfg.layers,
        heads: cfg.heads,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        vocab_size: cfg.vocab_size,
        max_len: cfg.max_len,
        n_classes: 2,
        seed: cfg.seed,
    };
    if cfg.tokens == 0 || cfg.tokens + 2 > cfg.max_len || !(cfg.eps > 0.0) || !(cfg.param_std > 0.0) {
        return Err(EncoderError::InvalidConfig("selfcheck needs 0 < tokens <= max_len - 2, eps > 0, param_std > 0".into()));
    }
    let mut params = EncoderParams::<f64>::init(&ec)?;
    let mut rng = rng::stream(cfg.seed, "selfcheck");
    let normal = Normal::new(0.0, cfg.param_std).expect("valid std");
    let names = params.names();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let offset = if name.ends_with("gain") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = offset + normal.sample(&mut rng);
        }
    }
    let mut ids = vec![Special::Pad.id(); cfg.max_len];
    let mut validity = vec![0u8; cfg.max_len];
    ids[0] = Special::Cls.id();
    for p in 1..=cfg.tokens {
        ids[p] = rng.random_range(SPECIAL_COUNT..cfg.vocab_size);
    }
    ids[cfg.tokens + 1] = Special::Sep.id();
    validity[..cfg.tokens + 2].fill(1);
    let label = rng.random_range(0..2);
    Ok((params, Encoded { ids, validity }, label))
}

/// Compares tape gradients with central differences: every parameter tensor
/// of the cross-entropy loss, and `∂z_c/∂h^(l)` for every layer.
pub fn selfcheck(cfg: &SelfcheckConfig) -> Result<SelfcheckReport, EncoderError> {
    let (params, enc, label) = selfcheck_instance(cfg)?;
    let mut checks = Vec::new();

    let (analytic, _, _) = sample_gradient(&params, &enc, Label::Class(label), None, LossWeights::ce_only())?;
    let loss_at = |p: &EncoderParams<f64>| -> f64 {
        let (_, loss, _) = match sample_gradient(p, &enc, Label::Class(label), None, LossWeights::ce_only()) {
            Ok(v) => v,
            Err(_) => return f64::NAN,
        };
        loss
    };
    let names = params.names();
    for (k, name) in names.iter().enumerate() {
        let base = params.tensors()[k].clone();
        let numeric = central_difference(
            |probe: &Tensor<f64>| {
                let mut p = params.clone();
                *p.tensors_mut()[k] = probe.clone();
                loss_at(&p)
            },
            &base,
            cfg.eps,
        );
        checks.push(GradientCheck {
            name: name.clone(),
            components: base.len(),
            max_relative_error: max_relative_error(analytic.tensors()[k].data(), numeric.data()),
        });
    }

    let trace = forward(&params, &enc.ids, &enc.validity)?;
    let grads = layer_gradients(&params, &trace, label)?;
    for l in 1..=trace.layers() {
        let base = trace.state(l).clone();
        let numeric = central_difference(
            |probe: &Tensor<f64>| match forward_suffix(&params, &trace, l, probe) {
                Ok(logits) => logits.data()[label],
                Err(_) => f64::NAN,
            },
            &base,
            cfg.eps,
        );
        checks.push(GradientCheck {
            name: format!("h{l}"),
            components: base.len(),
            max_relative_error: max_relative_error(grads.layer(l).data(), numeric.data()),
        });
    }
    let worst = checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0_f64, |w, e| if e.is_nan() || w.is_nan() { f64::NAN } else { w.max(e) });
    Ok(SelfcheckReport {
        checks,
        max_relative_error: worst,
    })
}
