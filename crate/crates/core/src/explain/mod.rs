//! Token attributions for the classifier and the metrics that judge them.
//!
//! The main attribution combines, per layer, the attention mass a token
//! receives with its gradient×state signal:
//!
//! ```text
//! w̄_j = mean_d(∇h_j ⊙ h_j)
//! s_j = sqrt(max(0, tanh(ᾱ_j) · tanh(w̄_j)))
//! v   = softmax_j(Σ_layers s_j)
//! ```
//!
//! Attention-only, gradient×input and plain-gradient variants serve as
//! ablations. CLS, SEP, PAD and MASK positions never receive a score.

mod metrics;
mod report;
pub(crate) mod tape;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, ForwardTrace, LayerGradients};
use crate::grammar::Special;
use crate::numerics::softmax_in_place;
use crate::scalar::Scalar;

pub use metrics::{
    aligned_mask, ep, explanation_auc, fidelity, fidelity_of_positions, marginal_loss, random_fidelity,
    spurious_gradient_ratio, top_positions,
};
pub use report::{explain_molecule, explain_with_prediction, read_reports, write_reports, ExplanationReport};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("trace and gradients come from different passes")]
    TraceGradMismatch,
    #[error("unknown explanation method {0:?}")]
    UnknownMethod(String),
    #[error("mask needs at least one 0 and one 1")]
    DegenerateMask,
    #[error("mask length {mask} differs from score count {scores}")]
    MaskLength { mask: usize, scores: usize },
    #[error("removal ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("no explainable token in the input")]
    NothingToExplain,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    InfoFlow,
    AttentionOnly,
    GradInput,
    GradOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::InfoFlow, Method::AttentionOnly, Method::GradInput, Method::GradOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::InfoFlow => "info_flow",
            Method::AttentionOnly => "attention_only",
            Method::GradInput => "grad_input",
            Method::GradOnly => "grad_only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ExplainError::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplanationConfig {
    pub method: Method,
    /// Fraction of tokens removed for fidelity.
    pub removal_ratio: f64,
}

impl Default for ExplanationConfig {
    fn default() -> Self {
        Self {
            method: Method::InfoFlow,
            removal_ratio: 0.2,
        }
    }
}

impl ExplanationConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if !(self.removal_ratio > 0.0 && self.removal_ratio <= 1.0) {
            return Err(ExplainError::InvalidRatio(self.removal_ratio));
        }
        Ok(())
    }
}

/// Softmax-normalised attribution over the explainable tokens of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores<T> {
    pub scores: Vec<T>,
    /// Trace row of each score.
    pub rows: Vec<usize>,
    /// Molecule token index of each score.
    pub token_indices: Vec<usize>,
    pub method: Method,
    /// Pre-softmax contribution of each layer, `[layer][position]`.
    pub per_layer: Vec<Vec<T>>,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Positions (into `scores`) sorted by descending score, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order
    }
}

fn explained(id: usize) -> bool {
    ![Special::Cls, Special::Sep, Special::Pad, Special::Mask]
        .iter()
        .any(|s| s.id() == id)
}

/// Trace rows that receive a score, with their molecule token indices.
pub fn explained_rows<T: Scalar>(trace: &ForwardTrace<T>) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut tokens = Vec::new();
    for (r, (&pos, id)) in trace.valid_positions().iter().zip(trace.row_ids()).enumerate() {
        if explained(id) {
            rows.push(r);
            tokens.push(pos - 1);
        }
    }
    (rows, tokens)
}

/// Attention received by each row in layer `l`, averaged over heads and queries.
pub fn attention_received<T: Scalar>(trace: &ForwardTrace<T>, l: usize) -> Vec<T> {
    let heads = trace.heads();
    let n = trace.valid_positions().len();
    let mut out = vec![T::zero(); n];
    for h in 0..heads {
        let a = trace.attention(l, h);
        for q in 0..n {
            for (o, &v) in out.iter_mut().zip(a.row(q)) {
                *o = *o + v;
            }
        }
    }
    let k = T::one() / T::of_usize(heads * n);
    out.iter_mut().for_each(|v| *v = *v * k);
    out
}

/// `mean_d(∇h_j ⊙ h_j)` per row for layer `l`.
pub fn gradient_times_state<T: Scalar>(trace: &ForwardTrace<T>, grads: &LayerGradients<T>, l: usize) -> Vec<T> {
    let (h, g) = (trace.state(l), grads.layer(l));
    let d = T::of_usize(h.cols());
    (0..h.rows())
        .map(|r| h.row(r).iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum::<T>() / d)
        .collect()
}

fn gradient_magnitude<T: Scalar>(grads: &LayerGradients<T>, l: usize) -> Vec<T> {
    let g = grads.layer(l);
    let d = T::of_usize(g.cols());
    (0..g.rows()).map(|r| g.row(r).iter().map(|v| v.abs()).sum::<T>() / d).collect()
}

fn check_pair<T: Scalar>(trace: &ForwardTrace<T>, grads: &LayerGradients<T>) -> Result<(), ExplainError> {
    let n = trace.valid_positions().len();
    if grads.layers() != trace.layers() || grads.iter().any(|g| g.rows() != n || g.cols() != trace.state(0).cols()) {
        return Err(ExplainError::TraceGradMismatch);
    }
    Ok(())
}

fn finish<T: Scalar>(trace: &ForwardTrace<T>, method: Method, per_layer_all_rows: Vec<Vec<T>>) -> Result<ImportanceScores<T>, ExplainError> {
    let (rows, token_indices) = explained_rows(trace);
    if rows.is_empty() {
        return Err(ExplainError::NothingToExplain);
    }
    let per_layer: Vec<Vec<T>> = per_layer_all_rows
        .iter()
        .map(|vals| rows.iter().map(|&r| vals[r]).collect())
        .collect();
    let mut scores = vec![T::zero(); rows.len()];
    for layer in &per_layer {
        for (s, &v) in scores.iter_mut().zip(layer) {
            *s = *s + v;
        }
    }
    softmax_in_place(&mut scores);
    Ok(ImportanceScores {
        scores,
        rows,
        token_indices,
        method,
        per_layer,
    })
}

/// Scores with the configured method.
pub fn importance<T: Scalar>(
    trace: &ForwardTrace<T>,
    grads: &LayerGradients<T>,
    config: &ExplanationConfig,
) -> Result<ImportanceScores<T>, ExplainError> {
    match config.method {
        Method::InfoFlow => info_flow(trace, grads),
        other => baseline_scores(trace, grads, other),
    }
}

/// Attention-and-gradient attribution.
pub fn info_flow<T: Scalar>(trace: &ForwardTrace<T>, grads: &LayerGradients<T>) -> Result<ImportanceScores<T>, ExplainError> {
    check_pair(trace, grads)?;
    let per_layer = (1..=trace.layers())
        .map(|l| {
            let alpha = attention_received(trace, l);
            let w = gradient_times_state(trace, grads, l);
            alpha
                .iter()
                .zip(&w)
                .map(|(&a, &w)| (a.tanh() * w.tanh()).max(T::zero()).sqrt())
                .collect()
        })
        .collect();
    finish(trace, Method::InfoFlow, per_layer)
}

/// Ablation attributions: attention only, gradient×input, or gradient magnitude.
pub fn baseline_scores<T: Scalar>(
    trace: &ForwardTrace<T>,
    grads: &LayerGradients<T>,
    method: Method,
) -> Result<ImportanceScores<T>, ExplainError> {
    check_pair(trace, grads)?;
    let per_layer = (1..=trace.layers())
        .map(|l| match method {
            Method::AttentionOnly => Ok(attention_received(trace, l)),
            Method::GradInput => Ok(gradient_times_state(trace, grads, l)
                .into_iter()
                .map(|w| w.tanh().max(T::zero()))
                .collect()),
            Method::GradOnly => Ok(gradient_magnitude(grads, l)),
            Method::InfoFlow => Err(ExplainError::UnknownMethod("info_flow is not a baseline".into())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    finish(trace, method, per_layer)
}

#[cfg(test)]
mod tests;
