use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::explain::tape::{info_flow_scores, marginal_hinge};
use crate::explain::{explain_with_prediction, explained_rows, ExplanationConfig};
use crate::grammar::{encode, Encoded, Label, MoleculeString, Vocabulary};
use crate::numerics::Tensor;
use crate::rng;
use crate::scalar::{Dual, Scalar};

use super::forward::{forward, forward_offset};
use super::{argmax, layer_gradients, Adam, EncoderError, EncoderParams, TrainConfig};

/// Metrics of one split at one point in training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Classification accuracy; `None` in regression mode.
    pub accuracy: Option<f64>,
    pub exp_auc: Option<f64>,
    pub mean_ep: Option<f64>,
    pub mean_fidelity: Option<f64>,
    pub mean_spurious_ratio: Option<f64>,
    pub molecules: usize,
    pub annotated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub metrics: SplitMetrics,
    /// Mean cross-entropy (or squared error) over training examples.
    pub train_loss: f64,
    /// Mean alignment hinge over annotated training examples.
    pub train_alignment_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: EncoderParams<T>,
    pub history: Vec<EpochMetrics>,
    /// Optimiser steps in which the alignment loss had a non-zero value.
    pub alignment_active_steps: usize,
}

struct Prepared {
    enc: Encoded,
    label: Label,
    /// Causal flags of the explainable tokens, when annotated with both values.
    mask: Option<Vec<u8>>,
}

fn prepare<T: Scalar>(params: &EncoderParams<T>, vocab: &Vocabulary, m: &MoleculeString) -> Result<Prepared, EncoderError> {
    let label = m.label().ok_or(EncoderError::NoLabels)?;
    match (label, params.config.is_regression()) {
        (Label::Class(c), false) if c < params.config.n_classes => {}
        (Label::Value(v), true) if v.is_finite() => {}
        (l, _) => return Err(EncoderError::BadLabel(format!("{l:?}"))),
    }
    let enc = encode(m, vocab, params.config.max_len)?;
    let kept = enc.kept_tokens();
    let mask = m.mask().map(|mk| mk[..kept].to_vec()).filter(|mk| mk.contains(&0) && mk.contains(&1));
    Ok(Prepared { enc, label, mask })
}

/// Weights of one example's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights<T> {
    pub ce: T,
    pub alignment: T,
    /// Hinge margin Δ1.
    pub margin: T,
    /// Differentiate the hinge through `∇h` as well.
    pub second_order: bool,
}

impl<T: Scalar> LossWeights<T> {
    pub fn ce_only() -> Self {
        Self {
            ce: T::one(),
            alignment: T::zero(),
            margin: T::zero(),
            second_order: false,
        }
    }
}

/// Gradient of `ce · loss + alignment · hinge` for one example, with the loss
/// values. The hinge is skipped when its weight is zero or the example
/// carries no usable mask.
pub fn sample_gradient<T: Scalar>(
    params: &EncoderParams<T>,
    enc: &Encoded,
    label: Label,
    mask: Option<&[u8]>,
    weights: LossWeights<T>,
) -> Result<(EncoderParams<T>, T, Option<T>), EncoderError> {
    let mut trace = forward(params, &enc.ids, &enc.validity)?;
    let logits = trace.logits;
    let (loss, target) = match label {
        Label::Class(c) => (trace.tape.cross_entropy(logits, vec![c])?, c),
        Label::Value(v) => {
            let y = trace.tape.leaf(Tensor::scalar(T::of(v)));
            let diff = trace.tape.sub(logits, y)?;
            (trace.tape.hadamard(diff, diff)?, 0)
        }
    };
    let mut total = trace.tape.scalar_mul(loss, weights.ce)?;
    let mut hinge_value = None;
    let mut grad_leaves = Vec::new();
    if let Some(mask) = mask.filter(|_| weights.alignment > T::zero()) {
        let grads = layer_gradients(params, &trace, target)?;
        let (rows, tokens) = explained_rows(&trace);
        let aligned: Vec<u8> = tokens.iter().map(|&i| mask[i]).collect();
        if aligned.contains(&0) && aligned.contains(&1) {
            let (scores, leaves) = info_flow_scores(&mut trace, &grads, &rows)?;
            let hinge = marginal_hinge(&mut trace.tape, scores, &aligned, weights.margin)?;
            hinge_value = Some(trace.tape.value(hinge).item());
            let weighted = trace.tape.scalar_mul(hinge, weights.alignment)?;
            total = trace.tape.add(total, weighted)?;
            grad_leaves = leaves;
        }
    }
    let loss_value = trace.tape.value(loss).item();
    let mut adj = trace.tape.backward(total)?;
    let mut grads = params.zeros_like();
    for (slot, &var) in grads.tensors_mut().into_iter().zip(trace.params.all()) {
        *slot = adj.take(var);
    }
    if weights.second_order && !grad_leaves.is_empty() {
        let u: Vec<Tensor<T>> = grad_leaves.iter().map(|&g| adj.wrt(g)).collect();
        let extra = gradient_tangent(params, enc, target, &u)?;
        for (g, e) in grads.tensors_mut().into_iter().zip(extra.tensors()) {
            g.add_assign(e);
        }
    }
    Ok((grads, loss_value, hinge_value))
}

/// `∂/∂θ Σ_l ⟨u_l, ∂z_c/∂h^(l)⟩`: the part of a hinge gradient that flows
/// through `∇h`, where `u_l` is the hinge's sensitivity to `∇h^(l)`. Adding
/// `ε·u_l` to every layer output turns `Σ_l ⟨u_l, ∇h^(l)⟩` into `dz_c/dε`,
/// so one reverse pass in dual numbers yields its parameter gradient.
fn gradient_tangent<T: Scalar>(
    params: &EncoderParams<T>,
    enc: &Encoded,
    target: usize,
    u: &[Tensor<T>],
) -> Result<EncoderParams<T>, EncoderError> {
    let dual: EncoderParams<Dual<T>> = params.cast();
    let offsets: Vec<Tensor<Dual<T>>> = u
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&e| Dual::new(T::zero(), e)).collect()))
        .collect::<Result<_, _>>()?;
    let trace = forward_offset(&dual, &enc.ids, &enc.validity, &offsets)?;
    let mut seed = Tensor::zeros(&[1, dual.config.n_classes]);
    seed.data_mut()[target] = Dual::constant(T::one());
    let adj = trace.tape.backward_with(trace.logits, seed)?;
    let mut out = params.zeros_like();
    for (slot, &var) in out.tensors_mut().into_iter().zip(trace.params.all()) {
        let g = adj.wrt(var);
        *slot = Tensor::new(g.shape().to_vec(), g.data().iter().map(|d| d.eps).collect())?;
    }
    Ok(out)
}

/// Fine-tunes `params` on labelled molecules; annotated ones also feed the
/// alignment hinge. Held-out metrics are recorded after every epoch.
pub fn train<T: Scalar>(
    mut params: EncoderParams<T>,
    vocab: &Vocabulary,
    train_set: &[MoleculeString],
    heldout: &[MoleculeString],
    cfg: &TrainConfig,
    explain_cfg: &ExplanationConfig,
) -> Result<TrainOutcome<T>, EncoderError> {
    cfg.validate()?;
    explain_cfg.validate()?;
    if train_set.is_empty() || train_set.iter().any(|m| m.label().is_none()) {
        return Err(EncoderError::NoLabels);
    }
    let prepared: Vec<Prepared> = train_set.iter().map(|m| prepare(&params, vocab, m)).collect::<Result<_, _>>()?;
    let mut adam = Adam::new(&params, cfg);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "train.shuffle");
    let lambda = T::of(cfg.lambda_m);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut active_steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut hinge_sum, mut hinge_n) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let annotated = batch.iter().filter(|&&i| prepared[i].mask.is_some()).count();
            let ce_w = T::one() / T::of_usize(batch.len());
            let lm_w = if annotated > 0 { lambda / T::of_usize(annotated) } else { T::zero() };
            let mut acc = params.zeros_like();
            let mut step_hinge = T::zero();
            for &i in batch {
                let p = &prepared[i];
                let weights = LossWeights {
                    ce: ce_w,
                    alignment: lm_w,
                    margin: T::of(cfg.margin),
                    second_order: cfg.second_order,
                };
                let (g, loss, hinge) = sample_gradient(&params, &p.enc, p.label, p.mask.as_deref(), weights)?;
                for (a, g) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                    a.add_assign(g);
                }
                loss_sum += loss.as_f64();
                if let Some(h) = hinge {
                    hinge_sum += h.as_f64();
                    hinge_n += 1;
                    step_hinge = step_hinge + h;
                }
            }
            if step_hinge * lm_w > T::zero() {
                active_steps += 1;
            }
            adam.update(&mut params, &acc);
        }
        if !params.all_finite() {
            return Err(EncoderError::Numerics(crate::numerics::NumericsError::NonFinite("adam update")));
        }
        let metrics = evaluate(&params, vocab, heldout, explain_cfg)?;
        history.push(EpochMetrics {
            epoch,
            split: "val".into(),
            metrics,
            train_loss: loss_sum / prepared.len() as f64,
            train_alignment_loss: if hinge_n > 0 { hinge_sum / hinge_n as f64 } else { 0.0 },
        });
    }
    Ok(TrainOutcome {
        params,
        history,
        alignment_active_steps: active_steps,
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Accuracy plus explanation metrics over `molecules`, aggregated in index order.
pub fn evaluate<T: Scalar>(
    params: &EncoderParams<T>,
    vocab: &Vocabulary,
    molecules: &[MoleculeString],
    explain_cfg: &ExplanationConfig,
) -> Result<SplitMetrics, EncoderError> {
    let (mut correct, mut labelled) = (0usize, 0usize);
    let (mut aucs, mut eps, mut fids, mut spurs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, m) in molecules.iter().enumerate() {
        let (report, probs) = explain_with_prediction(params, vocab, m, i as u64, explain_cfg)?;
        if let (Some(Label::Class(c)), false) = (m.label(), params.config.is_regression()) {
            labelled += 1;
            if argmax(&probs) == c {
                correct += 1;
            }
        }
        fids.extend(report.fidelity);
        aucs.extend(report.auc);
        eps.extend(report.ep);
        spurs.extend(report.spurious_ratio);
    }
    Ok(SplitMetrics {
        accuracy: (labelled > 0).then(|| correct as f64 / labelled as f64),
        exp_auc: mean(&aucs),
        mean_ep: mean(&eps),
        mean_fidelity: mean(&fids),
        mean_spurious_ratio: mean(&spurs),
        molecules: molecules.len(),
        annotated: aucs.len(),
    })
}
