use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::encoder::{explanation_target, layer_gradients, predict, EncoderParams};
use crate::grammar::{display_labels, Label, MoleculeString, Vocabulary};
use crate::scalar::Scalar;

use super::{aligned_mask, ep, explanation_auc, fidelity, importance, spurious_gradient_ratio, ExplainError, ExplanationConfig, Method};

/// One line of `explanations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationReport {
    pub id: u64,
    /// `name-k` labels of the scored tokens.
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub ep: Option<f64>,
    pub auc: Option<f64>,
    pub fidelity: Option<f64>,
    pub spurious_ratio: Option<f64>,
    pub method: Method,
}

/// Scores one molecule and computes every metric its annotations allow.
pub fn explain_molecule<T: Scalar>(
    params: &EncoderParams<T>,
    vocab: &Vocabulary,
    molecule: &MoleculeString,
    id: u64,
    config: &ExplanationConfig,
) -> Result<ExplanationReport, ExplainError> {
    explain_with_prediction(params, vocab, molecule, id, config).map(|(r, _)| r)
}

/// As [`explain_molecule`], also returning the model output.
pub fn explain_with_prediction<T: Scalar>(
    params: &EncoderParams<T>,
    vocab: &Vocabulary,
    molecule: &MoleculeString,
    id: u64,
    config: &ExplanationConfig,
) -> Result<(ExplanationReport, Vec<T>), ExplainError> {
    let (probs, trace) = predict(params, molecule, vocab)?;
    let label = match molecule.label() {
        Some(Label::Class(c)) => Some(c),
        _ => None,
    };
    let target = explanation_target(params, &trace, label);
    let grads = layer_gradients(params, &trace, target)?;
    let scores = importance(&trace, &grads, config)?;

    let labels = display_labels(molecule.tokens());
    let tokens = scores.token_indices.iter().map(|&i| labels[i].clone()).collect();
    let fid = fidelity(params, molecule, &scores, config.removal_ratio, vocab)?;

    let (mut ep_v, mut auc_v, mut spur_v) = (None, None, None);
    if let Some(mask) = molecule.mask() {
        let m = aligned_mask(&scores, mask);
        if m.contains(&0) && m.contains(&1) {
            ep_v = Some(ep(&scores.scores, &m)?.as_f64());
            auc_v = Some(explanation_auc(&scores.scores, &m)?);
            spur_v = Some(spurious_gradient_ratio(&grads, &scores.rows, &m)?.as_f64());
        }
    }
    let report = ExplanationReport {
        id,
        tokens,
        scores: scores.scores.iter().map(|v| v.as_f64()).collect(),
        ep: ep_v,
        auc: auc_v,
        fidelity: Some(fid.as_f64()),
        spurious_ratio: spur_v,
        method: config.method,
    };
    Ok((report, probs))
}

pub fn write_reports<W: Write>(mut w: W, reports: &[ExplanationReport]) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_reports<R: BufRead>(r: R) -> Result<Vec<ExplanationReport>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
