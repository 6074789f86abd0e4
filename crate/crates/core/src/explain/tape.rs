//! Differentiable versions of the attribution and the alignment hinge, recorded
//! on a trace's own tape so the hinge can be trained. Gradients `∇h` enter as
//! constants.

use crate::encoder::{EncoderError, ForwardTrace, LayerGradients};
use crate::numerics::{Axis, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Records `softmax_j(Σ_l sqrt(relu(tanh(ᾱ_j) · tanh(w̄_j))))` over `rows`,
/// returning a `[1, |rows|]` variable and the leaves holding `∇h` per layer.
pub(crate) fn info_flow_scores<T: Scalar>(
    trace: &mut ForwardTrace<T>,
    grads: &LayerGradients<T>,
    rows: &[usize],
) -> Result<(Var, Vec<Var>), EncoderError> {
    let layers = trace.layers();
    let mut total: Option<Var> = None;
    let mut leaves = Vec::with_capacity(layers);
    for l in 1..=layers {
        let h = trace.h[l];
        let heads = trace.attn[l - 1].clone();
        let tape = &mut trace.tape;

        let mut received = tape.mean(heads[0], Axis::Rows)?;
        for &a in &heads[1..] {
            let m = tape.mean(a, Axis::Rows)?;
            received = tape.add(received, m)?;
        }
        let received = tape.scalar_mul(received, T::one() / T::of_usize(heads.len()))?;
        let alpha = pick_columns(tape, received, rows)?;

        let g = tape.leaf(grads.layer(l).clone());
        leaves.push(g);
        let gh = tape.hadamard(g, h)?;
        let w = tape.mean(gh, Axis::Cols)?;
        let w = tape.gather(w, rows.to_vec())?;
        let w = tape.transpose(w)?;

        let ta = tape.tanh(alpha)?;
        let tw = tape.tanh(w)?;
        let prod = tape.hadamard(ta, tw)?;
        let clamped = tape.relu(prod)?;
        let s = tape.sqrt(clamped)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok((trace.tape.softmax(total)?, leaves))
}

fn pick_columns<T: Scalar>(tape: &mut Tape<T>, row: Var, cols: &[usize]) -> Result<Var, EncoderError> {
    let col = tape.transpose(row)?;
    let picked = tape.gather(col, cols.to_vec())?;
    Ok(tape.transpose(picked)?)
}

/// Records `relu(mean_{m=0} v − mean_{m=1} v + margin)` for a `[1, J]` score row.
/// The caller guarantees both mask values occur.
pub(crate) fn marginal_hinge<T: Scalar>(tape: &mut Tape<T>, scores: Var, mask: &[u8], margin: T) -> Result<Var, EncoderError> {
    let nc = mask.iter().filter(|&&m| m == 1).count();
    let ns = mask.len() - nc;
    // mean difference as one dot product: weights −1/Nc on causal, +1/Ns elsewhere
    let weights: Vec<T> = mask
        .iter()
        .map(|&m| {
            if m == 1 {
                -T::one() / T::of_usize(nc)
            } else {
                T::one() / T::of_usize(ns)
            }
        })
        .collect();
    let w = tape.leaf(Tensor::matrix(mask.len(), 1, weights)?);
    let diff = tape.matmul(scores, w)?;
    let m = tape.leaf(Tensor::scalar(margin));
    let shifted = tape.add(diff, m)?;
    Ok(tape.relu(shifted)?)
}
