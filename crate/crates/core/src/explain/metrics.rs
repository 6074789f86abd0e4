use rand::seq::index::sample;
use rand::Rng;

use crate::encoder::{argmax, classify, forward, EncoderParams, LayerGradients};
use crate::grammar::{encode, MoleculeString, Special, Vocabulary};
use crate::scalar::Scalar;

use super::{ExplainError, ImportanceScores};

/// Group means `(mean over mask=1, mean over mask=0)`.
fn group_means<T: Scalar>(scores: &[T], mask: &[u8]) -> Result<(T, T), ExplainError> {
    if scores.len() != mask.len() {
        return Err(ExplainError::MaskLength {
            mask: mask.len(),
            scores: scores.len(),
        });
    }
    let (mut causal, mut spurious) = (T::zero(), T::zero());
    let (mut nc, mut ns) = (0usize, 0usize);
    for (&v, &m) in scores.iter().zip(mask) {
        if m == 1 {
            causal = causal + v;
            nc += 1;
        } else {
            spurious = spurious + v;
            ns += 1;
        }
    }
    if nc == 0 || ns == 0 {
        return Err(ExplainError::DegenerateMask);
    }
    Ok((causal / T::of_usize(nc), spurious / T::of_usize(ns)))
}

/// Per-score mask values picked from a per-token mask.
pub fn aligned_mask<T: Scalar>(scores: &ImportanceScores<T>, token_mask: &[u8]) -> Vec<u8> {
    scores
        .token_indices
        .iter()
        .map(|&i| token_mask.get(i).copied().unwrap_or(0))
        .collect()
}

/// Hinge on mean non-causal score minus mean causal score, margin inside the hinge.
pub fn marginal_loss<T: Scalar>(scores: &[T], mask: &[u8], margin: T) -> Result<T, ExplainError> {
    let (causal, spurious) = group_means(scores, mask)?;
    Ok((spurious - causal + margin).max(T::zero()))
}

/// Relative excess of the mean causal score over the mean non-causal score.
pub fn ep<T: Scalar>(scores: &[T], mask: &[u8]) -> Result<T, ExplainError> {
    let (causal, spurious) = group_means(scores, mask)?;
    Ok((causal - spurious) / spurious)
}

/// Token-level ROC AUC from the rank-sum statistic, ties given average ranks.
pub fn explanation_auc<T: Scalar>(scores: &[T], mask: &[u8]) -> Result<f64, ExplainError> {
    group_means(scores, mask)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = mask.iter().filter(|&&m| m == 1).count() as f64;
    let n_neg = mask.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(mask).filter(|(_, &m)| m == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Share of the stacked per-token gradient norm that falls on non-causal tokens.
///
/// `rows` are the trace rows of the explained tokens and `mask` their causal
/// flags. Returns 0.5 when every gradient is zero.
pub fn spurious_gradient_ratio<T: Scalar>(grads: &LayerGradients<T>, rows: &[usize], mask: &[u8]) -> Result<T, ExplainError> {
    if rows.len() != mask.len() {
        return Err(ExplainError::MaskLength {
            mask: mask.len(),
            scores: rows.len(),
        });
    }
    if !mask.contains(&1) || !mask.contains(&0) {
        return Err(ExplainError::DegenerateMask);
    }
    let (mut causal, mut spurious) = (T::zero(), T::zero());
    for g in grads.iter() {
        let d = T::of_usize(g.cols());
        for (&r, &m) in rows.iter().zip(mask) {
            let mean = g.row(r).iter().copied().sum::<T>() / d;
            if m == 1 {
                causal = causal + mean * mean;
            } else {
                spurious = spurious + mean * mean;
            }
        }
    }
    let (c, s) = (causal.sqrt(), spurious.sqrt());
    if c + s == T::zero() {
        return Ok(T::of(0.5));
    }
    Ok(s / (c + s))
}

/// Indices into `scores` of the `⌈ratio·J⌉` highest scores, ties by lower index.
pub fn top_positions<T: Scalar>(scores: &ImportanceScores<T>, ratio: f64) -> Result<Vec<usize>, ExplainError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ExplainError::InvalidRatio(ratio));
    }
    let k = removal_count(scores.len(), ratio);
    Ok(scores.ranking().into_iter().take(k).collect())
}

fn removal_count(j: usize, ratio: f64) -> usize {
    // guard against 0.2 * 10 = 2.0000000000000004
    (((j as f64) * ratio) - 1e-9).ceil().max(0.0) as usize
}

/// Score drop for the originally predicted class after replacing the tokens at
/// `token_indices` with MASK. Regression models report the output change magnitude.
pub fn fidelity_of_positions<T: Scalar>(
    params: &EncoderParams<T>,
    molecule: &MoleculeString,
    token_indices: &[usize],
    vocab: &Vocabulary,
) -> Result<T, ExplainError> {
    let enc = encode(molecule, vocab, params.config.max_len).map_err(crate::encoder::EncoderError::from)?;
    let before = classify(params, &forward(params, &enc.ids, &enc.validity)?);
    let mut ids = enc.ids.clone();
    for &i in token_indices {
        if i + 1 < ids.len() && enc.validity[i + 1] == 1 {
            ids[i + 1] = Special::Mask.id();
        }
    }
    let after = classify(params, &forward(params, &ids, &enc.validity)?);
    if params.config.is_regression() {
        Ok((before[0] - after[0]).abs())
    } else {
        let c = argmax(&before);
        Ok(before[c] - after[c])
    }
}

/// Fidelity of removing the top-ranked `⌈ρ·J⌉` tokens.
pub fn fidelity<T: Scalar>(
    params: &EncoderParams<T>,
    molecule: &MoleculeString,
    scores: &ImportanceScores<T>,
    ratio: f64,
    vocab: &Vocabulary,
) -> Result<T, ExplainError> {
    let picked: Vec<usize> = top_positions(scores, ratio)?
        .into_iter()
        .map(|p| scores.token_indices[p])
        .collect();
    fidelity_of_positions(params, molecule, &picked, vocab)
}

/// Fidelity of removing `⌈ρ·J⌉` uniformly chosen tokens; the paired baseline.
pub fn random_fidelity<T: Scalar, R: Rng>(
    params: &EncoderParams<T>,
    molecule: &MoleculeString,
    scores: &ImportanceScores<T>,
    ratio: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<T, ExplainError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ExplainError::InvalidRatio(ratio));
    }
    let k = removal_count(scores.len(), ratio);
    let picked: Vec<usize> = sample(rng, scores.len(), k)
        .into_iter()
        .map(|p| scores.token_indices[p])
        .collect();
    fidelity_of_positions(params, molecule, &picked, vocab)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn ep_arithmetic() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(ep(&[0.6, 0.2, 0.2], &[1, 0, 0]).unwrap(), 2.0));
        assert!(close(ep(&[1.0 / 3.0; 3], &[1, 0, 1]).unwrap(), 0.0));
        assert!(close(ep(&[0.25; 4], &[1, 1, 0, 0]).unwrap(), 0.0));
        assert!(matches!(ep(&[0.5, 0.5], &[1, 1]), Err(ExplainError::DegenerateMask)));
        assert!(matches!(ep(&[0.5, 0.5], &[0, 0]), Err(ExplainError::DegenerateMask)));
    }

    #[test]
    fn marginal_loss_arithmetic() {
        assert_eq!(marginal_loss(&[0.6, 0.2, 0.2], &[1, 0, 0], 0.1).unwrap(), 0.0);
        let uniform: f64 = marginal_loss(&[1.0 / 3.0; 3], &[0, 1, 0], 0.1).unwrap();
        assert!((uniform - 0.1).abs() < 1e-15);
        let l: f64 = marginal_loss(&[0.1, 0.5, 0.4], &[1, 0, 0], 0.1).unwrap();
        assert!((l - 0.45).abs() < 1e-15);
        assert!(marginal_loss(&[0.1, 0.9], &[1, 1], 0.1).is_err());
    }

    #[test]
    fn margin_boundary() {
        // zero once the causal mean leads by at least the margin, positive otherwise
        assert_eq!(marginal_loss(&[0.55, 0.45], &[1, 0], 0.1).unwrap(), 0.0);
        assert!(marginal_loss(&[0.54, 0.46], &[1, 0], 0.1).unwrap() > 0.0);
    }

    #[test]
    fn auc_edges() {
        assert_eq!(explanation_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(explanation_auc(&[0.1, 0.2, 0.9], &[1, 1, 0]).unwrap(), 0.0);
        assert_eq!(explanation_auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        // one tie across classes counts half
        assert_eq!(explanation_auc(&[0.5, 0.5, 0.1], &[1, 0, 0]).unwrap(), 0.75);
    }

    /// Pairwise-comparison AUC, the direct definition.
    fn brute_auc(scores: &[f64], mask: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if mask[i] == 1 && mask[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_pairwise_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(2..15);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let mut mask: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            mask[0] = 1;
            mask[1] = 0;
            let a = explanation_auc(&scores, &mask).unwrap();
            assert!((a - brute_auc(&scores, &mask)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scores_average_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let scores: Vec<f64> = (0..10).map(|_| rng.random()).collect();
            let mut mask = vec![0u8; 10];
            mask[0] = 1;
            mask[3] = 1;
            total += explanation_auc(&scores, &mask).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() <= 0.02, "mean AUC {mean}");
    }

    #[test]
    fn removal_count_rounding() {
        assert_eq!(removal_count(10, 0.2), 2);
        assert_eq!(removal_count(11, 0.2), 3);
        assert_eq!(removal_count(3, 1.0), 3);
        assert_eq!(removal_count(1, 0.2), 1);
    }

    #[test]
    fn spurious_ratio_extremes() {
        use crate::encoder::LayerGradients;
        use crate::numerics::Tensor;
        let g = Tensor::<f64>::matrix(3, 2, vec![0.0, 0.0, 1.0, 3.0, 0.0, 0.0]).unwrap();
        let grads = LayerGradients::new(vec![g]);
        assert_eq!(spurious_gradient_ratio(&grads, &[1, 2], &[1, 0]).unwrap(), 0.0);
        assert_eq!(spurious_gradient_ratio(&grads, &[1, 2], &[0, 1]).unwrap(), 1.0);
        assert!(spurious_gradient_ratio(&grads, &[1, 2], &[1, 1]).is_err());
    }
}
