use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::grammar::{encode, MoleculeString, Special, Vocabulary, SPECIAL_COUNT};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

use super::forward::{mlm_logits, run_layers};
use super::{Adam, EncoderError, EncoderParams, TrainConfig};

/// Share of eligible positions selected for prediction.
pub const MASK_RATE: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub params: EncoderParams<T>,
    /// Mean masked-token cross-entropy per epoch.
    pub losses: Vec<f64>,
}

/// Masked-token cross-entropy at `positions` of the (already corrupted)
/// input, predicting `targets`, with its parameter gradient.
pub fn mlm_loss<T: Scalar>(
    params: &EncoderParams<T>,
    ids: &[usize],
    validity: &[u8],
    positions: &[usize],
    targets: &[usize],
) -> Result<(T, EncoderParams<T>), EncoderError> {
    if positions.is_empty() || positions.len() != targets.len() {
        return Err(EncoderError::InvalidTarget {
            target: targets.len(),
            classes: positions.len(),
        });
    }
    let (mut tape, pv, rows, h, _) = run_layers(params, ids, validity)?;
    let picked: Vec<usize> = positions
        .iter()
        .map(|p| rows.binary_search(p).map_err(|_| EncoderError::InvalidTarget { target: *p, classes: ids.len() }))
        .collect::<Result<_, _>>()?;
    let last = *h.last().expect("at least one state");
    let logits = mlm_logits(&mut tape, &pv, last, &picked)?;
    let loss = tape.cross_entropy(logits, targets.to_vec())?;
    let value = tape.value(loss).item();
    let mut adj = tape.backward(loss)?;
    let mut grads = params.zeros_like();
    for (slot, &var) in grads.tensors_mut().into_iter().zip(pv.all()) {
        *slot = adj.take(var);
    }
    Ok((value, grads))
}

/// Chooses prediction positions among the non-special valid tokens and
/// corrupts them: 80% MASK, 10% a random regular token, 10% unchanged.
/// At least one position is chosen when any is eligible.
fn corrupt(ids: &[usize], validity: &[u8], vocab_size: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let eligible: Vec<usize> = (0..ids.len()).filter(|&p| validity[p] == 1 && ids[p] >= SPECIAL_COUNT).collect();
    let mut chosen: Vec<usize> = eligible.iter().copied().filter(|_| rng.random::<f64>() < MASK_RATE).collect();
    if chosen.is_empty() {
        if let Some(&p) = eligible.choose(rng) {
            chosen.push(p);
        }
    }
    let mut out = ids.to_vec();
    let targets = chosen.iter().map(|&p| ids[p]).collect();
    for &p in &chosen {
        let r: f64 = rng.random();
        if r < 0.8 {
            out[p] = Special::Mask.id();
        } else if r < 0.9 && vocab_size > SPECIAL_COUNT {
            out[p] = rng.random_range(SPECIAL_COUNT..vocab_size);
        }
    }
    (out, chosen, targets)
}

/// Masked-token pretraining over an unlabelled corpus.
pub fn mlm_pretrain<T: Scalar>(
    mut params: EncoderParams<T>,
    vocab: &Vocabulary,
    corpus: &[MoleculeString],
    cfg: &TrainConfig,
) -> Result<PretrainOutcome<T>, EncoderError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let encoded = corpus
        .iter()
        .map(|m| encode(m, vocab, params.config.max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let vocab_size = params.config.vocab_size;
    let mut adam = Adam::new(&params, cfg);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut rng = rng::stream(cfg.seed, "pretrain.mlm");
    let mut losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = params.zeros_like();
            let mut used = 0usize;
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                let e = &encoded[i];
                let (ids, pos, targets) = corrupt(&e.ids, &e.validity, vocab_size, &mut rng);
                if pos.is_empty() {
                    continue;
                }
                parts.push(mlm_loss(&params, &ids, &e.validity, &pos, &targets)?);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let w = T::one() / T::of_usize(used);
            for (loss, g) in parts {
                sum += loss.as_f64();
                n += 1;
                for (a, g) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                    a.add_assign(&g.scale(w));
                }
            }
            adam.update(&mut params, &acc);
        }
        losses.push(if n > 0 { sum / n as f64 } else { 0.0 });
    }
    Ok(PretrainOutcome { params, losses })
}
