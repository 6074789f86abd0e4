use rand::distr::{Distribution, Uniform};
use rand::seq::{index, IndexedRandom};
use rand::Rng as _;

use crate::encoder::{layer_gradients, predict};
use crate::explain::info_flow;
use crate::grammar::{GroupRegistry, MoleculeString, Token};
use crate::rng::Rng;

use super::{Direction, EditorError, FragmentVocabulary, KeyModel, MutationMode};

/// Key positions, most important first, with their fragment texts.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFragments {
    pub positions: Vec<usize>,
    pub texts: Vec<String>,
}

/// The `k` positions with the highest info-flow importance, ties to the lower
/// position. Tokens lost to truncation rank after every scored token.
pub fn key_fragments(model: KeyModel<'_>, tokens: &[Token], k: usize) -> Result<KeyFragments, EditorError> {
    if k == 0 {
        return Err(EditorError::InvalidConfig("k must be at least 1".into()));
    }
    let molecule = MoleculeString::unlabeled(tokens.to_vec());
    let (_, trace) = predict(model.params, &molecule, model.vocab)?;
    let target = crate::encoder::explanation_target(model.params, &trace, None);
    let grads = layer_gradients(model.params, &trace, target)?;
    let scores = info_flow(&trace, &grads)?;
    let mut positions: Vec<usize> = scores.ranking().into_iter().map(|r| scores.token_indices[r]).collect();
    positions.extend((0..tokens.len()).filter(|p| !scores.token_indices.contains(p)));
    positions.truncate(k);
    let texts = positions.iter().map(|&p| tokens[p].text().to_string()).collect();
    Ok(KeyFragments { positions, texts })
}

/// `min(k, len)` distinct positions drawn uniformly, ascending.
pub fn random_positions(len: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p = index::sample(rng, len, k.min(len)).into_vec();
    p.sort_unstable();
    p
}

/// Writes `donor`'s key fragments over `target`'s key positions taken in
/// position order, cycling the donor list when the counts differ.
fn transplant(target: &[Token], keys: &[usize], donor: &[Token], donor_keys: &[usize]) -> Vec<Token> {
    let mut out = target.to_vec();
    if donor_keys.is_empty() {
        return out;
    }
    let mut at = keys.to_vec();
    at.sort_unstable();
    let mut from = donor_keys.to_vec();
    from.sort_unstable();
    for (i, &p) in at.iter().enumerate() {
        out[p] = donor[from[i % from.len()]].clone();
    }
    out
}

/// Swaps key fragments between two parents; each child keeps its parent's length.
pub fn crossover(m1: &[Token], m2: &[Token], keys1: &[usize], keys2: &[usize]) -> (Vec<Token>, Vec<Token>) {
    (transplant(m1, keys1, m2, keys2), transplant(m2, keys2, m1, keys1))
}

/// Replaces one uniformly chosen position with a registry fragment (random)
/// or a vocabulary entry (vocabulary, falling back to random when empty).
pub fn mutate(
    tokens: &[Token],
    vocab: &FragmentVocabulary,
    mode: MutationMode,
    registry: &GroupRegistry,
    rng: &mut Rng,
) -> Result<Vec<Token>, EditorError> {
    if tokens.is_empty() {
        return Err(EditorError::EmptyMolecule);
    }
    if registry.is_empty() {
        return Err(EditorError::InvalidConfig("registry has no fragments".into()));
    }
    let pos = rng.random_range(0..tokens.len());
    let replacement = match (mode, vocab.entries().choose(rng)) {
        (MutationMode::Vocabulary, Some(e)) => registry.token(&e.text)?,
        _ => {
            let i = Uniform::new(0, registry.len()).expect("non-empty registry").sample(rng);
            registry.group_token(i)
        }
    };
    let mut out = tokens.to_vec();
    out[pos] = replacement;
    Ok(out)
}

/// Inserts the child's key fragments into `vocab` when the child is strictly
/// better than every parent. Returns the number of new entries.
pub fn update_vocabulary(
    vocab: &mut FragmentVocabulary,
    child_fitness: f64,
    child_keys: &[String],
    parent_fitness: &[f64],
    direction: Direction,
    generation: usize,
) -> usize {
    if !parent_fitness.iter().all(|&p| direction.better(child_fitness, p)) {
        return 0;
    }
    child_keys
        .iter()
        .filter(|t| vocab.insert(t, generation, child_fitness))
        .count()
}
