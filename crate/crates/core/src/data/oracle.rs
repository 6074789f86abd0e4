use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grammar::{GroupRegistry, Token};
use crate::rng;

use super::DataError;

/// Additive fragment contributions plus bonuses for designated pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyOracle {
    /// `c_f` per registry group index.
    pub contributions: Vec<f64>,
    /// `(f, g, b)`: bonus `b` when both groups occur.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PropertyOracle {
    /// Standard-normal contributions drawn from the `oracle` stream of `seed`.
    pub fn random(n_types: usize, pairs: Vec<(usize, usize, f64)>, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "data.oracle");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            contributions: (0..n_types).map(|_| normal.sample(&mut rng)).collect(),
            pairs,
        }
    }

    fn counts(&self, tokens: &[Token], registry: &GroupRegistry) -> Result<Vec<usize>, DataError> {
        let mut counts = vec![0usize; self.contributions.len()];
        for t in tokens {
            match registry.group_index(t.name()) {
                Some(g) if g < counts.len() => counts[g] += 1,
                _ => return Err(DataError::UnknownFragment(t.text().to_string())),
            }
        }
        Ok(counts)
    }

    /// Contribution of each token.
    pub fn token_contributions(&self, tokens: &[Token], registry: &GroupRegistry) -> Result<Vec<f64>, DataError> {
        self.counts(tokens, registry)?;
        Ok(tokens
            .iter()
            .map(|t| self.contributions[registry.group_index(t.name()).expect("checked")])
            .collect())
    }
}

/// `F(M) = Σ_j c_{f_j} + Σ` bonuses of pairs present. Summed per fragment type,
/// so the value does not depend on token order.
pub fn oracle_score(tokens: &[Token], registry: &GroupRegistry, oracle: &PropertyOracle) -> Result<f64, DataError> {
    let counts = oracle.counts(tokens, registry)?;
    let mut score = 0.0;
    for (c, &n) in oracle.contributions.iter().zip(&counts) {
        score += c * n as f64;
    }
    for &(f, g, b) in &oracle.pairs {
        if counts.get(f).copied().unwrap_or(0) > 0 && counts.get(g).copied().unwrap_or(0) > 0 {
            score += b;
        }
    }
    Ok(score)
}

/// Mask marking the `q` highest-contribution tokens (ties by lower position),
/// capped so at least one token stays unmarked.
pub fn top_contributions(tokens: &[Token], registry: &GroupRegistry, oracle: &PropertyOracle, q: usize) -> Result<Vec<u8>, DataError> {
    let c = oracle.token_contributions(tokens, registry)?;
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
    let mut mask = vec![0u8; c.len()];
    for &p in order.iter().take(q.min(c.len().saturating_sub(1))) {
        mask[p] = 1;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;

    fn setup() -> (GroupRegistry, PropertyOracle) {
        let reg = GroupRegistry::new(["a", "b", "c"]).unwrap();
        let oracle = PropertyOracle {
            contributions: vec![0.5, -1.0, 2.0],
            pairs: vec![(0, 1, 3.0)],
        };
        (reg, oracle)
    }

    #[test]
    fn additive_with_pair_bonus() {
        let (reg, oracle) = setup();
        let s = |text: &str| oracle_score(&parse(text, &reg).unwrap(), &reg, &oracle).unwrap();
        assert_eq!(s("[a]"), 0.5);
        assert_eq!(s("[a][a]"), 1.0);
        assert_eq!(s("[a][b]"), 0.5 - 1.0 + 3.0);
        assert_eq!(s("[c][a][b][a]"), 2.0 + 1.0 - 1.0 + 3.0);
        assert_eq!(s(""), 0.0);
    }

    #[test]
    fn zero_table_scores_zero() {
        let (reg, _) = setup();
        let oracle = PropertyOracle {
            contributions: vec![0.0; 3],
            pairs: vec![],
        };
        assert_eq!(oracle_score(&parse("[a][b][c]", &reg).unwrap(), &reg, &oracle).unwrap(), 0.0);
    }

    #[test]
    fn unknown_fragment() {
        let (reg, oracle) = setup();
        let tokens = parse("[a][C]", &reg).unwrap();
        assert!(matches!(oracle_score(&tokens, &reg, &oracle), Err(DataError::UnknownFragment(t)) if t == "[C]"));
    }

    #[test]
    fn appending_positive_fragment_increases() {
        let (reg, oracle) = setup();
        let base = parse("[b][a]", &reg).unwrap();
        let mut more = base.clone();
        more.push(reg.group_token(2));
        assert!(oracle_score(&more, &reg, &oracle).unwrap() > oracle_score(&base, &reg, &oracle).unwrap());
    }

    #[test]
    fn top_contribution_mask() {
        let (reg, oracle) = setup();
        let tokens = parse("[b][c][a][c]", &reg).unwrap();
        assert_eq!(top_contributions(&tokens, &reg, &oracle, 2).unwrap(), vec![0, 1, 0, 1]);
        let two = parse("[c][a]", &reg).unwrap();
        assert_eq!(top_contributions(&two, &reg, &oracle, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn random_oracle_is_seeded() {
        assert_eq!(PropertyOracle::random(5, vec![], 3), PropertyOracle::random(5, vec![], 3));
        assert_ne!(PropertyOracle::random(5, vec![], 3), PropertyOracle::random(5, vec![], 4));
    }
}
