use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::grammar::{GroupRegistry, Label, Token};
use crate::rng::{self, Rng};

use super::{oracle::top_contributions, DataError, Dataset, DatasetRecord, PropertyOracle, Split};

const NAMES: [&str; 30] = [
    "benzene", "nitro", "methyl", "hydroxyl", "amine", "amide", "carboxyl", "ester", "ketone", "aldehyde", "ether",
    "thiol", "sulfonyl", "phosphate", "fluoro", "chloro", "bromo", "iodo", "nitrile", "azide", "imine", "alkene",
    "alkyne", "pyridine", "furan", "thiophene", "imidazole", "cyclohexyl", "piperidine", "morpholine",
];

/// Fragment type names; the first 30 are chemical, further ones are `frag<i>`.
pub fn fragment_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| NAMES.get(i).map_or_else(|| format!("frag{i}"), |s| s.to_string()))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_molecules: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_fragment_types: usize,
    /// Group indices whose joint presence makes a positive.
    pub motif: [usize; 2],
    /// Share of negatives carrying exactly one motif token.
    pub distractor_rate: f64,
    /// Share of training positives that carry a mask.
    pub annotation_rate: f64,
    pub task: Task,
    /// Train / val / test fractions.
    pub splits: [f64; 3],
    /// Tokens marked per molecule in regression masks.
    pub top_q: usize,
    /// Oracle bonus for the motif pair.
    pub pair_bonus: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_molecules: 2000,
            min_len: 6,
            max_len: 20,
            n_fragment_types: 30,
            motif: [0, 1],
            distractor_rate: 0.3,
            annotation_rate: 0.1,
            task: Task::Classification,
            splits: [0.7, 0.1, 0.2],
            top_q: 2,
            pair_bonus: 2.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |why: String| Err(DataError::InvalidConfig(why));
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] needs 2 <= min <= max", self.min_len, self.max_len));
        }
        if self.task == Task::Classification && self.max_len < 3 {
            return bad("positives need room for both motif tokens and one filler".into());
        }
        if self.n_fragment_types < 3 {
            return bad("need both motif types and at least one filler type".into());
        }
        let [a, b] = self.motif;
        if a == b || a >= self.n_fragment_types || b >= self.n_fragment_types {
            return bad(format!("motif {:?} must name two distinct fragment types", self.motif));
        }
        for (name, r) in [("distractor_rate", self.distractor_rate), ("annotation_rate", self.annotation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} is outside [0, 1]"));
            }
        }
        if self.splits.iter().any(|f| !(*f >= 0.0)) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be non-negative and sum to 1", self.splits));
        }
        if self.top_q == 0 {
            return bad("top_q must be positive".into());
        }
        if !self.pair_bonus.is_finite() {
            return bad("pair_bonus must be finite".into());
        }
        Ok(())
    }

    pub fn registry(&self) -> GroupRegistry {
        GroupRegistry::new(fragment_names(self.n_fragment_types)).expect("generated names are legal")
    }

    pub fn oracle(&self) -> PropertyOracle {
        let [a, b] = self.motif;
        PropertyOracle::random(self.n_fragment_types, vec![(a, b, self.pair_bonus)], self.seed)
    }
}

fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let train = (n as f64 * fractions[0]).round() as usize;
    let val = ((n as f64 * fractions[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

/// Split per index, stratified within each group of indices.
fn assign_splits(groups: &[Vec<usize>], n: usize, fractions: [f64; 3], rng: &mut Rng) -> Vec<Split> {
    let mut out = vec![Split::Train; n];
    for g in groups {
        let mut idx = g.clone();
        idx.shuffle(rng);
        let [train, val, _] = split_counts(idx.len(), fractions);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Index set of the training records that get a mask: `round(rate·|train|)`
/// of the eligible ones, chosen uniformly.
fn annotated_train(eligible: &[usize], rate: f64, rng: &mut Rng) -> Vec<usize> {
    let k = (eligible.len() as f64 * rate).round() as usize;
    let mut idx = eligible.to_vec();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn filler(cfg: &GeneratorConfig, rng: &mut Rng) -> usize {
    let fillers = cfg.n_fragment_types - 2;
    let mut f = rng.random_range(0..fillers);
    // skip the motif indices
    let [a, b] = if cfg.motif[0] < cfg.motif[1] { cfg.motif } else { [cfg.motif[1], cfg.motif[0]] };
    if f >= a {
        f += 1;
    }
    if f >= b {
        f += 1;
    }
    f
}

/// Builds a dataset. Classification: half the molecules contain both motif
/// tokens (label 1); negatives carry one motif token at the distractor rate.
/// Regression: uniform fragments labelled by the oracle, masks on the
/// top-q contributors. Masks go on a share of training molecules and on
/// every val/test molecule that can carry one.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, PropertyOracle), DataError> {
    cfg.validate()?;
    let registry = cfg.registry();
    let oracle = cfg.oracle();
    let mut rng = rng::stream(cfg.seed, "data.generate");
    let n = cfg.n_molecules;
    let token = |g: usize| registry.group_token(g);

    let mut molecules: Vec<Vec<Token>> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut causal: Vec<Option<Vec<u8>>> = Vec::with_capacity(n);
    match cfg.task {
        Task::Classification => {
            let mut classes: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
            classes.shuffle(&mut rng);
            for &c in &classes {
                let lo = if c == 1 { cfg.min_len.max(3) } else { cfg.min_len };
                let len = rng.random_range(lo..=cfg.max_len);
                let mut ids: Vec<usize> = (0..len).map(|_| filler(cfg, &mut rng)).collect();
                let mut mask = None;
                if c == 1 {
                    let picked = rand::seq::index::sample(&mut rng, len, 2).into_vec();
                    ids[picked[0]] = cfg.motif[0];
                    ids[picked[1]] = cfg.motif[1];
                    let mut m = vec![0u8; len];
                    m[picked[0]] = 1;
                    m[picked[1]] = 1;
                    mask = Some(m);
                } else if rng.random::<f64>() < cfg.distractor_rate {
                    let p = rng.random_range(0..len);
                    ids[p] = cfg.motif[rng.random_range(0..2)];
                }
                molecules.push(ids.into_iter().map(token).collect());
                labels.push(Label::Class(c));
                causal.push(mask);
            }
        }
        Task::Regression => {
            for _ in 0..n {
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let tokens: Vec<Token> = (0..len).map(|_| token(rng.random_range(0..cfg.n_fragment_types))).collect();
                labels.push(Label::Value(super::oracle_score(&tokens, &registry, &oracle)?));
                causal.push(Some(top_contributions(&tokens, &registry, &oracle, cfg.top_q)?));
                molecules.push(tokens);
            }
        }
    }

    let groups: Vec<Vec<usize>> = match cfg.task {
        Task::Classification => (0..2)
            .map(|c| (0..n).filter(|&i| labels[i] == Label::Class(c)).collect())
            .collect(),
        Task::Regression => vec![(0..n).collect()],
    };
    let splits = assign_splits(&groups, n, cfg.splits, &mut rng);
    let eligible: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train && causal[i].is_some()).collect();
    let keep = annotated_train(&eligible, cfg.annotation_rate, &mut rng);
    let mut annotated = vec![false; n];
    for i in keep {
        annotated[i] = true;
    }

    let records = molecules
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| DatasetRecord {
            id: i as u64,
            tokens: tokens.iter().map(|t| t.text().to_string()).collect(),
            label: labels[i],
            mask: if splits[i] != Split::Train || annotated[i] { causal[i].clone() } else { None },
            split: splits[i],
        })
        .collect();
    Ok((Dataset { registry, records }, oracle))
}
