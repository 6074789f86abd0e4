//! Explanation-guided evolutionary editing: key-fragment crossover,
//! random/vocabulary mutation, a growing fragment vocabulary and elitist
//! truncation selection, plus an unguided baseline.

mod campaign;
mod ops;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::encoder::{EncoderError, EncoderParams};
use crate::explain::ExplainError;
use crate::grammar::{GrammarError, Token, Vocabulary};

pub use campaign::{
    init_population, run_campaign, step, write_history, write_hits, CampaignResult, EditContext, GenerationStats,
    SeedOutcome,
};
pub use ops::{crossover, key_fragments, mutate, random_positions, update_vocabulary, KeyFragments};

#[derive(Debug, Error)]
pub enum EditorError {
    #[error("need {needed} seed molecules, dataset has {available}")]
    InsufficientSeeds { needed: usize, available: usize },
    #[error("cannot mutate an empty molecule")]
    EmptyMolecule,
    #[error("invalid editor config: {0}")]
    InvalidConfig(String),
    #[error("guided editing needs a model")]
    MissingModel,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Maximize => a > b,
            Direction::Minimize => a < b,
        }
    }

    /// Improvement of `new` over `old`, positive when better.
    pub fn gain(self, new: f64, old: f64) -> f64 {
        match self {
            Direction::Maximize => new - old,
            Direction::Minimize => old - new,
        }
    }
}

/// `guided` uses key fragments and the vocabulary; `unguided` is the random baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    #[default]
    Guided,
    Unguided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationMode {
    Random,
    Vocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EAConfig {
    /// Population size N.
    pub population: usize,
    /// Generations t_max.
    pub generations: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    /// Share of mutations drawn from the fragment vocabulary (guided mode).
    pub vocab_share: f64,
    /// Key fragments per molecule.
    pub k: usize,
    pub direction: Direction,
    /// Hit threshold τ.
    pub tau: f64,
    pub mode: EditMode,
    pub seed: u64,
}

impl Default for EAConfig {
    fn default() -> Self {
        Self {
            population: 20,
            generations: 50,
            crossover_prob: 0.7,
            mutation_prob: 0.3,
            vocab_share: 0.5,
            k: 2,
            direction: Direction::Maximize,
            tau: 0.0,
            mode: EditMode::Guided,
            seed: 0,
        }
    }
}

impl EAConfig {
    pub fn validate(&self) -> Result<(), EditorError> {
        let bad = |why: String| Err(EditorError::InvalidConfig(why));
        for (name, p) in [
            ("crossover_prob", self.crossover_prob),
            ("mutation_prob", self.mutation_prob),
            ("vocab_share", self.vocab_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} is outside [0, 1]"));
            }
        }
        if self.population < 2 {
            return bad("population must be at least 2".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.tau.is_nan() {
            return bad("tau must be a number".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Seed,
    Crossover,
    Mutation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub tokens: Vec<Token>,
    pub fitness: f64,
    pub parents: Vec<u64>,
    pub operator: Operator,
    pub generation: usize,
    /// Seed slots this candidate descends from, ascending.
    pub ancestry: Vec<usize>,
    /// Key positions, highest importance first.
    pub keys: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub text: String,
    pub generation: usize,
    pub fitness: f64,
}

/// Fragments found as key contributors of improving children.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FragmentVocabulary {
    entries: Vec<VocabEntry>,
    seen: HashSet<String>,
}

impl FragmentVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.seen.contains(text)
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    /// Adds `text` unless present; returns whether it was added.
    pub fn insert(&mut self, text: &str, generation: usize, fitness: f64) -> bool {
        if !self.seen.insert(text.to_string()) {
            return false;
        }
        self.entries.push(VocabEntry {
            text: text.to_string(),
            generation,
            fitness,
        });
        true
    }
}

/// Classifier or regressor used to locate key fragments.
#[derive(Clone, Copy, Debug)]
pub struct KeyModel<'a> {
    pub params: &'a EncoderParams<f64>,
    pub vocab: &'a Vocabulary,
}

#[cfg(test)]
mod tests;
