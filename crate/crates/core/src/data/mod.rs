//! Synthetic planted-motif datasets, the additive property oracle and JSONL
//! persistence.

mod generate;
mod io;
mod oracle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{GrammarError, GroupRegistry, Label, MoleculeString};

pub use generate::{fragment_names, generate, GeneratorConfig, Task};
pub use io::{load, read_records, save, write_records};
pub use oracle::{oracle_score, top_contributions, PropertyOracle};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("token {0} is not a registered fragment")]
    UnknownFragment(String),
    #[error("line {0}: malformed record")]
    MalformedRecord(usize),
    #[error("line {0}: {1}")]
    InvariantViolation(usize, String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub tokens: Vec<String>,
    pub label: Label,
    pub mask: Option<Vec<u8>>,
    pub split: Split,
}

impl DatasetRecord {
    pub fn molecule(&self, registry: &GroupRegistry) -> Result<MoleculeString, GrammarError> {
        let tokens = self.tokens.iter().map(|t| registry.token(t)).collect::<Result<Vec<_>, _>>()?;
        MoleculeString::new(tokens, self.mask.clone(), Some(self.label))
    }
}

/// Records plus the registry that classifies their tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: GroupRegistry,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Molecules of one split, in file order.
    pub fn molecules(&self, split: Split) -> Result<Vec<MoleculeString>, GrammarError> {
        self.split(split).map(|r| r.molecule(&self.registry)).collect()
    }

    pub fn all_molecules(&self) -> Result<Vec<MoleculeString>, GrammarError> {
        self.records.iter().map(|r| r.molecule(&self.registry)).collect()
    }
}

#[cfg(test)]
mod tests;
