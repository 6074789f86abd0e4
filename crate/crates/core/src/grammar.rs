//! Bracketed group-token strings: `[benzene][nitro][C][Branch1][=O]`.
//!
//! Every token is a bracketed name. Whether a name denotes a functional group,
//! a branch, a ring closure or a plain atom is decided by a [`GroupRegistry`];
//! the string itself carries no sigils.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BRANCH_NAMES: [&str; 3] = ["Branch1", "Branch2", "Branch3"];
pub const RING_NAMES: [&str; 3] = ["Ring1", "Ring2", "Ring3"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("unbalanced bracket at byte {0}")]
    UnbalancedBracket(usize),
    #[error("empty token at byte {0}")]
    EmptyToken(usize),
    #[error("illegal character at byte {0}")]
    IllegalCharacter(usize),
    #[error("reserved token name at byte {0}")]
    ReservedName(usize),
    #[error("vocabulary needs a non-empty corpus")]
    EmptyCorpus,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("encoded length must be at least 2, got {0}")]
    InvalidMaxLen(usize),
    #[error("mask length {mask} differs from token count {tokens}")]
    MaskLength { mask: usize, tokens: usize },
    #[error("mask has no causal position")]
    EmptyMask,
    #[error("mask values must be 0 or 1")]
    MaskValue,
    #[error("invalid registry: {0}")]
    Registry(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Cls,
    Sep,
    Pad,
    Mask,
    Unk,
}

impl Special {
    /// Id order in every [`Vocabulary`].
    pub const ALL: [Special; 5] = [Special::Cls, Special::Sep, Special::Pad, Special::Mask, Special::Unk];
}

/// Number of reserved ids; regular tokens start here.
pub const SPECIAL_COUNT: usize = Special::ALL.len();

impl Special {
    pub fn name(self) -> &'static str {
        match self {
            Special::Cls => "CLS",
            Special::Sep => "SEP",
            Special::Pad => "PAD",
            Special::Mask => "MASK",
            Special::Unk => "UNK",
        }
    }

    pub fn text(self) -> String {
        format!("[{}]", self.name())
    }

    pub fn id(self) -> usize {
        self as usize
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Group,
    Atom,
    Branch,
    Ring,
    Special(Special),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Token {
    text: String,
    kind: TokenKind,
}

impl Token {
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    /// The name between the brackets.
    pub fn name(&self) -> &str {
        &self.text[1..self.text.len() - 1]
    }

    pub fn special(s: Special) -> Self {
        Self {
            text: s.text(),
            kind: TokenKind::Special(s),
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn legal_name_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'=' | b'#' | b'@' | b'+' | b'-')
}

/// Names that classify as groups; branch and ring names are fixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupRegistry {
    groups: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    groups: Vec<String>,
    #[serde(default = "default_true")]
    atoms_implicit: bool,
}

fn default_true() -> bool {
    true
}

impl GroupRegistry {
    pub fn new<S: Into<String>>(groups: impl IntoIterator<Item = S>) -> Result<Self, GrammarError> {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for g in groups {
            let g = g.into();
            if g.is_empty() || !g.bytes().all(legal_name_byte) {
                return Err(GrammarError::Registry(format!("illegal group name {g:?}")));
            }
            if BRANCH_NAMES.contains(&g.as_str()) || RING_NAMES.contains(&g.as_str()) || Special::from_name(&g).is_some() {
                return Err(GrammarError::Registry(format!("group name {g:?} is reserved")));
            }
            if index.insert(g.clone(), list.len()).is_some() {
                return Err(GrammarError::Registry(format!("duplicate group name {g:?}")));
            }
            list.push(g);
        }
        Ok(Self { groups: list, index })
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn kind_of(&self, name: &str) -> TokenKind {
        if self.index.contains_key(name) {
            TokenKind::Group
        } else if BRANCH_NAMES.contains(&name) {
            TokenKind::Branch
        } else if RING_NAMES.contains(&name) {
            TokenKind::Ring
        } else {
            TokenKind::Atom
        }
    }

    /// Token for a registered group.
    pub fn group_token(&self, index: usize) -> Token {
        Token {
            text: format!("[{}]", self.groups[index]),
            kind: TokenKind::Group,
        }
    }

    /// Classifies an arbitrary bracketed surface form, e.g. one read from a dataset.
    pub fn token(&self, text: &str) -> Result<Token, GrammarError> {
        let mut tokens = parse(text, self)?;
        if tokens.len() != 1 {
            return Err(GrammarError::IllegalCharacter(0));
        }
        Ok(tokens.remove(0))
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            groups: self.groups.clone(),
            atoms_implicit: true,
        };
        serde_json::to_string_pretty(&file).expect("registry serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, GrammarError> {
        let file: RegistryFile = serde_json::from_str(text).map_err(|e| GrammarError::Registry(e.to_string()))?;
        if !file.atoms_implicit {
            return Err(GrammarError::Registry("only implicit atoms are supported".into()));
        }
        Self::new(file.groups)
    }

    pub fn load(path: &Path) -> Result<Self, GrammarError> {
        let text = std::fs::read_to_string(path).map_err(|e| GrammarError::Registry(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Splits `input` into bracketed tokens and classifies them.
pub fn parse(input: &str, registry: &GroupRegistry) -> Result<Vec<Token>, GrammarError> {
    let bytes = input.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => {}
            b']' => return Err(GrammarError::UnbalancedBracket(i)),
            _ => return Err(GrammarError::IllegalCharacter(i)),
        }
        let open = i;
        let mut j = i + 1;
        loop {
            match bytes.get(j) {
                None | Some(b'[') => return Err(GrammarError::UnbalancedBracket(open)),
                Some(b']') => break,
                Some(&b) if legal_name_byte(b) => j += 1,
                Some(_) => return Err(GrammarError::IllegalCharacter(j)),
            }
        }
        if j == open + 1 {
            return Err(GrammarError::EmptyToken(open));
        }
        let name = &input[open + 1..j];
        if Special::from_name(name).is_some() {
            return Err(GrammarError::ReservedName(open));
        }
        tokens.push(Token {
            text: input[open..=j].to_string(),
            kind: registry.kind_of(name),
        });
        i = j + 1;
    }
    Ok(tokens)
}

pub fn render(tokens: &[Token]) -> String {
    tokens.iter().map(Token::text).collect()
}

/// `name-k` labels where `k` counts earlier occurrences of the same name.
pub fn display_labels(tokens: &[Token]) -> Vec<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    tokens
        .iter()
        .map(|t| {
            let n = seen.entry(t.name()).or_insert(0);
            let label = format!("{}-{}", t.name(), n);
            *n += 1;
            label
        })
        .collect()
}

/// Supervision target attached to a molecule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeString {
    tokens: Vec<Token>,
    mask: Option<Vec<u8>>,
    label: Option<Label>,
}

impl MoleculeString {
    pub fn new(tokens: Vec<Token>, mask: Option<Vec<u8>>, label: Option<Label>) -> Result<Self, GrammarError> {
        if tokens.iter().any(|t| matches!(t.kind, TokenKind::Special(_))) {
            return Err(GrammarError::ReservedName(0));
        }
        if let Some(m) = &mask {
            if m.len() != tokens.len() {
                return Err(GrammarError::MaskLength {
                    mask: m.len(),
                    tokens: tokens.len(),
                });
            }
            if m.iter().any(|&v| v > 1) {
                return Err(GrammarError::MaskValue);
            }
            if !m.contains(&1) {
                return Err(GrammarError::EmptyMask);
            }
        }
        Ok(Self { tokens, mask, label })
    }

    pub fn unlabeled(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            mask: None,
            label: None,
        }
    }

    pub fn parse(input: &str, registry: &GroupRegistry) -> Result<Self, GrammarError> {
        Ok(Self::unlabeled(parse(input, registry)?))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn label(&self) -> Option<Label> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn render(&self) -> String {
        render(&self.tokens)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(Token::text).collect()
    }

    /// Copy with `tokens` replaced; mask and label are dropped.
    pub fn with_tokens(&self, tokens: Vec<Token>) -> Self {
        Self::unlabeled(tokens)
    }
}

/// Dense token-text ↔ id map. Specials occupy ids `0..5` in [`Special::ALL`] order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    text_of: Vec<String>,
}

impl Vocabulary {
    pub fn from_texts(corpus_texts: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self {
            id_of: HashMap::new(),
            text_of: Vec::new(),
        };
        for s in Special::ALL {
            v.insert(s.text());
        }
        for t in corpus_texts {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, text: String) {
        if !self.id_of.contains_key(&text) {
            self.id_of.insert(text.clone(), self.text_of.len());
            self.text_of.push(text);
        }
    }

    pub fn len(&self) -> usize {
        self.text_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_of.is_empty()
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        self.id_of.get(text).copied()
    }

    pub fn text_of(&self, id: usize) -> Option<&str> {
        self.text_of.get(id).map(String::as_str)
    }

    pub fn texts(&self) -> &[String] {
        &self.text_of
    }

    pub fn special_id(&self, s: Special) -> usize {
        s.id()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < Special::ALL.len()
    }
}

pub fn build_vocabulary(corpus: &[MoleculeString], min_count: usize) -> Result<Vocabulary, GrammarError> {
    if corpus.is_empty() {
        return Err(GrammarError::EmptyCorpus);
    }
    if min_count == 0 {
        return Err(GrammarError::InvalidMinCount);
    }
    let mut order = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for m in corpus {
        for t in &m.tokens {
            let c = counts.entry(t.text()).or_insert(0);
            if *c == 0 {
                order.push(t.text());
            }
            *c += 1;
        }
    }
    Ok(Vocabulary::from_texts(
        order
            .into_iter()
            .filter(|t| counts[t] >= min_count)
            .map(str::to_string),
    ))
}

/// Model input: `CLS` followed by token ids, truncated and `PAD`-filled to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub validity: Vec<u8>,
}

impl Encoded {
    /// Number of molecule tokens that survived truncation.
    pub fn kept_tokens(&self) -> usize {
        self.validity.iter().filter(|&&v| v == 1).count().saturating_sub(1)
    }
}

pub fn encode(molecule: &MoleculeString, vocab: &Vocabulary, max_len: usize) -> Result<Encoded, GrammarError> {
    if max_len < 2 {
        return Err(GrammarError::InvalidMaxLen(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(Special::Cls.id());
    for t in molecule.tokens.iter().take(max_len - 1) {
        ids.push(vocab.id_of(t.text()).unwrap_or(Special::Unk.id()));
    }
    let valid = ids.len();
    ids.resize(max_len, Special::Pad.id());
    let mut validity = vec![1u8; valid];
    validity.resize(max_len, 0);
    Ok(Encoded { ids, validity })
}

/// Distinct token texts in a corpus, in first-seen order.
pub fn distinct_texts(corpus: &[MoleculeString]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for m in corpus {
        for t in &m.tokens {
            if seen.insert(t.text()) {
                out.push(t.text().to_string());
            }
        }
    }
    out
}
