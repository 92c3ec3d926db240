use super::DataError;
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

/// Reserved ids. These occupy the first slots of every vocabulary and are
/// never written to vocab files.
pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const CLS_Q: u32 = 3;
pub const UNK: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[CLS_Q]", "[UNK]"];

/// Dense token-to-id map with a fixed reserved block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from the given non-reserved tokens, in order.
    /// Duplicates and reserved names are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            ids: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i as u32))
                .collect(),
        };
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(DataError::Vocab(format!("invalid token {tok:?}")));
            }
            if vocab.ids.contains_key(&tok) {
                return Err(DataError::Vocab(format!("duplicate token {tok:?}")));
            }
            vocab.ids.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Collects every whitespace-separated word of the given texts, sorted.
    pub fn from_texts<'a, I>(texts: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line `n` (0-based) has id `n + 5`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_text(&text)
    }
}
