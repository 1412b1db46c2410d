use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, WegenError};

pub const PAD: &str = "@PAD@";
pub const UNK: &str = "@UNK@";
pub const START: &str = "@START@";
pub const END: &str = "@END@";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const END_ID: usize = 3;

pub const SPECIALS: [&str; 4] = [PAD, UNK, START, END];

/// Content-token cap used when none is given.
pub const DEFAULT_VOCAB_CAP: usize = 45_000;

/// Dense token ↔ id mapping. The four specials always hold ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(WegenError::InvalidArgument(format!(
                    "vocabulary must start with {SPECIALS:?}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(WegenError::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Rebuilds a vocabulary from its content tokens in id order.
    pub fn from_content<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(Into::into))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| WegenError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| WegenError::io(path, e))?;
        Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

/// Frequency-ranked vocabulary of at most `cap` content tokens; ties break
/// lexicographically.
pub fn build_vocab<'a, I>(sequences: I, cap: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for tok in seq {
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(WegenError::Empty("vocabulary corpus"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);
    Vocab::from_content(ranked.into_iter().map(|(t, _)| t))
}

/// Per-token lookup; unknown tokens map to `@UNK@`.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> Vec<usize> {
    tokens.iter().map(|t| vocab.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
}

pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK).to_string())
        .collect()
}

/// Source encoding with per-example ids for out-of-vocabulary tokens.
///
/// `extended[i]` is the vocab id of `tokens[i]`, or `vocab.len() + k` where
/// `oov[k]` is the token, so a copy distribution can name source words the
/// vocabulary lacks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceIds {
    pub ids: Vec<usize>,
    pub extended: Vec<usize>,
    pub oov: Vec<String>,
}

pub fn encode_source<S: AsRef<str>>(tokens: &[S], vocab: &Vocab) -> SourceIds {
    let mut oov: Vec<String> = Vec::new();
    let mut ids = Vec::with_capacity(tokens.len());
    let mut extended = Vec::with_capacity(tokens.len());
    for t in tokens {
        let t = t.as_ref();
        match vocab.id(t) {
            Some(id) => {
                ids.push(id);
                extended.push(id);
            }
            None => {
                let k = oov.iter().position(|o| o == t).unwrap_or_else(|| {
                    oov.push(t.to_string());
                    oov.len() - 1
                });
                ids.push(UNK_ID);
                extended.push(vocab.len() + k);
            }
        }
    }
    SourceIds { ids, extended, oov }
}
