use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token vocabulary with reserved `PAD = 0` and `UNK = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an ordered token list that excludes the reserved entries.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(PAD_TOKEN.to_string(), PAD);
        vocab.index.insert(UNK_TOKEN.to_string(), UNK);
        for t in tokens {
            let t = t.into();
            if vocab.index.contains_key(&t) {
                return Err(Error::invalid(format!("duplicate vocabulary entry {t:?}")));
            }
            vocab.index.insert(t.clone(), vocab.tokens.len());
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    /// Keeps the `max_size - 2` most frequent tokens; ties broken
    /// lexicographically.
    pub fn from_counts(counts: &HashMap<String, usize>, max_size: usize) -> Result<Self> {
        if max_size < 3 {
            return Err(Error::invalid(format!("vocabulary size must be at least 3, got {max_size}")));
        }
        let mut ranked: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, _)| t.as_str() != PAD_TOKEN && t.as_str() != UNK_TOKEN)
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - 2);
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t.clone()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order, reserved entries included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}
