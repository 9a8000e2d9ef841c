use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Example;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 3;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercases and splits on Unicode whitespace. Runs of alphanumeric
/// characters form words; every other non-space character is a token of its
/// own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids plus the padding mask for one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `examples`; keeps those seen at least `min_freq`
    /// times, ordered by frequency (desc) then token (asc), so that the total
    /// size including reserved ids is at most `max_size`.
    pub fn build(examples: &[Example], min_freq: usize, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in examples {
            for tok in tokenize(&ex.text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(content: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content tokens in id order (reserved ids excluded).
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// `[CLS] + tokens`, truncated to `max_seq_len` and padded with PAD.
    pub fn encode(&self, text: &str, max_seq_len: usize) -> Encoded {
        let mut ids = Vec::with_capacity(max_seq_len);
        if max_seq_len > 0 {
            ids.push(CLS_ID);
        }
        ids.extend(
            tokenize(text)
                .iter()
                .map(|t| self.id(t))
                .take(max_seq_len.saturating_sub(1)),
        );
        let real = ids.len();
        ids.resize(max_seq_len, PAD_ID);
        let mask = (0..max_seq_len).map(|i| i < real).collect();
        Encoded { ids, mask }
    }

    /// Inverse of [`encode`](Self::encode) for real, non-CLS positions.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != CLS_ID)
            .map(|&i| self.token(i).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.content_tokens().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let content = Vec::<String>::deserialize(d)?;
        let vocab = Self::from_tokens(content);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(serde::de::Error::custom("duplicate vocabulary token"));
        }
        Ok(vocab)
    }
}
