//! Closed-lexicon tokenizer for condition prompts.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const OOV_TOKEN: &str = "<unk>";
pub const OOV_ID: usize = 0;

/// Every word the prompt template and attribute tokens can produce, plus
/// punctuation. Line order in the vocabulary file follows this list.
const LEXICON: &[&str] = &[
    OOV_TOKEN, "a", "an", "driving", "scene", "at", "with", "and", "ground", "sky", "clear", "foggy",
    "rainy", "snowy", "day", "night", "daytime", "nighttime", "no", "precipitation", "light", "heavy",
    "rain", "snow", "dry", "wet", "sunny", "overcast", "dark", ",", ".",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(LEXICON.iter().map(|s| s.to_string()).collect())
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Lowercased, punctuation split off, single-space joined.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(OOV_TOKEN, String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined tokens, with punctuation attached to the preceding word.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            let punct = tok.len() == 1 && tok.chars().all(|c| c.is_ascii_punctuation());
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// One token per line; the id is the zero-based line number.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let tokens = input.lines().collect::<std::io::Result<Vec<_>>>()?;
        if tokens.first().map(String::as_str) != Some(OOV_TOKEN) {
            return Err(Error::Corrupt {
                offset: 0,
                msg: format!("vocabulary must start with {OOV_TOKEN}"),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}
