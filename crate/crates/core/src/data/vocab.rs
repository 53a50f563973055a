use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ids of one sentence.
pub type TokenSequence = Vec<usize>;

/// What to do with a sentence longer than the maximum length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPolicy {
    /// Training ingestion: refuse the sentence.
    Reject,
    /// Inference: keep the first `max_len` words.
    Truncate,
}

/// Bijective token ↔ id map; ids 0..4 are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Whitespace tokens seen at least `min_count` times, ordered by
    /// descending frequency then lexicographically, after the reserved ids.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut sentences = 0usize;
        for line in corpus {
            sentences += 1;
            for tok in line.split_whitespace() {
                if RESERVED_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            RESERVED_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(t, _)| t.to_string()))
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..4].iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace split, unknown words to UNK, optional BOS/EOS framing.
    /// `max_len` bounds the word count.
    pub fn encode(&self, sentence: &str, add_bos_eos: bool, max_len: usize, policy: LengthPolicy) -> Result<TokenSequence> {
        let mut words: Vec<&str> = sentence.split_whitespace().collect();
        if words.len() > max_len {
            match policy {
                LengthPolicy::Reject => {
                    return Err(Error::SequenceTooLong {
                        len: words.len(),
                        max: max_len,
                    })
                }
                LengthPolicy::Truncate => words.truncate(max_len),
            }
        }
        let mut ids = Vec::with_capacity(words.len() + 2);
        if add_bos_eos {
            ids.push(BOS_ID);
        }
        ids.extend(words.iter().map(|w| self.id(w)));
        if add_bos_eos {
            ids.push(EOS_ID);
        }
        Ok(ids)
    }

    /// Space-joined tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID && i != BOS_ID && i != EOS_ID)
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK_ID]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(Error::at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}
