//! Word-level vocabulary and text normalization.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::Modality;

pub type TokenId = usize;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const SEP: &str = "<sep>";

/// Special tokens in id order; they always occupy the lowest ids.
pub const SPECIAL_TOKENS: [&str; 7] = [BOS, EOS, PAD, SEP, "<img>", "<aud>", "<vid>"];

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const PAD_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

pub fn placeholder_id(m: Modality) -> TokenId {
    match m {
        Modality::Image => 4,
        Modality::Audio => 5,
        Modality::Video => 6,
    }
}

pub fn is_special(id: TokenId) -> bool {
    id < SPECIAL_TOKENS.len()
}

/// Lowercase, drop punctuation other than `?`, detach `?` into its own
/// token and collapse whitespace.
pub fn normalize(text: &str) -> String {
    let mut buf = String::with_capacity(text.len() + 4);
    for ch in text.chars() {
        if ch == '?' {
            buf.push_str(" ? ");
        } else if ch.is_alphanumeric() {
            buf.extend(ch.to_lowercase());
        } else if ch.is_whitespace() {
            buf.push(' ');
        } else if ch == '-' || ch == '/' {
            // joined words stay separate tokens
            buf.push(' ');
        }
    }
    buf.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn word_count(text: &str) -> usize {
    normalize(text).split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Special tokens first, then every whitespace token of the normalized
    /// corpus in first-occurrence order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            vocab.push(s);
        }
        for line in corpus {
            for word in normalize(line.as_ref()).split_whitespace() {
                vocab.push(word);
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        normalize(text)
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| self.token(id).ok_or(Error::UnknownTokenId(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Decode generated ids, skipping special tokens.
    pub fn decode_words(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for line in text.lines() {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if vocab.contains(t) {
                return Err(Error::Malformed(format!("duplicate token '{t}'")));
            }
            vocab.push(t);
        }
        for (id, s) in SPECIAL_TOKENS.iter().enumerate() {
            if vocab.token(id) != Some(*s) {
                return Err(Error::Malformed(format!(
                    "vocabulary file must start with the special tokens, expected '{s}' at line {}",
                    id + 1
                )));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the persisted form.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
