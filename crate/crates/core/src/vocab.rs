//! Word-level tokenizer and vocabulary.
//!
//! Tokens are maximal alphanumeric runs, single punctuation characters, and
//! the reserved markers `[HEAD]`, `[ROW]` and `||`.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::table::{CELL_DELIMITER, HEAD_MARKER, ROW_MARKER, SEPARATOR};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOA: &str = "<s>";
pub const EOA: &str = "</s>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOA_ID: u32 = 2;
pub const EOA_ID: u32 = 3;
pub const HEAD_ID: u32 = 4;
pub const ROW_ID: u32 = 5;
pub const SEPARATOR_ID: u32 = 6;
pub const DELIMITER_ID: u32 = 7;

const SPECIALS: [&str; 8] = [PAD, UNK, BOA, EOA, HEAD_MARKER, ROW_MARKER, SEPARATOR, CELL_DELIMITER];
const MULTI_CHAR_MARKERS: [&str; 3] = [HEAD_MARKER, ROW_MARKER, CELL_DELIMITER];

/// Splits `text` into tokens with their byte spans.
pub fn tokenize(text: &str) -> Vec<(String, Range<usize>)> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, ch)) = chars.peek() {
        if ch.is_whitespace() {
            chars.next();
            continue;
        }
        if let Some(m) = MULTI_CHAR_MARKERS.iter().find(|m| text[i..].starts_with(**m)) {
            out.push((m.to_string(), i..i + m.len()));
            while chars.peek().is_some_and(|&(j, _)| j < i + m.len()) {
                chars.next();
            }
            continue;
        }
        if ch.is_alphanumeric() {
            let mut end = i;
            while let Some(&(j, c)) = chars.peek() {
                if c.is_alphanumeric() {
                    end = j + c.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((text[i..end].to_string(), i..end));
        } else {
            let end = i + ch.len_utf8();
            out.push((text[i..end].to_string(), i..end));
            chars.next();
        }
    }
    out
}

/// Tokens of `text` joined by single spaces.
pub fn canonical(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Self::from_tokens(f.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Special tokens first (fixed ids), then every token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = BTreeSet::new();
        for text in texts {
            for (tok, _) in tokenize(text) {
                seen.insert(tok);
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&i) => i,
            None => {
                log::debug!("token {token:?} not in vocabulary, using {UNK}");
                UNK_ID
            }
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|(t, _)| self.id(&t)).collect()
    }

    /// Joins tokens with single spaces, skipping padding and answer markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | BOA_ID | EOA_ID))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable content hash, used to pair checkpoints with vocabularies.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}
