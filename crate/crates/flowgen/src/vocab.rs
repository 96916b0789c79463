//! Whitespace tokenization and vocabulary management.
//!
//! Six reserved symbols are pinned to ids 0..=5 so downstream mask and
//! attention tests can hard-code them. The on-disk vocab file holds one
//! non-reserved token per line; line number = id - 6.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const ATTN: u32 = 4;
pub const MASK: u32 = 5;

pub const RESERVED: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]", "[ATTN]", "[MASK]"];
pub const NUM_RESERVED: u32 = 6;

/// Token table: bijective over non-reserved tokens, reserved ids fixed.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from non-reserved tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for (i, r) in RESERVED.iter().enumerate() {
            token_to_id.insert(r.to_string(), i as u32);
        }
        for token in tokens {
            if token_to_id.contains_key(&token) {
                return Err(Error::data(format!("duplicate vocab token: {token:?}")));
            }
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid vocab token: {token:?}")));
            }
            token_to_id.insert(token.clone(), id_to_token.len() as u32);
            id_to_token.push(token);
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    /// Count tokens over a corpus and keep the most frequent.
    ///
    /// Tokens are ranked by `(-frequency, lexicographic)` and the table is
    /// truncated to `max_size` entries including the 6 reserved ids, so the
    /// result is a pure function of the corpus multiset.
    pub fn build<'a, I>(token_lines: I, min_count: u64, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in token_lines {
            for token in line {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let budget = max_size.saturating_sub(RESERVED.len());
        ranked.truncate(budget);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Token id, [UNK] for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Whitespace-split `text` into ids, truncating to `max_len` tokens.
    pub fn encode(&self, text: &str, lowercase: bool, max_len: Option<usize>) -> Vec<u32> {
        let lowered;
        let text = if lowercase {
            lowered = text.to_lowercase();
            &lowered
        } else {
            text
        };
        let mut ids: Vec<u32> = text.split_whitespace().map(|t| self.id(t)).collect();
        if let Some(limit) = max_len {
            ids.truncate(limit);
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.id_to_token[RESERVED.len()..].join("\n");
        fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read vocab {}: {e}", path.display())))?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from))
    }
}
