use serde::{Deserialize, Serialize};

use super::ids::{IdMap, PrefixTree};
use crate::data::PAD_TOKEN;
use crate::{Error, Result};

pub const PAD: u32 = PAD_TOKEN;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;

/// Global token ids: three specials, then one block of `K` ids per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocabulary {
    pub levels: usize,
    pub codebook_size: usize,
}

impl TokenVocabulary {
    pub fn new(levels: usize, codebook_size: usize) -> Self {
        Self { levels, codebook_size }
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS as usize + self.levels * self.codebook_size
    }

    pub fn token(&self, level: usize, code: u32) -> u32 {
        debug_assert!(level < self.levels && (code as usize) < self.codebook_size);
        NUM_SPECIALS + (level * self.codebook_size) as u32 + code
    }

    /// `(level, code)` for a code token, `None` for specials and out-of-range ids.
    pub fn split(&self, token: u32) -> Option<(usize, u32)> {
        if token < NUM_SPECIALS || token as usize >= self.size() {
            return None;
        }
        let off = (token - NUM_SPECIALS) as usize;
        Some((off / self.codebook_size, (off % self.codebook_size) as u32))
    }

    pub fn item_tokens(&self, codes: &[u32]) -> Vec<u32> {
        codes.iter().enumerate().map(|(l, &c)| self.token(l, c)).collect()
    }

    /// Concatenated code tokens of every history item, oldest first. The
    /// trailing EOS is added when the sequence is embedded.
    pub fn tokenize_sequence<S: AsRef<str>>(&self, history: &[S], ids: &IdMap) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(history.len() * self.levels);
        for item in history {
            out.extend(self.tokenize_target(item.as_ref(), ids)?);
        }
        Ok(out)
    }

    pub fn tokenize_target(&self, item: &str, ids: &IdMap) -> Result<Vec<u32>> {
        let codes = ids.get(item).ok_or_else(|| Error::UnknownItem(item.to_string()))?;
        Ok(self.item_tokens(codes))
    }

    /// Map an `L`-token target back to its item.
    pub fn detokenize<'t>(&self, tokens: &[u32], trie: &'t PrefixTree) -> Option<&'t str> {
        if tokens.len() != self.levels {
            return None;
        }
        let codes: Option<Vec<u32>> = tokens
            .iter()
            .enumerate()
            .map(|(l, &t)| self.split(t).filter(|(lv, _)| *lv == l).map(|(_, c)| c))
            .collect();
        trie.lookup(&codes?)
    }
}
