//! Byte-level vocabulary: ids 0..256 are raw bytes, followed by four special ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub sep_id: TokenId,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Vocab {
    pub const BYTE_COUNT: usize = 256;

    pub fn byte_level() -> Self {
        Self {
            size: Self::BYTE_COUNT + 4,
            mask_id: 256,
            pad_id: 257,
            bos_id: 258,
            sep_id: 259,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let specials = [self.mask_id, self.pad_id, self.bos_id, self.sep_id];
        for (i, a) in specials.iter().enumerate() {
            if *a as usize >= self.size {
                return Err(Error::InvalidConfig(format!(
                    "special id {a} is not below vocab size {}",
                    self.size
                )));
            }
            if specials[i + 1..].contains(a) {
                return Err(Error::InvalidConfig(format!("special id {a} used twice")));
            }
        }
        Ok(())
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.mask_id || id == self.pad_id || id == self.bos_id || id == self.sep_id
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Renders tokens back to text. Invalid UTF-8 is replaced, special ids are shown as tags.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        let mut bytes = Vec::new();
        for &t in tokens {
            if (t as usize) < Self::BYTE_COUNT {
                bytes.push(t as u8);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push_str(match t {
                t if t == self.mask_id => "[MASK]",
                t if t == self.pad_id => "[PAD]",
                t if t == self.bos_id => "[BOS]",
                t if t == self.sep_id => "[SEP]",
                _ => "[UNK]",
            });
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }
}
