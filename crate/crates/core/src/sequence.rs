//! Token sequences with an explicit segment layout: examples, then the query, then the
//! generation region.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Example,
    Query,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<TokenId>,
    mask_flags: Vec<bool>,
    segments: Vec<Segment>,
    mask_id: TokenId,
}

impl SequenceState {
    /// Builds a sequence from ordered `(kind, tokens)` parts. Adjacent parts are laid out
    /// back to back so the segments partition the sequence.
    pub fn from_parts(vocab: &Vocab, parts: Vec<(SegmentKind, Vec<TokenId>)>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(parts.len());
        let mut last_kind = SegmentKind::Example;
        for (kind, part) in parts {
            let order_ok = match (last_kind, kind) {
                (SegmentKind::Example, _) => true,
                (SegmentKind::Query, SegmentKind::Generation) => true,
                _ => false,
            };
            if !order_ok || (kind != SegmentKind::Example && segments.iter().any(|s: &Segment| s.kind == kind)) {
                return Err(Error::InvalidConfig(format!(
                    "segment {kind:?} may not follow {last_kind:?}"
                )));
            }
            let start = tokens.len();
            tokens.extend_from_slice(&part);
            segments.push(Segment {
                kind,
                start,
                end: tokens.len(),
            });
            last_kind = kind;
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.size) {
            return Err(Error::InvalidConfig(format!("token id {bad} outside vocab")));
        }
        let mask_flags = tokens.iter().map(|&t| t == vocab.mask_id).collect();
        Ok(Self {
            tokens,
            mask_flags,
            segments,
            mask_id: vocab.mask_id,
        })
    }

    /// A prompt (one query segment) followed by `gen_len` mask tokens.
    pub fn prompt_with_masks(vocab: &Vocab, prompt: Vec<TokenId>, gen_len: usize) -> Result<Self> {
        Self::from_parts(
            vocab,
            vec![
                (SegmentKind::Query, prompt),
                (SegmentKind::Generation, vec![vocab.mask_id; gen_len]),
            ],
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn token(&self, position: usize) -> TokenId {
        self.tokens[position]
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.mask_flags[position]
    }

    pub fn mask_flags(&self) -> &[bool] {
        &self.mask_flags
    }

    pub fn generation(&self) -> Option<Segment> {
        self.segments
            .iter()
            .copied()
            .find(|s| s.kind == SegmentKind::Generation)
    }

    pub fn example_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Example)
            .count()
    }

    /// Length of everything before the generation region.
    pub fn prompt_len(&self) -> usize {
        self.generation().map_or(self.len(), |g| g.start)
    }

    pub fn masked_in(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&i| self.mask_flags[i]).collect()
    }

    pub fn count_masked(&self, range: Range<usize>) -> usize {
        self.mask_flags[range].iter().filter(|&&m| m).count()
    }

    pub fn generated_tokens(&self) -> &[TokenId] {
        match self.generation() {
            Some(g) => &self.tokens[g.range()],
            None => &[],
        }
    }

    pub fn set_token(&mut self, position: usize, token: TokenId) -> Result<()> {
        if position >= self.tokens.len() {
            return Err(Error::PositionOutOfBounds {
                position,
                len: self.tokens.len(),
            });
        }
        self.tokens[position] = token;
        self.mask_flags[position] = token == self.mask_id;
        Ok(())
    }

    /// Checks the segment partition, ordering, and mask-flag invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let mut cursor = 0;
        for s in &self.segments {
            if s.start != cursor || s.end < s.start {
                return Err(Error::Invariant(format!(
                    "segments do not partition the sequence at {cursor}"
                )));
            }
            cursor = s.end;
        }
        if cursor != self.tokens.len() {
            return Err(Error::Invariant("segments do not cover the sequence".into()));
        }
        for (i, (&t, &m)) in self.tokens.iter().zip(&self.mask_flags).enumerate() {
            if (t == self.mask_id) != m {
                return Err(Error::Invariant(format!("mask flag out of sync at {i}")));
            }
        }
        Ok(())
    }
}
