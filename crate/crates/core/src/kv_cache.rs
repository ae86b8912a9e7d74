//! Block-wise dual KV cache.
//!
//! At each block boundary a full (non-cached) pass computes keys and values for every
//! position; the rows outside the active window `[start, end)` are kept. Within the block,
//! only window rows are recomputed and the cached rows are reused as-is, even though the
//! window tokens they attended to keep changing. That staleness is the approximation the
//! cache trades for speed.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{Logits, ToyDlm, WindowKv};
use crate::sequence::SequenceState;

struct CachedLayer {
    keys_before: Vec<f32>,
    values_before: Vec<f32>,
    keys_after: Vec<f32>,
    values_after: Vec<f32>,
}

pub struct BlockKvCache {
    layers: Vec<CachedLayer>,
    window: Range<usize>,
    seq_len: usize,
    stamp: u64,
    fingerprint: u64,
}

fn outside_fingerprint(seq: &SequenceState, window: &Range<usize>) -> u64 {
    let mut h = DefaultHasher::new();
    seq.len().hash(&mut h);
    seq.tokens()[..window.start].hash(&mut h);
    seq.tokens()[window.end..].hash(&mut h);
    h.finish()
}

/// Full non-cached pass over `seq`, keeping keys/values outside `window`. `stamp` identifies
/// the refresh (callers number them in order).
pub fn refresh_cache(
    model: &ToyDlm,
    seq: &SequenceState,
    window: Range<usize>,
    stamp: u64,
) -> Result<BlockKvCache> {
    if window.start >= window.end || window.end > seq.len() {
        return Err(Error::WindowOutOfBounds {
            start: window.start,
            end: window.end,
            len: seq.len(),
        });
    }
    model.check_len(seq.len())?;
    let d = model.config().hidden_dim;
    let (_, kv, _) = model.forward_hidden(seq.tokens(), true);
    let (s, e) = (window.start * d, window.end * d);
    let layers = kv
        .into_iter()
        .map(|l| CachedLayer {
            keys_before: l.keys[..s].to_vec(),
            values_before: l.values[..s].to_vec(),
            keys_after: l.keys[e..].to_vec(),
            values_after: l.values[e..].to_vec(),
        })
        .collect();
    Ok(BlockKvCache {
        layers,
        fingerprint: outside_fingerprint(seq, &window),
        window,
        seq_len: seq.len(),
        stamp,
    })
}

impl BlockKvCache {
    pub fn window(&self) -> Range<usize> {
        self.window.clone()
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Positions whose keys/values are held in the cache.
    pub fn cached_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.window.start).chain(self.window.end..self.seq_len)
    }

    /// Errors if `seq` no longer matches the sequence this cache was built from outside the
    /// window.
    pub fn validate(&self, seq: &SequenceState) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::StaleCache {
                stamp: self.stamp,
                reason: "sequence length changed since refresh",
            });
        }
        if outside_fingerprint(seq, &self.window) != self.fingerprint {
            return Err(Error::StaleCache {
                stamp: self.stamp,
                reason: "a cached position changed since refresh",
            });
        }
        Ok(())
    }
}

/// Distributions for every window position, computed from fresh window rows and cached rows
/// everywhere else.
pub fn cached_forward(model: &ToyDlm, cache: &BlockKvCache, seq: &SequenceState) -> Result<Logits> {
    cache.validate(seq)?;
    let window = cache.window();
    let cached: Vec<WindowKv<'_>> = cache
        .layers
        .iter()
        .map(|l| WindowKv {
            keys_before: &l.keys_before,
            values_before: &l.values_before,
            keys_after: &l.keys_after,
            values_after: &l.values_after,
        })
        .collect();
    let (hidden, mut stats) = model.forward_window(&seq.tokens()[window.clone()], window.start, &cached);
    Ok(model.project(&hidden, window.collect(), &mut stats))
}
