//! Absorbing-state forward process: every position independently becomes `[MASK]` with
//! probability `t`, and a masked position stays masked.

use std::ops::Range;

use rand::Rng;

use crate::error::{check_unit_interval, Error, Result};
use crate::sequence::SequenceState;

pub fn forward_mask<R: Rng + ?Sized>(y0: &SequenceState, t: f64, rng: &mut R) -> Result<SequenceState> {
    forward_mask_range(y0, 0..y0.len(), t, rng)
}

/// Corrupts only positions in `range`; positions outside it are copied unchanged.
pub fn forward_mask_range<R: Rng + ?Sized>(
    y0: &SequenceState,
    range: Range<usize>,
    t: f64,
    rng: &mut R,
) -> Result<SequenceState> {
    check_unit_interval("t", t)?;
    if range.end > y0.len() || range.start > range.end {
        return Err(Error::WindowOutOfBounds {
            start: range.start,
            end: range.end,
            len: y0.len(),
        });
    }
    let mut yt = y0.clone();
    let mask = y0.mask_id();
    for i in range {
        // One draw per position regardless of state keeps the stream aligned across inputs.
        let hit = rng.random::<f64>() < t;
        if hit && !yt.is_masked(i) {
            yt.set_token(i, mask)?;
        }
    }
    Ok(yt)
}
