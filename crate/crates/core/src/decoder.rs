//! Threshold-based parallel unmasking, with and without the block-wise KV cache.
//!
//! Both loops split the generation region into `gen_len / block_size` blocks and decode them
//! left to right. Inside a block, each step predicts every still-masked position, reveals all
//! of those whose confidence clears the threshold, and always reveals the single most
//! confident one so every step makes progress.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{cached_forward, refresh_cache};
use crate::model::{Logits, ToyDlm};
use crate::sequence::SequenceState;
use crate::timing::Stopwatch;
use crate::tokenizer::TokenId;
use crate::trace::{StepRecord, TraceEvent, UnmaskedToken};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub gen_len: usize,
    pub block_size: usize,
    pub steps_per_block: usize,
    pub threshold: f32,
    /// Diagnostic mode: rebuild the cache before every step instead of once per block.
    #[serde(default)]
    pub refresh_every_step: bool,
}

impl DecodeConfig {
    pub const DEFAULT_THRESHOLD: f32 = 0.9;

    /// `steps_per_block` defaults to `block_size`, enough to finish any block one token at a
    /// time.
    pub fn new(gen_len: usize, block_size: usize) -> Result<Self> {
        let cfg = Self {
            gen_len,
            block_size,
            steps_per_block: block_size,
            threshold: Self::DEFAULT_THRESHOLD,
            refresh_every_step: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_threshold(mut self, threshold: f32) -> Result<Self> {
        self.threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    pub fn with_steps(mut self, steps_per_block: usize) -> Result<Self> {
        self.steps_per_block = steps_per_block;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.gen_len == 0 {
            return Err(Error::InvalidConfig("gen_len and block_size must be positive".into()));
        }
        if self.gen_len % self.block_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "gen_len {} is not a multiple of block_size {}",
                self.gen_len, self.block_size
            )));
        }
        if self.steps_per_block == 0 {
            return Err(Error::InvalidConfig("steps_per_block must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::OutOfRange {
                name: "threshold",
                value: f64::from(self.threshold),
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_len / self.block_size
    }

    /// Absolute window of 1-based block `n` when the generation region starts at `gen_start`.
    pub fn block_window(&self, gen_start: usize, n: usize) -> Range<usize> {
        let s = gen_start + (n - 1) * self.block_size;
        s..s + self.block_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmaskDecision {
    /// Ascending absolute positions.
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f32>,
}

/// Chooses positions to reveal: every masked position with confidence `>= tau`, plus the
/// most confident one (lowest position on ties). Tokens are the row argmax.
pub fn unmask_step(logits: &Logits, masked_positions: &[usize], tau: f32) -> Result<UnmaskDecision> {
    if masked_positions.is_empty() {
        return Err(Error::EmptyMaskedSet);
    }
    let mut sorted = masked_positions.to_vec();
    sorted.sort_unstable();
    let mut candidates = Vec::with_capacity(sorted.len());
    for &p in &sorted {
        let row = logits
            .positions()
            .iter()
            .position(|&q| q == p)
            .ok_or(Error::PositionOutOfBounds {
                position: p,
                len: logits.len(),
            })?;
        let (token, conf) = logits.argmax(row);
        candidates.push((p, token, conf));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.2 > candidates[best].2 {
            best = i;
        }
    }
    let mut decision = UnmaskDecision {
        positions: Vec::new(),
        tokens: Vec::new(),
        confidences: Vec::new(),
    };
    for (i, &(p, token, conf)) in candidates.iter().enumerate() {
        if conf >= tau || i == best {
            decision.positions.push(p);
            decision.tokens.push(token);
            decision.confidences.push(conf);
        }
    }
    Ok(decision)
}

/// Hooks for inspecting a decode as it runs.
pub trait DecodeObserver {
    /// Called with the logits of the first cached step of each block, right after the refresh.
    fn on_first_cached_step(&mut self, _model: &ToyDlm, _seq: &SequenceState, _block: usize, _logits: &Logits) {}
}

pub struct NoopObserver;

impl DecodeObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub seq: SequenceState,
    pub steps: Vec<StepRecord>,
    pub trace: Vec<TraceEvent>,
    /// Non-KV-cache calls made at block boundaries (one per block).
    pub refreshes: usize,
    pub warnings: Vec<String>,
}

impl DecodeOutput {
    pub fn generated_tokens(&self) -> &[TokenId] {
        self.seq.generated_tokens()
    }

    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }
}

pub(crate) fn check_prompt(seq: &SequenceState, cfg: &DecodeConfig) -> Result<Range<usize>> {
    cfg.validate()?;
    let gen = seq
        .generation()
        .ok_or_else(|| Error::InvalidConfig("sequence has no generation segment".into()))?;
    if gen.len() != cfg.gen_len || gen.end != seq.len() {
        return Err(Error::InvalidConfig(format!(
            "generation segment has {} positions, expected {} at the end of the sequence",
            gen.len(),
            cfg.gen_len
        )));
    }
    if seq.count_masked(gen.range()) != cfg.gen_len {
        return Err(Error::InvalidConfig("generation segment is not fully masked".into()));
    }
    Ok(gen.range())
}

fn apply(
    seq: &mut SequenceState,
    decision: &UnmaskDecision,
    window: &Range<usize>,
    gen_start: usize,
) -> Result<Vec<UnmaskedToken>> {
    let mut out = Vec::with_capacity(decision.positions.len());
    for ((&p, &token), &confidence) in decision
        .positions
        .iter()
        .zip(&decision.tokens)
        .zip(&decision.confidences)
    {
        if !window.contains(&p) || !seq.is_masked(p) {
            return Err(Error::Invariant(format!("attempt to write position {p} outside the masked window")));
        }
        seq.set_token(p, token)?;
        out.push(UnmaskedToken {
            offset: p - gen_start,
            token,
            confidence,
        });
    }
    Ok(out)
}

/// Decodes one block with the cache: a refresh, then up to `steps_per_block` cached steps,
/// stopping as soon as the block has no masks left. Used by both the Fast-dLLM loop and DIP.
pub(crate) fn decode_block_cached(
    model: &ToyDlm,
    seq: &mut SequenceState,
    block: usize,
    cfg: &DecodeConfig,
    stamp: &mut u64,
    trace: &mut Vec<TraceEvent>,
    warnings: &mut Vec<String>,
    observer: &mut dyn DecodeObserver,
) -> Result<Vec<StepRecord>> {
    let gen_start = seq.prompt_len();
    let window = cfg.block_window(gen_start, block);
    let refresh = |seq: &SequenceState, stamp: &mut u64, trace: &mut Vec<TraceEvent>| {
        let cache = refresh_cache(model, seq, window.clone(), *stamp)?;
        trace.push(TraceEvent::Refresh {
            block,
            stamp: *stamp,
            seq_len: seq.len(),
            window_start: window.start,
            window_end: window.end,
        });
        *stamp += 1;
        Ok::<_, Error>(cache)
    };
    let mut cache = refresh(seq, stamp, trace)?;
    let mut records = Vec::new();
    for step in 1..=cfg.steps_per_block {
        let masked = seq.masked_in(window.clone());
        if masked.is_empty() {
            break;
        }
        if step > 1 && cfg.refresh_every_step {
            cache = refresh(seq, stamp, trace)?;
        }
        let sw = Stopwatch::start();
        let logits = cached_forward(model, &cache, seq)?;
        if step == 1 {
            observer.on_first_cached_step(model, seq, block, &logits);
        }
        let decision = unmask_step(&logits, &masked, cfg.threshold)?;
        let unmasked = apply(seq, &decision, &window, gen_start)?;
        let record = StepRecord {
            block,
            step,
            unmasked,
            forced: false,
            micros: sw.elapsed().as_micros() as u64,
        };
        trace.push(TraceEvent::Step(record.clone()));
        records.push(record);
    }
    let masked = seq.masked_in(window.clone());
    if !masked.is_empty() {
        let sw = Stopwatch::start();
        let logits = cached_forward(model, &cache, seq)?;
        let record = force_unmask(seq, &logits, &masked, &window, gen_start, block, records.len() + 1, sw)?;
        warnings.push(format!(
            "block {block}: {} positions still masked after {} steps; filled greedily",
            masked.len(),
            cfg.steps_per_block
        ));
        trace.push(TraceEvent::Step(record.clone()));
        records.push(record);
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn force_unmask(
    seq: &mut SequenceState,
    logits: &Logits,
    masked: &[usize],
    window: &Range<usize>,
    gen_start: usize,
    block: usize,
    step: usize,
    sw: Stopwatch,
) -> Result<StepRecord> {
    // Threshold 0 reveals every masked position.
    let decision = unmask_step(logits, masked, 0.0)?;
    let unmasked = apply(seq, &decision, window, gen_start)?;
    Ok(StepRecord {
        block,
        step,
        unmasked,
        forced: true,
        micros: sw.elapsed().as_micros() as u64,
    })
}

/// Fast-dLLM threshold decoding: one cache refresh per block, cached steps inside it.
pub fn decode_fastdllm(model: &ToyDlm, prompt: &SequenceState, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    decode_fastdllm_observed(model, prompt, cfg, &mut NoopObserver)
}

pub fn decode_fastdllm_observed(
    model: &ToyDlm,
    prompt: &SequenceState,
    cfg: &DecodeConfig,
    observer: &mut dyn DecodeObserver,
) -> Result<DecodeOutput> {
    check_prompt(prompt, cfg)?;
    model.check_len(prompt.len())?;
    let mut seq = prompt.clone();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut steps = Vec::new();
    let mut stamp = 0;
    for block in 1..=cfg.num_blocks() {
        let records = decode_block_cached(model, &mut seq, block, cfg, &mut stamp, &mut trace, &mut warnings, observer)?;
        steps.extend(records);
    }
    trace.push(TraceEvent::Done {
        block: cfg.num_blocks(),
        k: seq.example_count(),
        steps: steps.len(),
        refreshes: cfg.num_blocks(),
        seq_len: seq.len(),
    });
    Ok(DecodeOutput {
        seq,
        steps,
        trace,
        refreshes: cfg.num_blocks(),
        warnings,
    })
}

/// Reference loop with no cache: every step is a full forward pass over the whole sequence.
/// Unmasking follows exactly the same rule as [`decode_fastdllm`].
pub fn decode_baseline(model: &ToyDlm, prompt: &SequenceState, cfg: &DecodeConfig) -> Result<DecodeOutput> {
    let gen = check_prompt(prompt, cfg)?;
    model.check_len(prompt.len())?;
    let gen_start = gen.start;
    let mut seq = prompt.clone();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut steps = Vec::new();
    for block in 1..=cfg.num_blocks() {
        let window = cfg.block_window(gen_start, block);
        let mut block_steps = 0;
        for step in 1..=cfg.steps_per_block {
            let masked = seq.masked_in(window.clone());
            if masked.is_empty() {
                break;
            }
            let sw = Stopwatch::start();
            let logits = model.model_forward(&seq, &masked)?;
            let decision = unmask_step(&logits, &masked, cfg.threshold)?;
            let unmasked = apply(&mut seq, &decision, &window, gen_start)?;
            let record = StepRecord {
                block,
                step,
                unmasked,
                forced: false,
                micros: sw.elapsed().as_micros() as u64,
            };
            trace.push(TraceEvent::Step(record.clone()));
            steps.push(record);
            block_steps = step;
        }
        let masked = seq.masked_in(window.clone());
        if !masked.is_empty() {
            let sw = Stopwatch::start();
            let logits = model.model_forward(&seq, &masked)?;
            let record = force_unmask(&mut seq, &logits, &masked, &window, gen_start, block, block_steps + 1, sw)?;
            warnings.push(format!("block {block}: filled {} positions greedily", masked.len()));
            trace.push(TraceEvent::Step(record.clone()));
            steps.push(record);
        }
    }
    trace.push(TraceEvent::Done {
        block: cfg.num_blocks(),
        k: seq.example_count(),
        steps: steps.len(),
        refreshes: cfg.num_blocks(),
        seq_len: seq.len(),
    });
    Ok(DecodeOutput {
        seq,
        steps,
        trace,
        refreshes: cfg.num_blocks(),
        warnings,
    })
}
