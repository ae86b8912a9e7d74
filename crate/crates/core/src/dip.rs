//! Dynamic in-context planning on top of block-wise cached decoding.
//!
//! The prompt starts with only the top-ranked example. Before every block after the first,
//! the insertion policy may add the next-ranked example. Because each block already begins
//! with a full non-cached pass to rebuild the KV cache, the prompt can be re-laid-out at that
//! point for the price of the refresh that happens anyway. Tokens generated in earlier
//! blocks are carried over verbatim, shifted to their new absolute positions.

use serde::{Deserialize, Serialize};

use crate::decoder::{check_prompt, decode_block_cached, DecodeConfig, DecodeObserver, NoopObserver};
use crate::error::{Error, Result};
use crate::model::ToyDlm;
use crate::policy::{ConfidenceStats, PolicyMode, PolicyState};
use crate::pool::{render_example, render_query, Example, ExamplePool};
use crate::ranking::RankedExamples;
use crate::sequence::{SegmentKind, SequenceState};
use crate::tokenizer::{TokenId, Vocab};
use crate::trace::{Action, StepRecord, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipParams {
    pub epsilon: f64,
    pub lambda: f64,
    /// Seed of the policy's Bernoulli draws.
    pub seed: u64,
    pub mode: PolicyMode,
}

impl Default for DipParams {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            lambda: 0.1,
            seed: 0,
            mode: PolicyMode::Bernoulli,
        }
    }
}

fn prompt_parts(vocab: &Vocab, examples: &[&Example], query: &str) -> Vec<(SegmentKind, Vec<TokenId>)> {
    let mut parts: Vec<_> = examples
        .iter()
        .map(|e| (SegmentKind::Example, vocab.encode(&render_example(&e.question, &e.answer))))
        .collect();
    parts.push((SegmentKind::Query, vocab.encode(&render_query(query))));
    parts
}

/// `[E_1 .. E_k ; query ; gen_len masks]` with examples taken in the given (rank) order.
pub fn build_prompt(
    vocab: &Vocab,
    ranked: &[&Example],
    k: usize,
    query: &str,
    gen_len: usize,
    max_seq_len: usize,
) -> Result<SequenceState> {
    if k == 0 || k > ranked.len() {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as f64,
            lo: 1.0,
            hi: ranked.len() as f64,
        });
    }
    let mut parts = prompt_parts(vocab, &ranked[..k], query);
    parts.push((SegmentKind::Generation, vec![vocab.mask_id; gen_len]));
    let seq = SequenceState::from_parts(vocab, parts)?;
    if seq.len() > max_seq_len {
        return Err(Error::SequenceOverflow {
            len: seq.len(),
            max: max_seq_len,
        });
    }
    Ok(seq)
}

/// Rebuilds the prompt with `ranked[..k]` and appends the current generation region
/// unchanged (revealed tokens and remaining masks alike).
pub fn grow_prompt(
    vocab: &Vocab,
    seq: &SequenceState,
    ranked: &[&Example],
    k: usize,
    query: &str,
    max_seq_len: usize,
) -> Result<SequenceState> {
    if k == 0 || k > ranked.len() {
        return Err(Error::OutOfRange {
            name: "k",
            value: k as f64,
            lo: 1.0,
            hi: ranked.len() as f64,
        });
    }
    let mut parts = prompt_parts(vocab, &ranked[..k], query);
    parts.push((SegmentKind::Generation, seq.generated_tokens().to_vec()));
    let grown = SequenceState::from_parts(vocab, parts)?;
    if grown.len() > max_seq_len {
        return Err(Error::SequenceOverflow {
            len: grown.len(),
            max: max_seq_len,
        });
    }
    if grown.generated_tokens() != seq.generated_tokens() {
        return Err(Error::Invariant("generated tokens changed during prompt growth".into()));
    }
    Ok(grown)
}

#[derive(Debug, Clone)]
pub struct DipOutput {
    pub seq: SequenceState,
    pub steps: Vec<StepRecord>,
    pub trace: Vec<TraceEvent>,
    pub refreshes: usize,
    /// Examples in context at the end.
    pub final_k: usize,
    /// Example count in context while decoding each block (index 0 is block 1).
    pub k_per_block: Vec<usize>,
    /// Blocks before which an example was inserted.
    pub insert_blocks: Vec<usize>,
    pub warnings: Vec<String>,
}

impl DipOutput {
    pub fn generated_tokens(&self) -> &[TokenId] {
        self.seq.generated_tokens()
    }
}

pub fn decode_dip(
    model: &ToyDlm,
    pool: &ExamplePool,
    ranked: &RankedExamples,
    query: &str,
    cfg: &DecodeConfig,
    params: &DipParams,
) -> Result<DipOutput> {
    decode_dip_observed(model, pool, ranked, query, cfg, params, &mut NoopObserver)
}

pub fn decode_dip_observed(
    model: &ToyDlm,
    pool: &ExamplePool,
    ranked: &RankedExamples,
    query: &str,
    cfg: &DecodeConfig,
    params: &DipParams,
    observer: &mut dyn DecodeObserver,
) -> Result<DipOutput> {
    if ranked.indices.iter().any(|&i| i >= pool.len()) || ranked.len() != pool.len() {
        return Err(Error::InvalidConfig("ranking does not match the example pool".into()));
    }
    let examples = ranked.examples(pool);
    let vocab = *model.vocab();
    let max_len = model.config().max_seq_len;
    let blocks = cfg.num_blocks();
    let mut policy = PolicyState::new(blocks, params.epsilon, params.lambda, examples.len(), params.seed)?
        .with_mode(params.mode);

    let mut seq = build_prompt(&vocab, &examples, 1, query, cfg.gen_len, max_len)?;
    check_prompt(&seq, cfg)?;

    let mut stats = ConfidenceStats::default();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut steps = Vec::new();
    let mut insert_blocks = Vec::new();
    let mut k_per_block = Vec::with_capacity(blocks);
    let mut stamp = 0;

    for n in 1..=blocks {
        if n == 1 {
            trace.push(TraceEvent::Policy {
                block: 1,
                consulted: false,
                action: Action::Keep,
                k: policy.k(),
                mu: None,
                mu_bar: None,
                p_insert: None,
                penalty: None,
                note: Some("not consulted before block 2".into()),
            });
        } else {
            let decision = policy.decide(n, &stats)?;
            let mut action = decision.action;
            let mut note = decision.note.clone();
            let mut inserted = None;
            if action == Action::Insert {
                let k_new = policy.k() + 1;
                match grow_prompt(&vocab, &seq, &examples, k_new, query, max_len) {
                    Ok(grown) => {
                        seq = grown;
                        policy.record_insert()?;
                        insert_blocks.push(n);
                        inserted = Some(examples[k_new - 1].id.clone());
                    }
                    Err(Error::SequenceOverflow { len, max }) => {
                        let msg = format!("block {n}: skipped insertion, prompt would reach {len} > {max} tokens");
                        warnings.push(msg.clone());
                        action = Action::Keep;
                        note = Some(msg);
                    }
                    Err(e) => return Err(e),
                }
            }
            trace.push(TraceEvent::Policy {
                block: n,
                consulted: true,
                action,
                k: policy.k(),
                mu: decision.mu,
                mu_bar: decision.mu_bar,
                p_insert: decision.p_insert,
                penalty: decision.penalty,
                note,
            });
            if let Some(example_id) = inserted {
                trace.push(TraceEvent::Insert {
                    block: n,
                    k: policy.k(),
                    example_id,
                    seq_len: seq.len(),
                    prompt_len: seq.prompt_len(),
                });
            }
        }
        k_per_block.push(policy.k());
        let records = decode_block_cached(model, &mut seq, n, cfg, &mut stamp, &mut trace, &mut warnings, observer)?;
        stats = stats.update(&records);
        steps.extend(records);
    }

    trace.push(TraceEvent::Done {
        block: blocks,
        k: policy.k(),
        steps: steps.len(),
        refreshes: blocks,
        seq_len: seq.len(),
    });
    Ok(DipOutput {
        seq,
        steps,
        trace,
        refreshes: blocks,
        final_k: policy.k(),
        k_per_block,
        insert_blocks,
        warnings,
    })
}
