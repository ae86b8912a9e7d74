//! Decode event log, exported as JSON Lines (one event object per line).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Insert,
    Keep,
}

/// One token revealed by a decode step. `offset` is relative to the start of the
/// generation region, so it survives prompt growth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmaskedToken {
    pub offset: usize,
    pub token: TokenId,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based block index.
    pub block: usize,
    /// 1-based step index within the block.
    pub step: usize,
    pub unmasked: Vec<UnmaskedToken>,
    /// Set when the step-per-block budget ran out and the remaining positions were filled
    /// greedily.
    #[serde(default)]
    pub forced: bool,
    pub micros: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum TraceEvent {
    Refresh {
        block: usize,
        stamp: u64,
        seq_len: usize,
        window_start: usize,
        window_end: usize,
    },
    Policy {
        block: usize,
        consulted: bool,
        action: Action,
        k: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        mu_bar: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        p_insert: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        penalty: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    Insert {
        block: usize,
        k: usize,
        example_id: String,
        seq_len: usize,
        prompt_len: usize,
    },
    Step(StepRecord),
    Done {
        block: usize,
        k: usize,
        steps: usize,
        refreshes: usize,
        seq_len: usize,
    },
}

impl TraceEvent {
    pub fn block(&self) -> usize {
        match self {
            TraceEvent::Refresh { block, .. }
            | TraceEvent::Policy { block, .. }
            | TraceEvent::Insert { block, .. }
            | TraceEvent::Done { block, .. } => *block,
            TraceEvent::Step(r) => r.block,
        }
    }
}

pub fn write_jsonl<W: Write>(events: &[TraceEvent], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_are_tagged_one_per_line() {
        let events = vec![
            TraceEvent::Refresh {
                block: 1,
                stamp: 0,
                seq_len: 40,
                window_start: 8,
                window_end: 16,
            },
            TraceEvent::Step(StepRecord {
                block: 1,
                step: 1,
                unmasked: vec![UnmaskedToken {
                    offset: 0,
                    token: 65,
                    confidence: 0.5,
                }],
                forced: false,
                micros: 12,
            }),
            TraceEvent::Policy {
                block: 2,
                consulted: true,
                action: Action::Keep,
                k: 1,
                mu: Some(0.5),
                mu_bar: Some(0.6),
                p_insert: Some(0.625),
                penalty: Some(0.9),
                note: None,
            },
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with(r#"{"event":"refresh","block":1"#));
        assert!(lines[1].contains(r#""event":"step""#));
        assert!(!lines[2].contains("note"));
        let back: TraceEvent = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(back, events[2]);
    }
}
