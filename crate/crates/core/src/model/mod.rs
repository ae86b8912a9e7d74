//! A small bidirectional transformer standing in for the denoiser of a masked diffusion LM.
//!
//! Weights are a pure function of [`ModelConfig`] (including its seed). The network is a
//! pre-norm encoder with learned absolute position embeddings and a separate output head;
//! the `[MASK]` id is excluded from every predicted distribution.

mod io;
pub(crate) mod kernels;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SequenceState;
use crate::tokenizer::{TokenId, Vocab};
use kernels::RowView;

pub use io::{load_weights, save_weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub vocab: Vocab,
    pub seed: u64,
    /// Standard deviation of the output logits at initialization. Controls how peaked the
    /// predicted distributions are, and therefore how many tokens clear a threshold per step.
    pub logit_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_dim: 128,
            heads: 4,
            max_seq_len: 1024,
            vocab: Vocab::byte_level(),
            seed: 0,
            logit_scale: 12.0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("max_seq_len", self.max_seq_len),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::InvalidConfig("logit_scale must be positive".into()));
        }
        self.vocab.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDlm {
    config: ModelConfig,
    tok_emb: Vec<f32>,
    pos_emb: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_gamma: Vec<f32>,
    final_beta: Vec<f32>,
    lm_head: Vec<f32>,
}

/// Multiply-accumulate counts for one forward call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardStats {
    /// Query-key score multiply-accumulates, summed over heads and layers.
    pub attn_score_macs: u64,
    /// Projection, MLP and output-head multiply-accumulates.
    pub linear_macs: u64,
}

impl ForwardStats {
    pub fn total(&self) -> u64 {
        self.attn_score_macs + self.linear_macs
    }
}

/// Normalized next-token distributions for a set of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    positions: Vec<usize>,
    vocab_size: usize,
    probs: Vec<f32>,
    pub stats: ForwardStats,
}

impl Logits {
    /// Wraps precomputed row-major distributions, one row per position.
    pub fn new(positions: Vec<usize>, vocab_size: usize, probs: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || probs.len() != positions.len() * vocab_size {
            return Err(Error::InvalidConfig(format!(
                "{} probabilities do not form {} rows of width {vocab_size}",
                probs.len(),
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            vocab_size,
            probs,
            stats: ForwardStats::default(),
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.probs[index * self.vocab_size..(index + 1) * self.vocab_size]
    }

    /// Row for an absolute sequence position, if it was requested.
    pub fn row_for(&self, position: usize) -> Option<&[f32]> {
        self.positions
            .iter()
            .position(|&p| p == position)
            .map(|i| self.row(i))
    }

    /// Greedy token and its probability (the confidence) for row `index`. Ties go to the
    /// lowest token id.
    pub fn argmax(&self, index: usize) -> (TokenId, f32) {
        let mut best = (0, f32::NEG_INFINITY);
        for (t, &p) in self.row(index).iter().enumerate() {
            if p > best.1 {
                best = (t as TokenId, p);
            }
        }
        best
    }

    pub fn confidence(&self, index: usize) -> f32 {
        self.argmax(index).1
    }

    /// Largest elementwise relative difference, `|a - b| / max(|a|, |b|, floor)`.
    pub fn max_relative_diff(&self, other: &Logits, floor: f32) -> f32 {
        assert_eq!(self.probs.len(), other.probs.len());
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(0.0, f32::max)
    }

    /// Keeps only the listed positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Option<Logits> {
        let mut probs = Vec::with_capacity(positions.len() * self.vocab_size);
        for &p in positions {
            probs.extend_from_slice(self.row_for(p)?);
        }
        Some(Logits {
            positions: positions.to_vec(),
            vocab_size: self.vocab_size,
            probs,
            stats: self.stats,
        })
    }
}

/// Keys and values of one layer for every position of a sequence, row-major `[len, hidden]`.
pub(crate) struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Cached key/value pieces around an active window for one layer.
pub(crate) struct WindowKv<'a> {
    pub keys_before: &'a [f32],
    pub values_before: &'a [f32],
    pub keys_after: &'a [f32],
    pub values_after: &'a [f32],
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ToyDlm {
    /// Draws all weights from a ChaCha stream seeded by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let v = config.vocab.size;
        let proj_std = 1.0 / (d as f32).sqrt();
        let tok_emb = normal_vec(&mut rng, v * d, 1.0);
        let pos_emb = normal_vec(&mut rng, config.max_seq_len * d, 0.5);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: normal_vec(&mut rng, d * d, proj_std),
                wk: normal_vec(&mut rng, d * d, proj_std),
                wv: normal_vec(&mut rng, d * d, proj_std),
                wo: normal_vec(&mut rng, d * d, proj_std),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                w1: normal_vec(&mut rng, d * f, proj_std),
                b1: normal_vec(&mut rng, f, 0.02),
                w2: normal_vec(&mut rng, f * d, 1.0 / (f as f32).sqrt()),
                b2: normal_vec(&mut rng, d, 0.02),
            })
            .collect();
        let lm_head = normal_vec(&mut rng, d * v, config.logit_scale * proj_std);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            final_gamma: vec![1.0; d],
            final_beta: vec![0.0; d],
            lm_head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    /// FNV-1a over the bit patterns of every weight, in a fixed tensor order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, data) in self.tensors() {
            for &w in data {
                for b in w.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let c = &self.config;
        let (d, f, v) = (c.hidden_dim, c.ffn_dim(), c.vocab.size);
        let mut out: Vec<(String, Vec<usize>, &[f32])> = vec![
            ("tok_emb".into(), vec![v, d], &self.tok_emb),
            ("pos_emb".into(), vec![c.max_seq_len, d], &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.extend([
                (p("ln1_gamma"), vec![d], l.ln1_gamma.as_slice()),
                (p("ln1_beta"), vec![d], &l.ln1_beta),
                (p("wq"), vec![d, d], &l.wq),
                (p("wk"), vec![d, d], &l.wk),
                (p("wv"), vec![d, d], &l.wv),
                (p("wo"), vec![d, d], &l.wo),
                (p("ln2_gamma"), vec![d], &l.ln2_gamma),
                (p("ln2_beta"), vec![d], &l.ln2_beta),
                (p("w1"), vec![d, f], &l.w1),
                (p("b1"), vec![f], &l.b1),
                (p("w2"), vec![f, d], &l.w2),
                (p("b2"), vec![d], &l.b2),
            ]);
        }
        out.extend([
            ("final_gamma".into(), vec![d], self.final_gamma.as_slice()),
            ("final_beta".into(), vec![d], &self.final_beta),
            ("lm_head".into(), vec![d, v], &self.lm_head),
        ]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gamma,
                &mut l.ln1_beta,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([&mut self.final_gamma, &mut self.final_beta, &mut self.lm_head]);
        out
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Full bidirectional forward pass. Returns distributions for `positions` only.
    pub fn model_forward(&self, seq: &SequenceState, positions: &[usize]) -> Result<Logits> {
        self.check_len(seq.len())?;
        if let Some(&p) = positions.iter().find(|&&p| p >= seq.len()) {
            return Err(Error::PositionOutOfBounds {
                position: p,
                len: seq.len(),
            });
        }
        let (hidden, _, mut stats) = self.forward_hidden(seq.tokens(), false);
        let d = self.config.hidden_dim;
        let rows: Vec<f32> = positions
            .iter()
            .flat_map(|&p| hidden[p * d..(p + 1) * d].iter().copied())
            .collect();
        Ok(self.project(&rows, positions.to_vec(), &mut stats))
    }

    fn embed(&self, tokens: &[TokenId], first_position: usize) -> Vec<f32> {
        let d = self.config.hidden_dim;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &t) in tokens.iter().enumerate() {
            let te = &self.tok_emb[t as usize * d..(t as usize + 1) * d];
            let pos = first_position + i;
            let pe = &self.pos_emb[pos * d..(pos + 1) * d];
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        x
    }

    /// Runs every layer over all positions. When `keep_kv` is set the per-layer keys and
    /// values are returned as well. Output is the final-normed hidden state.
    pub(crate) fn forward_hidden(
        &self,
        tokens: &[TokenId],
        keep_kv: bool,
    ) -> (Vec<f32>, Vec<LayerKv>, ForwardStats) {
        let d = self.config.hidden_dim;
        let n = tokens.len();
        let mut stats = ForwardStats::default();
        let mut x = self.embed(tokens, 0);
        let mut kv = Vec::new();
        let mut scratch = Scratch::new(n, &self.config);
        for layer in &self.layers {
            let mut k = vec![0.0; n * d];
            let mut v = vec![0.0; n * d];
            scratch.qkv(layer, &x, &mut k, &mut v, &mut stats);
            let keys = RowView::single(&k, d);
            let values = RowView::single(&v, d);
            scratch.finish_layer(layer, &mut x, keys, values, self.config.heads, &mut stats);
            if keep_kv {
                kv.push(LayerKv { keys: k, values: v });
            }
        }
        let mut out = vec![0.0; n * d];
        kernels::layer_norm(&x, &self.final_gamma, &self.final_beta, &mut out);
        (out, kv, stats)
    }

    /// Runs every layer for the window rows `[start, start + tokens.len())` only, attending to
    /// cached keys/values outside the window and fresh ones inside it.
    pub(crate) fn forward_window(
        &self,
        window_tokens: &[TokenId],
        start: usize,
        cached: &[WindowKv<'_>],
    ) -> (Vec<f32>, ForwardStats) {
        let d = self.config.hidden_dim;
        let n = window_tokens.len();
        let mut stats = ForwardStats::default();
        let mut x = self.embed(window_tokens, start);
        let mut scratch = Scratch::new(n, &self.config);
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for (layer, c) in self.layers.iter().zip(cached) {
            scratch.qkv(layer, &x, &mut k, &mut v, &mut stats);
            let keys = RowView {
                pieces: [c.keys_before, &k, c.keys_after],
                width: d,
            };
            let values = RowView {
                pieces: [c.values_before, &v, c.values_after],
                width: d,
            };
            scratch.finish_layer(layer, &mut x, keys, values, self.config.heads, &mut stats);
        }
        let mut out = vec![0.0; n * d];
        kernels::layer_norm(&x, &self.final_gamma, &self.final_beta, &mut out);
        (out, stats)
    }

    /// Output head plus softmax for already-normed hidden rows.
    pub(crate) fn project(
        &self,
        hidden_rows: &[f32],
        positions: Vec<usize>,
        stats: &mut ForwardStats,
    ) -> Logits {
        let d = self.config.hidden_dim;
        let v = self.config.vocab.size;
        let mut probs = vec![0.0; positions.len() * v];
        kernels::matmul(hidden_rows, &self.lm_head, d, v, &mut probs);
        stats.linear_macs += (positions.len() * d * v) as u64;
        let mask = self.config.vocab.mask_id as usize;
        for row in probs.chunks_exact_mut(v) {
            row[mask] = f32::NEG_INFINITY;
            kernels::softmax(row);
        }
        Logits {
            positions,
            vocab_size: v,
            probs,
            stats: *stats,
        }
    }
}

/// Per-call buffers for one pass over `rows` positions.
struct Scratch {
    h: Vec<f32>,
    q: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    ffn: Vec<f32>,
    attn_scratch: kernels::AttnScratch,
    d: usize,
    f: usize,
}

impl Scratch {
    fn new(rows: usize, c: &ModelConfig) -> Self {
        let (d, f) = (c.hidden_dim, c.ffn_dim());
        Self {
            h: vec![0.0; rows * d],
            q: vec![0.0; rows * d],
            attn: vec![0.0; rows * d],
            proj: vec![0.0; rows * d],
            ffn: vec![0.0; rows * f],
            attn_scratch: kernels::AttnScratch::default(),
            d,
            f,
        }
    }

    fn qkv(&mut self, l: &LayerWeights, x: &[f32], k: &mut [f32], v: &mut [f32], stats: &mut ForwardStats) {
        let d = self.d;
        kernels::layer_norm(x, &l.ln1_gamma, &l.ln1_beta, &mut self.h);
        kernels::matmul(&self.h, &l.wq, d, d, &mut self.q);
        kernels::matmul(&self.h, &l.wk, d, d, k);
        kernels::matmul(&self.h, &l.wv, d, d, v);
        stats.linear_macs += (3 * x.len() * d) as u64;
    }

    fn finish_layer(
        &mut self,
        l: &LayerWeights,
        x: &mut [f32],
        keys: RowView<'_>,
        values: RowView<'_>,
        heads: usize,
        stats: &mut ForwardStats,
    ) {
        let (d, f) = (self.d, self.f);
        let rows = x.len() / d;
        stats.attn_score_macs += kernels::attention(&self.q, keys, values, heads, &mut self.attn, &mut self.attn_scratch);
        kernels::matmul(&self.attn, &l.wo, d, d, &mut self.proj);
        kernels::add_in_place(x, &self.proj);
        kernels::layer_norm(x, &l.ln2_gamma, &l.ln2_beta, &mut self.h);
        kernels::matmul(&self.h, &l.w1, d, f, &mut self.ffn);
        kernels::add_bias(&mut self.ffn, &l.b1);
        kernels::gelu(&mut self.ffn);
        kernels::matmul(&self.ffn, &l.w2, f, d, &mut self.proj);
        kernels::add_bias(&mut self.proj, &l.b2);
        kernels::add_in_place(x, &self.proj);
        stats.linear_macs += (rows * (d * d + 2 * d * f)) as u64;
    }
}
