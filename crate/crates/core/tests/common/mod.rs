//! Workloads, oracles and criterion checks shared by the integration test binaries.
//!
//! Each `check_*` function returns `Ok(detail)` or `Err(detail)` so the acceptance target can
//! print one line per criterion and the topic test files can assert on the same logic.

#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use dipdlm_core::bench::{compare_methods, sweep_shots, BenchOptions, MethodSpec, QuerySpec, RowStatus};
use dipdlm_core::decoder::{decode_baseline, decode_fastdllm, decode_fastdllm_observed, DecodeConfig, DecodeObserver};
use dipdlm_core::dip::{build_prompt, decode_dip, decode_dip_observed, DipOutput, DipParams};
use dipdlm_core::embed::HashEmbedder;
use dipdlm_core::masking::forward_mask;
use dipdlm_core::model::{Logits, ModelConfig, ToyDlm};
use dipdlm_core::policy::{insert_prob, insert_prob_raw, sample_action, time_penalty, ConfidenceStats, PolicyMode};
use dipdlm_core::pool::{Example, ExamplePool, SyntheticPool};
use dipdlm_core::ranking::mmr_rank;
use dipdlm_core::sequence::SequenceState;
use dipdlm_core::tokenizer::{TokenId, Vocab};
use dipdlm_core::trace::{Action, StepRecord, TraceEvent, UnmaskedToken};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

static TIMING: Mutex<()> = Mutex::new(());

/// Serializes everything that measures wall time within one test binary.
pub fn timing_guard() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn default_model() -> ToyDlm {
    ToyDlm::new(ModelConfig::default()).expect("default config is valid")
}

/// A small random architecture for property tests.
pub fn small_model(rng: &mut ChaCha8Rng) -> ToyDlm {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let dim = heads * [8, 12, 16][rng.random_range(0..3)];
    ToyDlm::new(ModelConfig {
        layers: rng.random_range(1..=3),
        hidden_dim: dim,
        heads,
        max_seq_len: 512,
        seed: rng.random(),
        ..ModelConfig::default()
    })
    .expect("valid small config")
}

pub struct Workload {
    pub pool: ExamplePool,
    pub queries: Vec<QuerySpec>,
}

/// `k` fixed-length examples and `n_queries` queries, all hash-embedded.
pub fn synthetic_workload(k: usize, example_len: usize, n_queries: usize, seed: u64) -> Workload {
    let gen = SyntheticPool::new(example_len, seed).expect("valid example length");
    let embedder = HashEmbedder::default();
    let mut pool = gen.examples(k);
    pool.fill_missing_embeddings(&embedder).expect("synthetic text embeds");
    let queries = (0..n_queries as u64)
        .map(|i| {
            let text = gen.query(i);
            QuerySpec {
                embedding: embedder.embed(&text).expect("synthetic text embeds"),
                text,
            }
        })
        .collect();
    Workload { pool, queries }
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

// ---------------------------------------------------------------------------------------
// Throughput criteria

pub fn check_shot_sweep() -> Check {
    let _g = timing_guard();
    let started = Instant::now();
    let model = default_model();
    let w = synthetic_workload(8, 64, 1, 0);
    let cfg = DecodeConfig::new(256, 32).map_err(|e| e.to_string())?;
    let opts = BenchOptions::default();
    let report = sweep_shots(&model, &w.pool, &w.queries[0], &cfg, &[1, 2, 4, 8], &opts).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed().as_secs_f64();
    let tps: Vec<f64> = report.rows.iter().map(|r| r.tokens_per_sec).collect();
    let detail = format!(
        "tokens/s over shots 1,2,4,8 = {:.1?}, rho = {:?}, {:.1}s",
        tps, report.spearman, elapsed
    );
    ensure(report.rows.iter().all(|r| r.status == RowStatus::Ok), || format!("skipped rows; {detail}"))?;
    ensure(tps.windows(2).all(|p| p[1] < p[0]), || format!("not strictly decreasing; {detail}"))?;
    ensure(report.spearman.is_some_and(|r| r <= -0.9), || format!("rho above -0.9; {detail}"))?;
    ensure(elapsed < 120.0, || format!("took over two minutes; {detail}"))?;
    Ok(detail)
}

pub fn check_speedup_ordering(n_queries: usize) -> Check {
    let _g = timing_guard();
    let model = default_model();
    let w = synthetic_workload(5, 64, n_queries, 1);
    let cfg = DecodeConfig::new(256, 32).map_err(|e| e.to_string())?;
    let opts = BenchOptions {
        repeats: 1,
        ..BenchOptions::default()
    };
    let methods = [
        MethodSpec::Baseline,
        MethodSpec::Fastdllm,
        MethodSpec::Dip {
            epsilon: 1.0,
            lambda: 0.1,
        },
    ];
    let rows = compare_methods(&model, &w.pool, &w.queries, &cfg, &methods, &opts).map_err(|e| e.to_string())?;
    let (b, f, d) = (rows[0].tokens_per_sec, rows[1].tokens_per_sec, rows[2].tokens_per_sec);
    let detail = format!(
        "{n_queries} queries, tokens/s baseline {b:.1} < fastdllm {f:.1} <= dip(eps=1) {d:.1} (mean final k {:.2})",
        rows[2].final_example_count
    );
    ensure(b < f && f <= d, || format!("ordering violated; {detail}"))?;
    Ok(detail)
}

pub fn check_epsilon_trend(n_seeds: usize) -> Check {
    let _g = timing_guard();
    let model = default_model();
    let w = synthetic_workload(5, 64, n_seeds, 2);
    let cfg = DecodeConfig::new(256, 32).map_err(|e| e.to_string())?;
    let opts = BenchOptions {
        repeats: 3,
        ..BenchOptions::default()
    };
    let methods: Vec<MethodSpec> = [0.0, 0.5, 1.0]
        .iter()
        .map(|&epsilon| MethodSpec::Dip { epsilon, lambda: 0.1 })
        .collect();
    let rows = compare_methods(&model, &w.pool, &w.queries, &cfg, &methods, &opts).map_err(|e| e.to_string())?;
    let tps: Vec<f64> = rows.iter().map(|r| r.tokens_per_sec).collect();
    let ks: Vec<f64> = rows.iter().map(|r| r.final_example_count).collect();
    let detail = format!("{n_seeds} seeds, tokens/s at eps 0, 0.5, 1 = {tps:.1?}, mean final k = {ks:.2?}");
    ensure(tps.windows(2).all(|p| p[0] <= p[1]), || format!("throughput decreased with eps; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------------------
// Refresh-point equivalence

/// Compares each block's first cached-step logits against an uncached forward pass.
#[derive(Default)]
pub struct EquivalenceObserver {
    pub blocks: Vec<usize>,
    pub worst: f32,
    pub error: Option<String>,
}

impl DecodeObserver for EquivalenceObserver {
    fn on_first_cached_step(&mut self, model: &ToyDlm, seq: &SequenceState, block: usize, logits: &Logits) {
        self.blocks.push(block);
        match model.model_forward(seq, logits.positions()) {
            Ok(full) => {
                let d = logits.max_relative_diff(&full, f32::MIN_POSITIVE);
                self.worst = self.worst.max(d);
            }
            Err(e) => self.error = Some(e.to_string()),
        }
    }
}

pub fn check_refresh_equivalence(configs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    let mut blocks_checked = 0;
    for c in 0..configs {
        let model = small_model(&mut rng);
        let vocab = *model.vocab();
        let block = [4, 8, 16][rng.random_range(0..3)];
        let n_blocks = rng.random_range(1..=4);
        let tau = [0.3, 0.6, 0.9, 1.0][rng.random_range(0..4)];
        let cfg = DecodeConfig::new(block * n_blocks, block)
            .and_then(|c| c.with_threshold(tau))
            .map_err(|e| e.to_string())?;

        let prompt_len = rng.random_range(4..60);
        let prompt: Vec<TokenId> = (0..prompt_len).map(|_| rng.random_range(0..256)).collect();
        let seq = SequenceState::prompt_with_masks(&vocab, prompt, cfg.gen_len).map_err(|e| e.to_string())?;
        let mut obs = EquivalenceObserver::default();
        decode_fastdllm_observed(&model, &seq, &cfg, &mut obs).map_err(|e| format!("config {c}: {e}"))?;
        if let Some(e) = obs.error {
            return Err(format!("config {c}: {e}"));
        }
        ensure(obs.blocks == (1..=n_blocks).collect::<Vec<_>>(), || {
            format!("config {c}: fastdllm observed blocks {:?}", obs.blocks)
        })?;
        worst = worst.max(obs.worst);
        blocks_checked += obs.blocks.len();

        let examples: Vec<Example> = (0..3)
            .map(|i| Example {
                id: format!("x{i}"),
                question: random_text(&mut rng, 12),
                answer: random_text(&mut rng, 6),
                embedding: Some((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect();
        let pool = ExamplePool::new(examples).map_err(|e| e.to_string())?;
        let query: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ranked = mmr_rank(&query, &pool, 0.5).map_err(|e| e.to_string())?;
        let params = DipParams {
            seed: rng.random(),
            mode: if c % 2 == 0 {
                PolicyMode::ForceInsert
            } else {
                PolicyMode::Bernoulli
            },
            epsilon: 0.0,
            ..DipParams::default()
        };
        let mut obs = EquivalenceObserver::default();
        decode_dip_observed(&model, &pool, &ranked, "what?", &cfg, &params, &mut obs).map_err(|e| format!("config {c}: {e}"))?;
        if let Some(e) = obs.error {
            return Err(format!("config {c}: {e}"));
        }
        ensure(obs.blocks.len() == n_blocks, || format!("config {c}: dip observed blocks {:?}", obs.blocks))?;
        worst = worst.max(obs.worst);
        blocks_checked += obs.blocks.len();
    }
    let detail = format!("{configs} configs, {blocks_checked} blocks, worst relative diff {worst:e}");
    ensure(worst <= 1e-5, || format!("tolerance exceeded; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------------------
// Policy

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

pub fn check_policy_suite() -> Check {
    let g = |n, total, eps| time_penalty(n, total, eps).map_err(|e| e.to_string());
    ensure(close(g(0, 10, 0.2)?, 0.8), || "G(0, 10, 0.2) != 0.8".into())?;
    ensure(close(g(5, 10, 1.0)?, 0.5), || "G(5, 10, 1) != 0.5".into())?;
    for eps in [0.0, 0.2, 0.5, 1.0] {
        for total in [1, 4, 8] {
            ensure(close(g(total, total, eps)?, 1.0), || format!("G(N, N, {eps}) != 1"))?;
        }
    }
    for n in 0..=8 {
        ensure(g(n, 8, 0.0)? == 1.0, || format!("eps = 0 but G({n}, 8) != 1"))?;
    }
    let p = |mu, mu_bar| insert_prob(mu, mu_bar).map_err(|e| e.to_string());
    ensure(close(p(0.8, 0.8)?, 0.5), || "P(0.8, 0.8) != 0.5".into())?;
    ensure(p(0.6, 0.8)? == 1.0, || "P(0.6, 0.8) != 1".into())?;
    ensure((insert_prob_raw(0.2, 0.8) - 2.0).abs() < 1e-12, || "raw P(0.2, 0.8) != 2".into())?;
    ensure(p(0.2, 0.8)? == 1.0, || "P(0.2, 0.8) not clamped to 1".into())?;
    ensure(p(1.0, 1.0)? == 0.0 && p(0.5, 1.0)? == 1.0, || "mu_bar = 1 guard".into())?;

    let record = |block, confs: &[f32]| StepRecord {
        block,
        step: 1,
        unmasked: confs
            .iter()
            .enumerate()
            .map(|(i, &confidence)| UnmaskedToken {
                offset: i,
                token: 0,
                confidence,
            })
            .collect(),
        forced: false,
        micros: 0,
    };
    let s1 = ConfidenceStats::default().update(&[record(1, &[0.9, 0.7])]);
    let (mu, mu_bar) = (s1.mu().map_err(|e| e.to_string())?, s1.mu_bar().map_err(|e| e.to_string())?);
    ensure((mu - 0.8).abs() < 1e-6 && (mu_bar - 0.8).abs() < 1e-6, || format!("one block: mu {mu}, mu_bar {mu_bar}"))?;
    let s2 = s1.update(&[record(2, &[0.5, 0.5])]);
    let (mu, mu_bar) = (s2.mu().map_err(|e| e.to_string())?, s2.mu_bar().map_err(|e| e.to_string())?);
    ensure((mu - 0.5).abs() < 1e-6 && (mu_bar - 0.65).abs() < 1e-6, || format!("two blocks: mu {mu}, mu_bar {mu_bar}"))?;
    ensure(ConfidenceStats::default().mu().is_err(), || "empty stats must not be ready".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    ensure((0..1000).all(|_| sample_action(0.0, 1.0, &mut rng) == Action::Keep), || "p = 0 inserted".into())?;
    ensure((0..1000).all(|_| sample_action(1.0, 1.0, &mut rng) == Action::Insert), || "p = 1 kept".into())?;
    let draws = 10_000;
    let inserts = (0..draws).filter(|_| sample_action(0.6, 0.5, &mut rng) == Action::Insert).count();
    let freq = inserts as f64 / draws as f64;
    let detail = format!("hand values exact, insert frequency at p*G = 0.3 is {freq:.4} over {draws} draws");
    ensure((freq - 0.3).abs() <= 0.015, || format!("frequency outside 0.3 +/- 0.015; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------------------------------
// MMR

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum();
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical vectors must score exactly 1
    // so mathematically tied candidates stay tied.
    dot / (na * nb).sqrt()
}

/// Greedy selection that recomputes every candidate's full score from scratch at each step.
pub fn mmr_oracle(query: &[f32], embeddings: &[Vec<f32>], lambda: f64) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::new();
    while selected.len() < embeddings.len() {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in embeddings.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let redundancy = selected
                .iter()
                .map(|&s| oracle_cosine(e, &embeddings[s]))
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                .unwrap_or(0.0);
            let score = lambda * oracle_cosine(query, e) - (1.0 - lambda) * redundancy;
            match best {
                Some((_, b)) if score <= b => {}
                _ => best = Some((i, score)),
            }
        }
        selected.push(best.expect("candidate left").0);
    }
    selected
}

pub fn check_mmr_oracle(pools: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comparisons = 0;
    for p in 0..pools {
        let k = rng.random_range(1..=6);
        let dim = rng.random_range(2..=8);
        let mut embs: Vec<Vec<f32>> = Vec::with_capacity(k);
        for i in 0..k {
            // Occasional exact duplicates exercise the tie rule.
            if i > 0 && rng.random_bool(0.15) {
                let j = rng.random_range(0..i);
                embs.push(embs[j].clone());
            } else {
                embs.push((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            }
        }
        let query: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let examples = embs
            .iter()
            .enumerate()
            .map(|(i, e)| Example {
                id: format!("p{p}-{i}"),
                question: "q".into(),
                answer: "a".into(),
                embedding: Some(e.clone()),
            })
            .collect();
        let pool = match ExamplePool::new(examples) {
            Ok(pool) => pool,
            // A zero vector cannot be normalized; redraw-free skip is fine for a random pool.
            Err(e) => return Err(format!("pool {p}: {e}")),
        };
        let normalized: Vec<Vec<f32>> = pool.examples().iter().map(|e| e.embedding.clone().unwrap()).collect();
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let got = mmr_rank(&query, &pool, lambda).map_err(|e| e.to_string())?;
            let want = mmr_oracle(&query, &normalized, lambda);
            ensure(got.indices == want, || format!("pool {p}, lambda {lambda}: got {:?}, oracle {want:?}", got.indices))?;
            comparisons += 1;
        }
    }
    Ok(format!("{pools} pools, {comparisons} rankings equal to the oracle"))
}

// ---------------------------------------------------------------------------------------
// DIP

pub fn check_dip_degeneracy(runs: u64) -> Check {
    let cfg = DecodeConfig::new(64, 16).map_err(|e| e.to_string())?;
    for seed in 0..runs {
        let model = ToyDlm::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let w = synthetic_workload(4, 48, 1, seed);
        let q = &w.queries[0];
        let ranked = mmr_rank(&q.embedding, &w.pool, 0.1).map_err(|e| e.to_string())?;
        let params = DipParams {
            seed,
            mode: PolicyMode::ForceKeep,
            ..DipParams::default()
        };
        let dip = decode_dip(&model, &w.pool, &ranked, &q.text, &cfg, &params).map_err(|e| e.to_string())?;
        let prompt = build_prompt(model.vocab(), &ranked.examples(&w.pool), 1, &q.text, cfg.gen_len, 1024)
            .map_err(|e| e.to_string())?;
        let fast = decode_fastdllm(&model, &prompt, &cfg).map_err(|e| e.to_string())?;
        ensure(dip.seq.tokens() == fast.seq.tokens(), || format!("seed {seed}: outputs differ"))?;
        ensure(dip.final_k == 1, || format!("seed {seed}: forced keep ended with k = {}", dip.final_k))?;
    }
    Ok(format!("{runs} seeded runs identical to the 1-shot Fast-dLLM output"))
}

/// Records the generation region at the start of every block.
#[derive(Default)]
pub struct GenerationSnapshots {
    pub at_block_start: Vec<(usize, Vec<TokenId>)>,
}

impl DecodeObserver for GenerationSnapshots {
    fn on_first_cached_step(&mut self, _model: &ToyDlm, seq: &SequenceState, block: usize, _logits: &Logits) {
        self.at_block_start.push((block, seq.generated_tokens().to_vec()));
    }
}

fn refresh_events(trace: &[TraceEvent]) -> usize {
    trace.iter().filter(|e| matches!(e, TraceEvent::Refresh { .. })).count()
}

fn no_masks(vocab: &Vocab, tokens: &[TokenId]) -> bool {
    !tokens.contains(&vocab.mask_id)
}

/// Every token revealed before a block starts is still present, unchanged, at that block's
/// start, whatever happened to the prompt in between.
fn check_preserved(out: &DipOutput, snaps: &GenerationSnapshots, mask: TokenId) -> Result<(), String> {
    let gen_len = out.generated_tokens().len();
    let mut expected = vec![mask; gen_len];
    for (block, tokens) in &snaps.at_block_start {
        ensure(tokens == &expected, || format!("generation changed before block {block}"))?;
        for r in out.steps.iter().filter(|r| r.block == *block) {
            for u in &r.unmasked {
                expected[u.offset] = u.token;
            }
        }
    }
    ensure(expected == out.generated_tokens(), || "final output differs from revealed tokens".into())
}

pub fn check_structural_invariants(runs: u64) -> Check {
    let mut insert_events = 0;
    let mut decodes = 0;
    let w = synthetic_workload(4, 40, runs as usize, 7);
    for seed in 0..runs {
        let model = ToyDlm::new(ModelConfig {
            seed: 100 + seed,
            ..ModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let vocab = *model.vocab();
        let block = [8, 16][seed as usize % 2];
        let n_blocks = 2 + seed as usize % 4;
        let cfg = DecodeConfig::new(block * n_blocks, block).map_err(|e| e.to_string())?;
        let q = &w.queries[seed as usize];
        let ranked = mmr_rank(&q.embedding, &w.pool, 0.3).map_err(|e| e.to_string())?;
        let modes = [PolicyMode::Bernoulli, PolicyMode::ForceInsert, PolicyMode::ForceKeep];
        for (mi, mode) in modes.into_iter().enumerate() {
            let params = DipParams {
                epsilon: [0.0, 0.5, 1.0][(seed as usize + mi) % 3],
                seed,
                mode,
                ..DipParams::default()
            };
            let mut snaps = GenerationSnapshots::default();
            let out = decode_dip_observed(&model, &w.pool, &ranked, &q.text, &cfg, &params, &mut snaps)
                .map_err(|e| format!("seed {seed} {mode:?}: {e}"))?;
            let ctx = || format!("seed {seed} {mode:?}");
            ensure(no_masks(&vocab, out.generated_tokens()), || format!("{}: masks remain", ctx()))?;
            ensure(out.k_per_block.windows(2).all(|p| p[0] <= p[1]), || format!("{}: k decreased {:?}", ctx(), out.k_per_block))?;
            ensure(out.k_per_block.iter().all(|&k| (1..=w.pool.len()).contains(&k)), || format!("{}: k out of range", ctx()))?;
            ensure(out.final_k == *out.k_per_block.last().unwrap(), || format!("{}: final k mismatch", ctx()))?;
            ensure(out.refreshes == n_blocks && refresh_events(&out.trace) == n_blocks, || {
                format!("{}: {} refreshes for {n_blocks} blocks", ctx(), out.refreshes)
            })?;
            check_preserved(&out, &snaps, vocab.mask_id).map_err(|e| format!("{}: {e}", ctx()))?;
            out.seq.check_invariants().map_err(|e| format!("{}: {e}", ctx()))?;
            insert_events += out.insert_blocks.len();
            decodes += 1;
        }
        let prompt = build_prompt(&vocab, &ranked.examples(&w.pool), w.pool.len(), &q.text, cfg.gen_len, 1024)
            .map_err(|e| e.to_string())?;
        for (name, out) in [
            ("fastdllm", decode_fastdllm(&model, &prompt, &cfg)),
            ("baseline", decode_baseline(&model, &prompt, &cfg)),
        ] {
            let out = out.map_err(|e| format!("seed {seed} {name}: {e}"))?;
            ensure(no_masks(&vocab, out.generated_tokens()), || format!("seed {seed} {name}: masks remain"))?;
            ensure(out.refreshes == n_blocks, || format!("seed {seed} {name}: {} refreshes", out.refreshes))?;
            ensure(out.seq.len() == prompt.len(), || format!("seed {seed} {name}: length changed"))?;
            decodes += 1;
        }
    }
    ensure(insert_events > 0, || "no prompt growth happened, preservation untested".into())?;
    Ok(format!("{decodes} decodes, {insert_events} prompt-growth events checked"))
}

// ---------------------------------------------------------------------------------------
// Forward process

pub fn check_forward_process() -> Check {
    let vocab = Vocab::byte_level();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..256)).collect();
    let y0 = SequenceState::prompt_with_masks(&vocab, tokens, 0).map_err(|e| e.to_string())?;
    let same = forward_mask(&y0, 0.0, &mut rng).map_err(|e| e.to_string())?;
    ensure(same.tokens() == y0.tokens(), || "t = 0 changed tokens".into())?;
    let all = forward_mask(&y0, 1.0, &mut rng).map_err(|e| e.to_string())?;
    ensure(all.tokens().iter().all(|&t| t == vocab.mask_id), || "t = 1 left tokens unmasked".into())?;
    let mut fractions = Vec::new();
    for t in [0.25, 0.5, 0.75] {
        let yt = forward_mask(&y0, t, &mut rng).map_err(|e| e.to_string())?;
        let frac = yt.tokens().iter().filter(|&&x| x == vocab.mask_id).count() as f64 / n as f64;
        let bound = 3.0 * (t * (1.0 - t) / n as f64).sqrt();
        ensure((frac - t).abs() <= bound, || format!("t = {t}: fraction {frac} outside +/- {bound:.4}"))?;
        ensure(
            yt.tokens().iter().zip(y0.tokens()).all(|(&a, &b)| a == b || a == vocab.mask_id),
            || format!("t = {t}: a token changed to something other than the mask"),
        )?;
        fractions.push(frac);
    }
    Ok(format!("identity at 0, all-mask at 1, masked fractions {fractions:?} within 3 sigma"))
}
