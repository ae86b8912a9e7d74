//! Throughput harness: shot-count sweeps and method comparisons written as CSV.
//!
//! Throughput is generated tokens per second of decode wall time. Timing covers the decode
//! loop only, including every refresh and any prompt growth inside it; ranking and initial
//! prompt construction happen outside the timed region. Runs are strictly sequential.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_baseline, decode_fastdllm, DecodeConfig};
use crate::dip::{build_prompt, decode_dip, DipParams};
use crate::error::{Error, Result};
use crate::model::ToyDlm;
use crate::policy::PolicyMode;
use crate::pool::ExamplePool;
use crate::ranking::{mmr_rank, RankedExamples};
use crate::timing::Stopwatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Fastdllm,
    Dip,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "fastdllm" | "fast-dllm" => Ok(Method::Fastdllm),
            "dip" => Ok(Method::Dip),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Fastdllm => "fastdllm",
            Method::Dip => "dip",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Skipped,
}

/// One CSV row. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    /// Static shot count, or pool size K for DIP.
    pub shots: usize,
    pub lambda: f64,
    pub epsilon: Option<f64>,
    pub tau: f32,
    pub block_size: usize,
    pub gen_len: usize,
    pub seed: u64,
    pub tokens_generated: usize,
    pub wall_ms: f64,
    pub tokens_per_sec: f64,
    pub final_example_count: f64,
    pub refresh_count: usize,
    /// Always empty: there is no trained model to score.
    pub accuracy_proxy: Option<f64>,
    pub status: RowStatus,
}

/// What one decode produced, for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub tokens_generated: usize,
    pub final_example_count: usize,
    pub refresh_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub summary: RunSummary,
    /// Wall time of every timed repeat, in milliseconds.
    pub samples_ms: Vec<f64>,
}

impl Measurement {
    pub fn median_ms(&self) -> f64 {
        median(&self.samples_ms)
    }

    pub fn tokens_per_sec(&self) -> f64 {
        tokens_per_sec(self.summary.tokens_generated, self.median_ms())
    }
}

pub fn tokens_per_sec(tokens: usize, wall_ms: f64) -> f64 {
    if wall_ms <= 0.0 {
        return f64::INFINITY;
    }
    tokens as f64 / (wall_ms / 1000.0)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Times `run` `repeats` times after an optional untimed warm-up. Every repeat must produce
/// the same summary.
pub fn measure_throughput<F>(warmup: bool, repeats: usize, mut run: F) -> Result<Measurement>
where
    F: FnMut() -> Result<RunSummary>,
{
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    if warmup {
        run()?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    let mut summary: Option<RunSummary> = None;
    for _ in 0..repeats {
        let sw = Stopwatch::start();
        let s = run()?;
        samples_ms.push(sw.elapsed().as_secs_f64() * 1000.0);
        if summary.is_some_and(|prev| prev != s) {
            return Err(Error::Invariant("repeated runs produced different results".into()));
        }
        summary = Some(s);
    }
    Ok(Measurement {
        summary: summary.expect("at least one repeat"),
        samples_ms,
    })
}

/// Spearman rank correlation with average ranks for ties. `None` for fewer than two points
/// or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub repeats: usize,
    pub warmup: bool,
    /// Base seed; recorded in rows and used for per-query policy seeds.
    pub seed: u64,
    /// MMR trade-off used to order examples for every method.
    pub lambda: f64,
    /// Shots for the static-prompt methods; `None` means the whole pool.
    pub static_shots: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: true,
            seed: 0,
            lambda: 0.1,
            static_shots: None,
        }
    }
}

/// A test query with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodSpec {
    Baseline,
    Fastdllm,
    Dip { epsilon: f64, lambda: f64 },
}

impl MethodSpec {
    pub fn method(&self) -> Method {
        match self {
            MethodSpec::Baseline => Method::Baseline,
            MethodSpec::Fastdllm => Method::Fastdllm,
            MethodSpec::Dip { .. } => Method::Dip,
        }
    }
}

/// The ablation grid: lambda swept at epsilon = 0.2, then epsilon swept at lambda = 0.1.
pub fn ablation_grid() -> Vec<MethodSpec> {
    let steps = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut out: Vec<MethodSpec> = steps
        .iter()
        .map(|&lambda| MethodSpec::Dip { epsilon: 0.2, lambda })
        .collect();
    out.extend(steps.iter().map(|&epsilon| MethodSpec::Dip { epsilon, lambda: 0.1 }));
    out
}

fn row(cfg: &DecodeConfig, method: Method, shots: usize, lambda: f64, epsilon: Option<f64>, seed: u64) -> BenchRow {
    BenchRow {
        method,
        shots,
        lambda,
        epsilon,
        tau: cfg.threshold,
        block_size: cfg.block_size,
        gen_len: cfg.gen_len,
        seed,
        tokens_generated: 0,
        wall_ms: 0.0,
        tokens_per_sec: 0.0,
        final_example_count: 0.0,
        refresh_count: 0,
        accuracy_proxy: None,
        status: RowStatus::Ok,
    }
}

/// Times one method on one query. The ranking and initial prompt are prepared before the
/// clock starts.
pub fn measure_method(
    model: &ToyDlm,
    pool: &ExamplePool,
    query: &QuerySpec,
    cfg: &DecodeConfig,
    spec: MethodSpec,
    opts: &BenchOptions,
    policy_seed: u64,
    warmup: bool,
) -> Result<Measurement> {
    let lambda = match spec {
        MethodSpec::Dip { lambda, .. } => lambda,
        _ => opts.lambda,
    };
    let ranked = mmr_rank(&query.embedding, pool, lambda)?;
    let examples = ranked.examples(pool);
    match spec {
        MethodSpec::Baseline | MethodSpec::Fastdllm => {
            let shots = opts.static_shots.unwrap_or(pool.len());
            let prompt = build_prompt(model.vocab(), &examples, shots, &query.text, cfg.gen_len, model.config().max_seq_len)?;
            let decode = if spec == MethodSpec::Baseline {
                decode_baseline
            } else {
                decode_fastdllm
            };
            measure_throughput(warmup, opts.repeats, || {
                let out = decode(model, &prompt, cfg)?;
                Ok(RunSummary {
                    tokens_generated: out.generated_tokens().len(),
                    final_example_count: out.seq.example_count(),
                    refresh_count: out.refreshes,
                })
            })
        }
        MethodSpec::Dip { epsilon, lambda } => {
            let params = DipParams {
                epsilon,
                lambda,
                seed: policy_seed,
                mode: PolicyMode::Bernoulli,
            };
            measure_throughput(warmup, opts.repeats, || {
                let out = decode_dip(model, pool, &ranked, &query.text, cfg, &params)?;
                Ok(RunSummary {
                    tokens_generated: out.generated_tokens().len(),
                    final_example_count: out.final_k,
                    refresh_count: out.refreshes,
                })
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<BenchRow>,
    /// Spearman correlation between shots and throughput over the completed rows.
    pub spearman: Option<f64>,
}

/// Fast-dLLM throughput with static prompts of each shot count. Shot counts that overflow the
/// model's context (or exceed the pool) are reported as skipped rows.
pub fn sweep_shots(
    model: &ToyDlm,
    pool: &ExamplePool,
    query: &QuerySpec,
    cfg: &DecodeConfig,
    shots: &[usize],
    opts: &BenchOptions,
) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(shots.len());
    for &k in shots {
        let mut r = row(cfg, Method::Fastdllm, k, opts.lambda, None, opts.seed);
        let local = BenchOptions {
            static_shots: Some(k),
            ..opts.clone()
        };
        match measure_method(model, pool, query, cfg, MethodSpec::Fastdllm, &local, opts.seed, opts.warmup) {
            Ok(m) => fill(&mut r, &m.summary, m.median_ms()),
            Err(Error::SequenceOverflow { .. }) | Err(Error::OutOfRange { name: "k", .. }) => {
                r.status = RowStatus::Skipped;
            }
            Err(e) => return Err(e),
        }
        rows.push(r);
    }
    let done: Vec<&BenchRow> = rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
    let xs: Vec<f64> = done.iter().map(|r| r.shots as f64).collect();
    let ys: Vec<f64> = done.iter().map(|r| r.tokens_per_sec).collect();
    Ok(SweepReport {
        spearman: spearman(&xs, &ys),
        rows,
    })
}

fn fill(r: &mut BenchRow, s: &RunSummary, wall_ms: f64) {
    r.tokens_generated = s.tokens_generated;
    r.wall_ms = wall_ms;
    r.tokens_per_sec = tokens_per_sec(s.tokens_generated, wall_ms);
    r.final_example_count = s.final_example_count as f64;
    r.refresh_count = s.refresh_count;
}

/// One aggregated row per method over all queries. Methods are interleaved query by query
/// so slow drift in machine speed affects them equally. `wall_ms` is the mean over queries
/// of each query's median, and `tokens_per_sec` is derived from it. The first query of each
/// method gets the warm-up run (if enabled).
pub fn compare_methods(
    model: &ToyDlm,
    pool: &ExamplePool,
    queries: &[QuerySpec],
    cfg: &DecodeConfig,
    methods: &[MethodSpec],
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>> {
    if queries.is_empty() {
        return Err(Error::InvalidConfig("no queries to benchmark".into()));
    }
    let per_query = compare_methods_per_query(model, pool, queries, cfg, methods, opts)?;
    let mut rows = Vec::with_capacity(methods.len());
    for (mi, spec) in methods.iter().enumerate() {
        let ms: Vec<&Measurement> = per_query.iter().map(|q| &q[mi]).collect();
        let n = ms.len() as f64;
        let wall_ms = ms.iter().map(|m| m.median_ms()).sum::<f64>() / n;
        let (shots, lambda, epsilon) = match *spec {
            MethodSpec::Dip { epsilon, lambda } => (pool.len(), lambda, Some(epsilon)),
            _ => (opts.static_shots.unwrap_or(pool.len()), opts.lambda, None),
        };
        let mut r = row(cfg, spec.method(), shots, lambda, epsilon, opts.seed);
        r.tokens_generated = ms[0].summary.tokens_generated;
        r.wall_ms = wall_ms;
        r.tokens_per_sec = tokens_per_sec(r.tokens_generated, wall_ms);
        r.final_example_count = ms.iter().map(|m| m.summary.final_example_count as f64).sum::<f64>() / n;
        r.refresh_count = ms[0].summary.refresh_count;
        if ms.iter().any(|m| m.summary.refresh_count != r.refresh_count) {
            return Err(Error::Invariant("refresh count varies across queries".into()));
        }
        rows.push(r);
    }
    Ok(rows)
}

/// Raw measurements, indexed `[query][method]`. Query `i` uses policy seed `opts.seed + i`.
pub fn compare_methods_per_query(
    model: &ToyDlm,
    pool: &ExamplePool,
    queries: &[QuerySpec],
    cfg: &DecodeConfig,
    methods: &[MethodSpec],
    opts: &BenchOptions,
) -> Result<Vec<Vec<Measurement>>> {
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            methods
                .iter()
                .map(|&spec| {
                    measure_method(model, pool, q, cfg, spec, opts, opts.seed + qi as u64, opts.warmup && qi == 0)
                })
                .collect()
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Ranks `pool` for `query` once, for callers that drive decoders directly.
pub fn rank_for(query: &QuerySpec, pool: &ExamplePool, lambda: f64) -> Result<RankedExamples> {
    mmr_rank(&query.embedding, pool, lambda)
}
