//! `dipdlm`: decode, rank and benchmark with the toy masked diffusion model.
//!
//! Exit codes: 0 success, 2 usage/config/input error, 3 internal invariant violation.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dipdlm_core::bench::{
    ablation_grid, compare_methods, sweep_shots, write_csv, BenchOptions, BenchRow, Method, MethodSpec, QuerySpec,
};
use dipdlm_core::decoder::{decode_baseline, decode_fastdllm, DecodeConfig};
use dipdlm_core::dip::{build_prompt, decode_dip, DipParams};
use dipdlm_core::embed::HashEmbedder;
use dipdlm_core::model::{ModelConfig, ToyDlm};
use dipdlm_core::policy::PolicyMode;
use dipdlm_core::pool::{load_embeddings, load_pool, ExamplePool, SyntheticPool};
use dipdlm_core::ranking::mmr_rank;
use dipdlm_core::trace::write_jsonl;

/// Id of an entry in the embeddings file that supplies the query vector.
const QUERY_EMBEDDING_ID: &str = "@query";

#[derive(Parser, Debug)]
#[command(name = "dipdlm", version, about = "Masked diffusion LM decoding with dynamic in-context example insertion")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for model weights, synthetic data and policy draws.
    #[arg(long, env = "DIPDLM_SEED", default_value_t = 0, global = true)]
    seed: u64,

    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    pool: PoolArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Transformer layers.
    #[arg(long, default_value_t = 4, global = true)]
    layers: usize,
    /// Hidden width.
    #[arg(long, default_value_t = 128, global = true)]
    dim: usize,
    /// Attention heads (must divide --dim).
    #[arg(long, default_value_t = 4, global = true)]
    heads: usize,
    /// Longest sequence the model accepts.
    #[arg(long, default_value_t = 1024, global = true)]
    max_seq_len: usize,
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// JSONL pool, one {"id", "question", "answer", "embedding"?} object per line. A seeded
    /// synthetic pool is used when absent.
    #[arg(long, global = true)]
    examples_file: Option<PathBuf>,
    /// JSONL {"id", "vector"} lines overriding pool embeddings. The id "@query" sets the query
    /// vector.
    #[arg(long, global = true)]
    embeddings_file: Option<PathBuf>,
    /// Embed examples that have no vector with the built-in hashing embedder.
    #[arg(long, global = true)]
    hash_embed: bool,
    /// Examples in the synthetic pool.
    #[arg(long, default_value_t = 5, global = true)]
    pool_size: usize,
    /// Rendered byte length of each synthetic example.
    #[arg(long, default_value_t = 64, global = true)]
    example_len: usize,
}

#[derive(Args, Debug, Clone)]
struct DecodeArgs {
    /// Tokens to generate.
    #[arg(long, default_value_t = 256)]
    gen_len: usize,
    /// Block size; must divide --gen-len.
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Step budget per block (defaults to the block size).
    #[arg(long)]
    steps: Option<usize>,
    /// Confidence threshold for parallel unmasking.
    #[arg(long, default_value_t = 0.9)]
    tau: f32,
    /// MMR relevance/diversity trade-off.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Weight of the generation-progress penalty.
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
}

impl DecodeArgs {
    fn config(&self) -> Result<DecodeConfig> {
        let mut cfg = DecodeConfig::new(self.gen_len, self.block_size)?.with_threshold(self.tau)?;
        if let Some(t) = self.steps {
            cfg = cfg.with_steps(t)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a completion and print it.
    Decode {
        #[arg(long, default_value = "dip", value_parser = parse_method)]
        method: Method,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Examples in the prompt for baseline/fastdllm (default: whole pool).
        #[arg(long)]
        shots: Option<usize>,
        /// Query text (default: a synthetic query).
        #[arg(long)]
        query: Option<String>,
        /// Insertion policy for dip.
        #[arg(long, default_value = "bernoulli", value_parser = parse_mode)]
        policy: PolicyMode,
        /// Write the decode trace as JSONL.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Print the MMR order of the pool for a query.
    Rank {
        #[arg(long)]
        query: Option<String>,
        /// MMR relevance/diversity trade-off.
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
    },
    /// Measure throughput and write CSV rows.
    Bench {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Shot-count sweep with fastdllm, e.g. `shots=1,2,4,8`.
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<ShotList>,
        /// Methods to compare, e.g. `baseline,fastdllm,dip`.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        compare: Vec<Method>,
        /// Also run dip over the lambda/epsilon ablation grid.
        #[arg(long)]
        grid: bool,
        /// Examples in the prompt for baseline/fastdllm (default: whole pool).
        #[arg(long)]
        shots: Option<usize>,
        /// Single query text; otherwise --queries synthetic queries are used.
        #[arg(long)]
        query: Option<String>,
        /// Synthetic queries to average over.
        #[arg(long, default_value_t = 5)]
        queries: usize,
        /// Timed repeats per measurement (the median is reported).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Output CSV path (stdout when absent).
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: dipdlm_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<PolicyMode, String> {
    match s {
        "bernoulli" => Ok(PolicyMode::Bernoulli),
        "force-insert" => Ok(PolicyMode::ForceInsert),
        "force-keep" => Ok(PolicyMode::ForceKeep),
        _ => Err(format!("unknown policy `{s}` (bernoulli, force-insert, force-keep)")),
    }
}

/// Parsed `shots=...` list.
#[derive(Debug, Clone)]
struct ShotList(Vec<usize>);

fn parse_sweep(s: &str) -> std::result::Result<ShotList, String> {
    let values = s
        .strip_prefix("shots=")
        .ok_or_else(|| format!("expected `shots=1,2,...`, got `{s}`"))?;
    let shots = values
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad shot count `{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shots.is_empty() || shots.contains(&0) {
        return Err("shot counts must be positive".into());
    }
    Ok(ShotList(shots))
}

struct Inputs {
    model: ToyDlm,
    pool: ExamplePool,
    embedder: HashEmbedder,
    query_vector: Option<Vec<f32>>,
    synthetic: SyntheticPool,
}

impl Inputs {
    fn load(cli: &Cli, min_synthetic: usize) -> Result<Self> {
        let model = ToyDlm::new(ModelConfig {
            layers: cli.model.layers,
            hidden_dim: cli.model.dim,
            heads: cli.model.heads,
            max_seq_len: cli.model.max_seq_len,
            seed: cli.seed,
            ..ModelConfig::default()
        })?;
        let p = &cli.pool;
        let synthetic = SyntheticPool::new(p.example_len, cli.seed)?;
        let mut pool = match &p.examples_file {
            Some(path) => load_pool(path)?,
            None => synthetic.examples(p.pool_size.max(min_synthetic)),
        };
        let mut query_vector = None;
        if let Some(path) = &p.embeddings_file {
            let mut overrides = load_embeddings(path)?;
            query_vector = overrides.remove(QUERY_EMBEDDING_ID);
            pool.apply_overrides(overrides)?;
        }
        let embedder = HashEmbedder::new(pool.embedding_dim().unwrap_or(HashEmbedder::default().dim()))?;
        let missing: Vec<String> = pool.missing_embeddings().iter().map(|s| s.to_string()).collect();
        if !missing.is_empty() {
            if p.hash_embed || p.examples_file.is_none() {
                pool.fill_missing_embeddings(&embedder)?;
            } else {
                return Err(anyhow::Error::new(dipdlm_core::Error::MissingEmbedding(missing[0].clone()))
                    .context(format!("{} example(s) have no embedding; pass --hash-embed or --embeddings-file", missing.len())));
            }
        }
        Ok(Self {
            model,
            pool,
            embedder,
            query_vector,
            synthetic,
        })
    }

    fn query(&self, text: String) -> Result<QuerySpec> {
        let embedding = match &self.query_vector {
            Some(v) => v.clone(),
            None => self.embedder.embed(&text)?,
        };
        Ok(QuerySpec { text, embedding })
    }
}

fn create_output(path: &PathBuf) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Decode {
            method,
            decode,
            shots,
            query,
            policy,
            trace_out,
        } => {
            let mut trace_file = trace_out.as_ref().map(create_output).transpose()?;
            let cfg = decode.config()?;
            let inputs = Inputs::load(&cli, 0)?;
            let text = query.clone().unwrap_or_else(|| inputs.synthetic.query(0));
            let q = inputs.query(text)?;
            let ranked = mmr_rank(&q.embedding, &inputs.pool, decode.lambda)?;
            let vocab = *inputs.model.vocab();
            let max_len = inputs.model.config().max_seq_len;
            let started = Instant::now();
            let (tokens, trace, summary) = match method {
                Method::Baseline | Method::Fastdllm => {
                    let k = shots.unwrap_or(inputs.pool.len());
                    let prompt = build_prompt(&vocab, &ranked.examples(&inputs.pool), k, &q.text, cfg.gen_len, max_len)?;
                    let out = if *method == Method::Baseline {
                        decode_baseline(&inputs.model, &prompt, &cfg)?
                    } else {
                        decode_fastdllm(&inputs.model, &prompt, &cfg)?
                    };
                    let summary = format!(
                        "steps={} refreshes={} examples={}",
                        out.total_steps(),
                        out.refreshes,
                        out.seq.example_count()
                    );
                    (out.generated_tokens().to_vec(), out.trace, summary)
                }
                Method::Dip => {
                    let params = DipParams {
                        epsilon: decode.epsilon,
                        lambda: decode.lambda,
                        seed: cli.seed,
                        mode: *policy,
                    };
                    let out = decode_dip(&inputs.model, &inputs.pool, &ranked, &q.text, &cfg, &params)?;
                    let summary = format!(
                        "steps={} refreshes={} final_k={} inserted_before_blocks={:?}",
                        out.steps.len(),
                        out.refreshes,
                        out.final_k,
                        out.insert_blocks
                    );
                    (out.generated_tokens().to_vec(), out.trace, summary)
                }
            };
            let secs = started.elapsed().as_secs_f64();
            if tokens.contains(&vocab.mask_id) {
                return Err(dipdlm_core::Error::Invariant("masks remain after decoding".into()).into());
            }
            println!("{}", vocab.decode(&tokens));
            eprintln!(
                "method={method} {summary} tokens={} wall_ms={:.1} tokens_per_sec={:.1}",
                tokens.len(),
                secs * 1000.0,
                tokens.len() as f64 / secs.max(1e-9)
            );
            if let Some(f) = trace_file.as_mut() {
                write_jsonl(&trace, &mut *f)?;
                f.flush()?;
            }
        }
        Command::Rank { query, lambda } => {
            let inputs = Inputs::load(&cli, 0)?;
            let text = query.clone().unwrap_or_else(|| inputs.synthetic.query(0));
            let q = inputs.query(text)?;
            let ranked = mmr_rank(&q.embedding, &inputs.pool, *lambda)?;
            let mut out = io::stdout().lock();
            writeln!(out, "rank\tid\tmmr_score")?;
            for (i, (id, score)) in ranked.ids.iter().zip(&ranked.scores).enumerate() {
                writeln!(out, "{}\t{id}\t{score:.6}", i + 1)?;
            }
        }
        Command::Bench {
            decode,
            sweep,
            compare,
            grid,
            shots,
            query,
            queries,
            repeats,
            out_csv,
        } => {
            // Fail on an unwritable destination before spending time on measurements.
            let csv_file = out_csv.as_ref().map(create_output).transpose()?;
            if sweep.is_none() && compare.is_empty() && !grid {
                bail!(dipdlm_core::Error::InvalidConfig("bench needs --sweep, --compare or --grid".into()));
            }
            let cfg = decode.config()?;
            let max_shots = sweep.as_ref().and_then(|s| s.0.iter().copied().max()).unwrap_or(0);
            let inputs = Inputs::load(&cli, max_shots)?;
            let texts: Vec<String> = match query {
                Some(t) => vec![t.clone()],
                None => (0..*queries as u64).map(|i| inputs.synthetic.query(i)).collect(),
            };
            let specs = texts.into_iter().map(|t| inputs.query(t)).collect::<Result<Vec<_>>>()?;
            let opts = BenchOptions {
                repeats: *repeats,
                warmup: true,
                seed: cli.seed,
                lambda: decode.lambda,
                static_shots: *shots,
            };
            let mut rows: Vec<BenchRow> = Vec::new();
            if let Some(shot_list) = sweep {
                let report = sweep_shots(&inputs.model, &inputs.pool, &specs[0], &cfg, &shot_list.0, &opts)?;
                match report.spearman {
                    Some(rho) => eprintln!("spearman(shots, tokens_per_sec) = {rho:.3}"),
                    None => eprintln!("spearman(shots, tokens_per_sec) = n/a"),
                }
                rows.extend(report.rows);
            }
            let mut methods: Vec<MethodSpec> = compare
                .iter()
                .map(|m| match m {
                    Method::Baseline => MethodSpec::Baseline,
                    Method::Fastdllm => MethodSpec::Fastdllm,
                    Method::Dip => MethodSpec::Dip {
                        epsilon: decode.epsilon,
                        lambda: decode.lambda,
                    },
                })
                .collect();
            if *grid {
                methods.extend(ablation_grid());
            }
            if !methods.is_empty() {
                rows.extend(compare_methods(&inputs.model, &inputs.pool, &specs, &cfg, &methods, &opts)?);
            }
            print_table(&rows);
            match csv_file {
                Some(mut f) => {
                    write_csv(&rows, &mut f)?;
                    f.flush()?;
                }
                None => write_csv(&rows, io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn print_table(rows: &[BenchRow]) {
    eprintln!("{:<9} {:>5} {:>6} {:>7} {:>10} {:>12} {:>8} {:>8}", "method", "shots", "lambda", "epsilon", "wall_ms", "tokens/s", "final_k", "status");
    for r in rows {
        let eps = r.epsilon.map_or("-".to_string(), |e| format!("{e:.2}"));
        eprintln!(
            "{:<9} {:>5} {:>6.2} {:>7} {:>10.1} {:>12.1} {:>8.2} {:>8?}",
            r.method.to_string(),
            r.shots,
            r.lambda,
            eps,
            r.wall_ms,
            r.tokens_per_sec,
            r.final_example_count,
            r.status
        );
    }
}

/// 3 for internal invariant breaches, 2 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<dipdlm_core::Error>())
        .map_or(2, |e| if e.is_user_error() { 2 } else { 3 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
