//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust twin returning `Result<String, String>` with a JSON
//! payload, so the logic is testable natively; the `#[wasm_bindgen]` wrappers only convert
//! the error into a JS exception.

use dipdlm_core::decoder::DecodeConfig;
use dipdlm_core::dip::{decode_dip, DipParams};
use dipdlm_core::embed::HashEmbedder;
use dipdlm_core::model::{ModelConfig, ToyDlm};
use dipdlm_core::policy::{insert_prob, time_penalty, PolicyMode};
use dipdlm_core::pool::{Example, ExamplePool, SyntheticPool};
use dipdlm_core::ranking::mmr_rank;
use dipdlm_core::trace::TraceEvent;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Ranks one example per non-empty line of `examples` against `query`. A line may carry an
/// answer after `=>`; only the question part is embedded.
pub fn rank_examples(query: &str, examples: &str, lambda: f64) -> Result<String, String> {
    let embedder = HashEmbedder::default();
    let pool = examples
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (q, a) = line.split_once("=>").unwrap_or((line, ""));
            Ok(Example {
                id: format!("e{}", i + 1),
                question: q.trim().to_string(),
                answer: a.trim().to_string(),
                embedding: Some(embedder.embed(q).map_err(|e| format!("line {}: {e}", i + 1))?),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    if pool.is_empty() {
        return Err("no examples given".into());
    }
    let pool = ExamplePool::new(pool).map_err(err)?;
    let qv = embedder.embed(query).map_err(err)?;
    let ranked = mmr_rank(&qv, &pool, lambda).map_err(err)?;
    let order: Vec<_> = ranked
        .indices
        .iter()
        .zip(&ranked.scores)
        .map(|(&i, &score)| {
            let e = &pool.examples()[i];
            json!({ "id": e.id, "question": e.question, "score": score })
        })
        .collect();
    Ok(json!({ "lambda": lambda, "order": order }).to_string())
}

/// Insert probability times the progress penalty over a `resolution x total_blocks` grid:
/// rows sweep the block mean confidence from 0 to 1, columns the block index 1..=N.
pub fn policy_surface(mu_bar: f64, epsilon: f64, total_blocks: usize, resolution: usize) -> Result<String, String> {
    if !(2..=256).contains(&resolution) {
        return Err("resolution must be in 2..=256".into());
    }
    let mus: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let blocks: Vec<usize> = (1..=total_blocks).collect();
    let values = mus
        .iter()
        .map(|&mu| {
            blocks
                .iter()
                .map(|&n| Ok(insert_prob(mu, mu_bar)? * time_penalty(n, total_blocks, epsilon)?))
                .collect::<dipdlm_core::Result<Vec<f64>>>()
        })
        .collect::<dipdlm_core::Result<Vec<_>>>()
        .map_err(err)?;
    Ok(json!({ "mu": mus, "blocks": blocks, "mu_bar": mu_bar, "epsilon": epsilon, "values": values }).to_string())
}

/// Runs DIP on a small seeded model with a five-example synthetic pool.
pub fn decode_trace(query: &str, epsilon: f64, lambda: f64, seed: u64, gen_len: usize, block_size: usize) -> Result<String, String> {
    let model = ToyDlm::new(ModelConfig {
        layers: 2,
        hidden_dim: 64,
        heads: 4,
        max_seq_len: 1024,
        seed,
        ..ModelConfig::default()
    })
    .map_err(err)?;
    let embedder = HashEmbedder::default();
    let mut pool = SyntheticPool::new(64, seed).map_err(err)?.examples(5);
    pool.fill_missing_embeddings(&embedder).map_err(err)?;
    let qv = embedder.embed(query).map_err(err)?;
    let ranked = mmr_rank(&qv, &pool, lambda).map_err(err)?;
    let cfg = DecodeConfig::new(gen_len, block_size).map_err(err)?;
    let params = DipParams {
        epsilon,
        lambda,
        seed,
        mode: PolicyMode::Bernoulli,
    };
    let out = decode_dip(&model, &pool, &ranked, query, &cfg, &params).map_err(err)?;
    let per_step: Vec<_> = out
        .steps
        .iter()
        .map(|s| json!({ "block": s.block, "step": s.step, "revealed": s.unmasked.len() }))
        .collect();
    let policy: Vec<_> = out
        .trace
        .iter()
        .filter(|e| matches!(e, TraceEvent::Policy { .. }))
        .collect();
    Ok(json!({
        "text": model.vocab().decode(out.generated_tokens()),
        "k_per_block": out.k_per_block,
        "insert_blocks": out.insert_blocks,
        "refreshes": out.refreshes,
        "steps": per_step,
        "policy": policy,
    })
    .to_string())
}

#[wasm_bindgen(js_name = rankExamples)]
pub fn rank_examples_js(query: &str, examples: &str, lambda: f64) -> Result<String, JsError> {
    rank_examples(query, examples, lambda).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = policySurface)]
pub fn policy_surface_js(mu_bar: f64, epsilon: f64, total_blocks: usize, resolution: usize) -> Result<String, JsError> {
    policy_surface(mu_bar, epsilon, total_blocks, resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = decodeTrace)]
pub fn decode_trace_js(query: &str, epsilon: f64, lambda: f64, seed: u32, gen_len: usize, block_size: usize) -> Result<String, JsError> {
    decode_trace(query, epsilon, lambda, u64::from(seed), gen_len, block_size).map_err(|e| JsError::new(&e))
}
