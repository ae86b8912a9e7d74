//! Maximal Marginal Relevance ranking of an example pool against a query embedding.
//!
//! Greedy: at each step pick the unselected example maximizing
//! `lambda * sim(query, e) - (1 - lambda) * max_{s in selected} sim(e, s)`, with the
//! redundancy term taken as zero while nothing is selected. Ties go to the lowest pool index.

use serde::{Deserialize, Serialize};

use crate::embed::cosine_sim;
use crate::error::{check_unit_interval, Error, Result};
use crate::pool::{Example, ExamplePool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExamples {
    pub ids: Vec<String>,
    /// Pool indices in rank order.
    pub indices: Vec<usize>,
    pub lambda: f64,
    /// MMR score of each pick at the step it was made.
    pub scores: Vec<f64>,
}

impl RankedExamples {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Pool order, used when no ranking is requested.
    pub fn identity(pool: &ExamplePool) -> Self {
        Self {
            ids: pool.examples().iter().map(|e| e.id.clone()).collect(),
            indices: (0..pool.len()).collect(),
            lambda: 1.0,
            scores: vec![0.0; pool.len()],
        }
    }

    /// Examples in rank order.
    pub fn examples<'a>(&self, pool: &'a ExamplePool) -> Vec<&'a Example> {
        self.indices.iter().map(|&i| &pool.examples()[i]).collect()
    }
}

fn embeddings<'a>(pool: &'a ExamplePool, dim: usize) -> Result<Vec<&'a [f32]>> {
    pool.examples()
        .iter()
        .map(|e| {
            let v = e
                .embedding
                .as_deref()
                .ok_or_else(|| Error::MissingEmbedding(e.id.clone()))?;
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            Ok(v)
        })
        .collect()
}

pub fn mmr_rank(query: &[f32], pool: &ExamplePool, lambda: f64) -> Result<RankedExamples> {
    check_unit_interval("lambda", lambda)?;
    let embs = embeddings(pool, query.len())?;
    let k = embs.len();
    let relevance: Vec<f64> = embs
        .iter()
        .map(|e| cosine_sim(query, e))
        .collect::<Result<_>>()?;
    // Running max similarity of each candidate to the selected set.
    let mut redundancy: Vec<Option<f64>> = vec![None; k];
    let mut selected = vec![false; k];
    let mut ranked = RankedExamples {
        ids: Vec::with_capacity(k),
        indices: Vec::with_capacity(k),
        lambda,
        scores: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..k).filter(|&i| !selected[i]) {
            let score = lambda * relevance[i] - (1.0 - lambda) * redundancy[i].unwrap_or(0.0);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((i, score));
            }
        }
        let (pick, score) = best.expect("an unselected candidate remains");
        selected[pick] = true;
        ranked.indices.push(pick);
        ranked.ids.push(pool.examples()[pick].id.clone());
        ranked.scores.push(score);
        for i in (0..k).filter(|&i| !selected[i]) {
            let s = cosine_sim(embs[i], embs[pick])?;
            redundancy[i] = Some(redundancy[i].map_or(s, |r| r.max(s)));
        }
    }
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(vectors: &[&[f32]]) -> ExamplePool {
        ExamplePool::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| Example {
                    id: format!("e{}", i + 1),
                    question: String::new(),
                    answer: String::new(),
                    embedding: Some(v.to_vec()),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn duplicate_is_pushed_behind_diverse_example() {
        // Step 2 scores by hand: e2 = 0.4*1 - 0.6*1 = -0.2, e3 = 0.4*0.6 - 0.6*0.6 = -0.12.
        let p = pool(&[&[1.0, 0.0], &[1.0, 0.0], &[0.6, 0.8]]);
        let r = mmr_rank(&[1.0, 0.0], &p, 0.4).unwrap();
        assert_eq!(r.ids, vec!["e1", "e3", "e2"]);
        assert!((r.scores[0] - 0.4).abs() < 1e-9);
        assert!((r.scores[1] - -0.12).abs() < 1e-7);
        assert!((r.scores[2] - -0.2).abs() < 1e-7);
    }

    #[test]
    fn lambda_one_sorts_by_similarity() {
        let p = pool(&[&[0.0, 1.0], &[0.8, 0.6], &[1.0, 0.0]]);
        let r = mmr_rank(&[1.0, 0.0], &p, 1.0).unwrap();
        assert_eq!(r.ids, vec!["e3", "e2", "e1"]);
    }

    #[test]
    fn single_example_is_first_for_any_lambda() {
        let p = pool(&[&[0.0, 1.0]]);
        for lambda in [0.0, 0.5, 1.0] {
            assert_eq!(mmr_rank(&[1.0, 0.0], &p, lambda).unwrap().ids, vec!["e1"]);
        }
    }

    #[test]
    fn errors() {
        let p = pool(&[&[0.0, 1.0]]);
        assert!(mmr_rank(&[1.0, 0.0], &p, 1.5).is_err());
        assert!(matches!(
            mmr_rank(&[1.0, 0.0, 0.0], &p, 0.5),
            Err(Error::DimensionMismatch { .. })
        ));
        let missing = ExamplePool::new(vec![Example {
            id: "x".into(),
            question: "q".into(),
            answer: "a".into(),
            embedding: None,
        }])
        .unwrap();
        assert!(matches!(
            mmr_rank(&[1.0], &missing, 0.5),
            Err(Error::MissingEmbedding(_))
        ));
    }
}
