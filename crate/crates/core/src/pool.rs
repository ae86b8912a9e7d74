//! In-context example pools: JSONL ingestion, embedding overrides, and a seeded synthetic
//! generator with fixed rendered lengths.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{normalize, HashEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

/// Renders one example exactly as it appears in a prompt.
pub fn render_example(question: &str, answer: &str) -> String {
    format!("Q: {question}\nA: {answer}\n\n")
}

/// Renders the test query that follows the examples.
pub fn render_query(query: &str) -> String {
    format!("Q: {query}\nA:")
}

/// Bytes added around the question and answer by [`render_example`].
pub const EXAMPLE_TEMPLATE_OVERHEAD: usize = 9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExamplePool {
    examples: Vec<Example>,
}

impl ExamplePool {
    /// Validates unique ids and consistent embedding dims; present embeddings are
    /// L2-normalized.
    pub fn new(mut examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut dim = None;
        for e in &mut examples {
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if let Some(v) = e.embedding.as_mut() {
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: v.len(),
                        })
                    }
                    _ => {}
                }
                normalize(v)?;
            }
        }
        Ok(Self { examples })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    /// Pool size K.
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.examples
            .iter()
            .find_map(|e| e.embedding.as_ref().map(Vec::len))
    }

    pub fn missing_embeddings(&self) -> Vec<&str> {
        self.examples
            .iter()
            .filter(|e| e.embedding.is_none())
            .map(|e| e.id.as_str())
            .collect()
    }

    /// Embeds the question of every example that has no embedding yet. Answers are never
    /// embedded.
    pub fn fill_missing_embeddings(&mut self, embedder: &HashEmbedder) -> Result<()> {
        if let Some(d) = self.embedding_dim() {
            if d != embedder.dim() {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: embedder.dim(),
                });
            }
        }
        for e in &mut self.examples {
            if e.embedding.is_none() {
                e.embedding = Some(embedder.embed(&e.question)?);
            }
        }
        Ok(())
    }

    /// Replaces embeddings by id. Every override must name a pool example.
    pub fn apply_overrides(&mut self, overrides: HashMap<String, Vec<f32>>) -> Result<()> {
        for (id, mut v) in overrides {
            let e = self
                .examples
                .iter_mut()
                .find(|e| e.id == id)
                .ok_or_else(|| Error::InvalidConfig(format!("embedding for unknown example `{id}`")))?;
            normalize(&mut v)?;
            e.embedding = Some(v);
        }
        // Re-run the dim check across the merged set.
        *self = Self::new(std::mem::take(&mut self.examples))?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct EmbeddingLine {
    id: String,
    vector: Vec<f32>,
}

fn parse_jsonl<T, R>(reader: R, path: &Path) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn parse_pool<R: BufRead>(reader: R, path: &Path) -> Result<ExamplePool> {
    ExamplePool::new(parse_jsonl(reader, path)?)
}

pub fn load_pool(path: &Path) -> Result<ExamplePool> {
    let f = std::fs::File::open(path)?;
    parse_pool(std::io::BufReader::new(f), path)
}

pub fn parse_embeddings<R: BufRead>(reader: R, path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let lines: Vec<EmbeddingLine> = parse_jsonl(reader, path)?;
    let mut out = HashMap::new();
    for l in lines {
        if out.insert(l.id.clone(), l.vector).is_some() {
            return Err(Error::DuplicateId(l.id));
        }
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<HashMap<String, Vec<f32>>> {
    let f = std::fs::File::open(path)?;
    parse_embeddings(std::io::BufReader::new(f), PathBuf::from(path).as_path())
}

const WORDS: &[&str] = &[
    "apples", "baskets", "cost", "each", "total", "how", "many", "she", "he", "sold", "bought",
    "dollars", "per", "week", "left", "has", "more", "than", "twice", "half", "pens", "books",
    "train", "miles", "hours", "cookies", "friends", "shares", "equally", "remaining", "price",
    "saves", "spends", "garden", "rows", "plants", "tickets", "boxes", "marbles", "pages",
];

/// Seeded generator for pools whose rendered examples all have the same byte length.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub example_len: usize,
    pub query_len: usize,
    pub seed: u64,
}

impl Default for SyntheticPool {
    fn default() -> Self {
        Self {
            example_len: 64,
            query_len: 40,
            seed: 0,
        }
    }
}

fn filler(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        if rng.random_bool(0.25) {
            s.push_str(&rng.random_range(2..100u32).to_string());
        } else {
            s.push_str(WORDS.choose(rng).expect("nonempty word list"));
        }
    }
    s.truncate(len);
    // A trailing space would render as a different word boundary; keep it a letter.
    if s.ends_with(' ') {
        s.pop();
        s.push('s');
    }
    s
}

impl SyntheticPool {
    pub fn new(example_len: usize, seed: u64) -> Result<Self> {
        if example_len < EXAMPLE_TEMPLATE_OVERHEAD + 2 {
            return Err(Error::InvalidConfig(format!(
                "example_len must be at least {}",
                EXAMPLE_TEMPLATE_OVERHEAD + 2
            )));
        }
        Ok(Self {
            example_len,
            seed,
            ..Self::default()
        })
    }

    fn split(&self) -> (usize, usize) {
        let body = self.example_len - EXAMPLE_TEMPLATE_OVERHEAD;
        let q = (body * 2 / 3).max(1);
        (q, body - q)
    }

    /// `k` examples with ids `ex-0 .. ex-{k-1}`, no embeddings.
    pub fn examples(&self, k: usize) -> ExamplePool {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (ql, al) = self.split();
        let examples = (0..k)
            .map(|i| Example {
                id: format!("ex-{i}"),
                question: filler(&mut rng, ql),
                answer: filler(&mut rng, al),
                embedding: None,
            })
            .collect();
        ExamplePool::new(examples).expect("generated ids are unique")
    }

    /// Test query number `index`, drawn from a stream independent of the examples.
    pub fn query(&self, index: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15 ^ index.wrapping_mul(0x1000_0000_01b3));
        filler(&mut rng, self.query_len)
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use super::*;

    #[test]
    fn synthetic_examples_render_to_fixed_length() {
        let gen = SyntheticPool::new(64, 3).unwrap();
        let pool = gen.examples(8);
        assert_eq!(pool.len(), 8);
        for e in pool.examples() {
            assert_eq!(render_example(&e.question, &e.answer).len(), 64);
        }
        assert_eq!(gen.query(0).len(), 40);
        assert_ne!(gen.query(0), gen.query(1));
        assert_eq!(gen.examples(8), pool);
    }

    #[test]
    fn parses_jsonl_with_optional_embeddings() {
        let text = r#"{"id":"a","question":"q1","answer":"a1","embedding":[3.0,4.0]}

{"id":"b","question":"q2","answer":"a2"}
"#;
        let pool = parse_pool(Cursor::new(text), Path::new("pool.jsonl")).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.examples()[0].embedding.as_deref(), Some(&[0.6f32, 0.8][..]));
        assert_eq!(pool.missing_embeddings(), vec!["b"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"a\"}\n{not json}\n";
        match parse_pool(Cursor::new(text), Path::new("p.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_mixed_dims_rejected() {
        let dup = r#"{"id":"a","question":"q","answer":"a"}
{"id":"a","question":"q","answer":"a"}"#;
        assert!(matches!(
            parse_pool(Cursor::new(dup), Path::new("p")),
            Err(Error::DuplicateId(_))
        ));
        let dims = r#"{"id":"a","question":"q","answer":"a","embedding":[1,0]}
{"id":"b","question":"q","answer":"a","embedding":[1,0,0]}"#;
        assert!(matches!(
            parse_pool(Cursor::new(dims), Path::new("p")),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn overrides_replace_inline_embeddings() {
        let text = r#"{"id":"a","question":"q","answer":"a","embedding":[1,0]}"#;
        let mut pool = parse_pool(Cursor::new(text), Path::new("p")).unwrap();
        let emb = parse_embeddings(Cursor::new(r#"{"id":"a","vector":[0,2]}"#), Path::new("e")).unwrap();
        pool.apply_overrides(emb).unwrap();
        assert_eq!(pool.examples()[0].embedding.as_deref(), Some(&[0.0f32, 1.0][..]));
        let unknown = parse_embeddings(Cursor::new(r#"{"id":"z","vector":[0,2]}"#), Path::new("e")).unwrap();
        assert!(pool.apply_overrides(unknown).is_err());
    }

    #[test]
    fn hash_fill_checks_dimension() {
        let mut pool = SyntheticPool::default().examples(3);
        pool.fill_missing_embeddings(&HashEmbedder::default()).unwrap();
        assert!(pool.missing_embeddings().is_empty());
        let text = r#"{"id":"a","question":"q","answer":"a","embedding":[1,0]}
{"id":"b","question":"q","answer":"a"}"#;
        let mut mixed = parse_pool(Cursor::new(text), Path::new("p")).unwrap();
        assert!(matches!(
            mixed.fill_missing_embeddings(&HashEmbedder::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
