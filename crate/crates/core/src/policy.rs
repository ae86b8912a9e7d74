//! Example-insertion policy.
//!
//! At each block boundary after the first, the policy compares the mean confidence of the
//! block just finished (`mu`) against the running mean over everything generated so far
//! (`mu_bar`):
//!
//! ```text
//! P(insert) = clamp((1 - mu) / (2 (1 - mu_bar)), 0, 1)
//! G(n, N, eps) = (1 - eps) + eps * n / N
//! insert ~ Bernoulli(P(insert) * G)
//! ```
//!
//! A block less confident than the history pushes toward inserting another example; `G`
//! damps early insertions so that extra context, when it comes, arrives late.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};
use crate::trace::{Action, StepRecord};

/// Generation-process penalty `G(n, N, eps)`.
pub fn time_penalty(n: usize, total: usize, epsilon: f64) -> Result<f64> {
    check_unit_interval("epsilon", epsilon)?;
    if total == 0 {
        return Err(Error::InvalidConfig("total blocks must be positive".into()));
    }
    if n > total {
        return Err(Error::OutOfRange {
            name: "n",
            value: n as f64,
            lo: 0.0,
            hi: total as f64,
        });
    }
    Ok((1.0 - epsilon) + epsilon * (n as f64 / total as f64))
}

/// Unclamped ratio `(1 - mu) / (2 (1 - mu_bar))`. Infinite when `mu_bar == 1` and `mu < 1`.
pub fn insert_prob_raw(mu: f64, mu_bar: f64) -> f64 {
    (1.0 - mu) / (2.0 * (1.0 - mu_bar))
}

/// Insertion probability clamped to `[0, 1]`. A history of perfect confidence
/// (`mu_bar == 1`) maps to 0 if the current block is also perfect, else 1.
pub fn insert_prob(mu: f64, mu_bar: f64) -> Result<f64> {
    check_unit_interval("mu", mu)?;
    check_unit_interval("mu_bar", mu_bar)?;
    if mu_bar == 1.0 {
        return Ok(if mu == 1.0 { 0.0 } else { 1.0 });
    }
    Ok(insert_prob_raw(mu, mu_bar).clamp(0.0, 1.0))
}

/// Draws insert with probability `clamp(p_insert * penalty, 0, 1)`. Consumes one draw.
pub fn sample_action<R: Rng + ?Sized>(p_insert: f64, penalty: f64, rng: &mut R) -> Action {
    let p = (p_insert * penalty).clamp(0.0, 1.0);
    if rng.random::<f64>() < p {
        Action::Insert
    } else {
        Action::Keep
    }
}

/// Confidence means over revealed tokens, using each token's confidence at the step it was
/// revealed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConfidenceStats {
    block_sum: f64,
    block_count: usize,
    total_sum: f64,
    total_count: usize,
}

impl ConfidenceStats {
    /// Stats after one more block: `mu` covers only `block`, `mu_bar` everything so far.
    pub fn update(&self, block: &[StepRecord]) -> Self {
        let confs = block.iter().flat_map(|r| r.unmasked.iter().map(|u| f64::from(u.confidence)));
        let (sum, count) = confs.fold((0.0, 0), |(s, c), x| (s + x, c + 1));
        Self {
            block_sum: sum,
            block_count: count,
            total_sum: self.total_sum + sum,
            total_count: self.total_count + count,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.block_count > 0
    }

    pub fn mu(&self) -> Result<f64> {
        if self.block_count == 0 {
            return Err(Error::StatsNotReady);
        }
        Ok((self.block_sum / self.block_count as f64).clamp(0.0, 1.0))
    }

    pub fn mu_bar(&self) -> Result<f64> {
        if self.total_count == 0 {
            return Err(Error::StatsNotReady);
        }
        Ok((self.total_sum / self.total_count as f64).clamp(0.0, 1.0))
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn total_count(&self) -> usize {
        self.total_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyMode {
    /// Sample from the Bernoulli policy.
    #[default]
    Bernoulli,
    /// Always insert while examples remain.
    ForceInsert,
    /// Never insert.
    ForceKeep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub mu: Option<f64>,
    pub mu_bar: Option<f64>,
    pub p_insert: Option<f64>,
    pub penalty: Option<f64>,
    pub note: Option<String>,
}

/// Session-local policy state.
#[derive(Debug, Clone)]
pub struct PolicyState {
    total_blocks: usize,
    epsilon: f64,
    lambda: f64,
    k: usize,
    pool_size: usize,
    mode: PolicyMode,
    rng: ChaCha8Rng,
}

impl PolicyState {
    /// Starts with one example in context, as the prompt is initialized with the top-ranked
    /// example.
    pub fn new(total_blocks: usize, epsilon: f64, lambda: f64, pool_size: usize, seed: u64) -> Result<Self> {
        check_unit_interval("epsilon", epsilon)?;
        check_unit_interval("lambda", lambda)?;
        if total_blocks == 0 {
            return Err(Error::InvalidConfig("total blocks must be positive".into()));
        }
        if pool_size == 0 {
            return Err(Error::InvalidConfig("example pool is empty".into()));
        }
        Ok(Self {
            total_blocks,
            epsilon,
            lambda,
            k: 1,
            pool_size,
            mode: PolicyMode::Bernoulli,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_mode(mut self, mode: PolicyMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    /// Decision at the boundary before 1-based block `n` (`n >= 2`). At most one example is
    /// inserted per call; `k` only changes through [`PolicyState::record_insert`].
    pub fn decide(&mut self, n: usize, stats: &ConfidenceStats) -> Result<Decision> {
        if n < 2 || n > self.total_blocks {
            return Err(Error::OutOfRange {
                name: "n",
                value: n as f64,
                lo: 2.0,
                hi: self.total_blocks as f64,
            });
        }
        if self.k >= self.pool_size {
            return Ok(Decision {
                action: Action::Keep,
                mu: None,
                mu_bar: None,
                p_insert: None,
                penalty: None,
                note: Some("pool exhausted".into()),
            });
        }
        let mu = stats.mu()?;
        let mu_bar = stats.mu_bar()?;
        let p_insert = insert_prob(mu, mu_bar)?;
        let penalty = time_penalty(n, self.total_blocks, self.epsilon)?;
        let (action, note) = match self.mode {
            PolicyMode::Bernoulli => (sample_action(p_insert, penalty, &mut self.rng), None),
            PolicyMode::ForceInsert => (Action::Insert, Some("forced insert".into())),
            PolicyMode::ForceKeep => (Action::Keep, Some("forced keep".into())),
        };
        Ok(Decision {
            action,
            mu: Some(mu),
            mu_bar: Some(mu_bar),
            p_insert: Some(p_insert),
            penalty: Some(penalty),
            note,
        })
    }

    pub fn record_insert(&mut self) -> Result<()> {
        if self.k >= self.pool_size {
            return Err(Error::Invariant("insert past the end of the pool".into()));
        }
        self.k += 1;
        Ok(())
    }
}
