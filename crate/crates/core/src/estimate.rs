//! Transition-matrix estimation over risk-level sequences.
//!
//! An order-`k` model conditions on the last `k` levels. Contexts are encoded
//! base 5 with the most recent level in the least-significant digit, so
//! `context % 5` is always the current level. Positions before the start of
//! a sequence are padded with its first level; every sequence of length `n`
//! therefore contributes exactly `n - 1` transitions at every order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::RiskLevel;
use crate::trace::{Category, Trace};

pub const LEVELS: usize = RiskLevel::COUNT;
pub const MAX_ORDER: usize = 6;
const ROW_TOLERANCE: f64 = 1e-9;
/// Log-likelihood assigned to an observed zero-probability transition.
pub const LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// Number of context rows for order `k`.
pub fn context_count(order: usize) -> usize {
    LEVELS.pow(order as u32)
}

pub fn encode_context(levels: &[RiskLevel]) -> usize {
    levels.iter().fold(0, |acc, l| acc * LEVELS + l.rank())
}

pub fn decode_context(mut index: usize, order: usize) -> Vec<RiskLevel> {
    let mut out = vec![RiskLevel::Safe; order];
    for slot in out.iter_mut().rev() {
        *slot = RiskLevel::from_rank(index % LEVELS).expect("digit < 5");
        index /= LEVELS;
    }
    out
}

/// Context that results from appending `next` to `context`.
#[inline]
pub fn shift_context(context: usize, next: RiskLevel, order: usize) -> usize {
    (context * LEVELS + next.rank()) % context_count(order)
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::InvalidOrder(order));
    }
    Ok(())
}

/// `(context, next)` pairs of a sequence, with first-level padding.
pub fn transitions(seq: &[RiskLevel], order: usize) -> impl Iterator<Item = (usize, RiskLevel)> + '_ {
    (1..seq.len()).map(move |t| {
        let ctx = (0..order).fold(0, |acc, j| {
            let pos = (t + j).saturating_sub(order);
            acc * LEVELS + seq[pos].rank()
        });
        (ctx, seq[t])
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub order: usize,
    pub counts: Vec<[u64; LEVELS]>,
    pub total: u64,
}

impl TransitionCounts {
    pub fn zeros(order: usize) -> Result<Self> {
        check_order(order)?;
        Ok(Self {
            order,
            counts: vec![[0; LEVELS]; context_count(order)],
            total: 0,
        })
    }

    pub fn row_total(&self, context: usize) -> u64 {
        self.counts[context].iter().sum()
    }

    pub fn add(&mut self, context: usize, next: RiskLevel, n: u64) {
        self.counts[context][next.rank()] += n;
        self.total += n;
    }
}

pub fn count_transitions<S: AsRef<[RiskLevel]>>(sequences: &[S], order: usize) -> Result<TransitionCounts> {
    let mut counts = TransitionCounts::zeros(order)?;
    for seq in sequences {
        for (ctx, next) in transitions(seq.as_ref(), order) {
            counts.add(ctx, next, 1);
        }
    }
    if counts.total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(counts)
}

/// Row-stochastic transition matrix over contexts of a given order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    order: usize,
    rows: Vec<[f64; LEVELS]>,
    counts: Option<TransitionCounts>,
    alpha: f64,
    pub category: Option<Category>,
}

impl TransitionMatrix {
    /// Builds a matrix from explicit rows, checking it is row-stochastic.
    pub fn from_rows(order: usize, rows: Vec<[f64; LEVELS]>) -> Result<Self> {
        check_order(order)?;
        if rows.len() != context_count(order) {
            return Err(Error::InvalidConfig(format!(
                "order {order} needs {} rows, got {}",
                context_count(order),
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p) || p.is_nan()) {
                return Err(Error::InvalidConfig(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidConfig(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self {
            order,
            rows,
            counts: None,
            alpha: 0.0,
            category: None,
        })
    }

    /// Aggregate five-level matrix estimated from 2,375 transitions of 285
    /// training traces, rounded to two decimals.
    pub fn reference_aggregate() -> Self {
        Self::from_rows(
            1,
            vec![
                [0.54, 0.32, 0.14, 0.00, 0.00],
                [0.00, 0.74, 0.13, 0.00, 0.13],
                [0.00, 0.00, 0.81, 0.12, 0.07],
                [0.00, 0.00, 0.00, 0.93, 0.07],
                [0.00, 0.00, 0.00, 0.00, 1.00],
            ],
        )
        .expect("reference matrix is row-stochastic")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn rows(&self) -> &[[f64; LEVELS]] {
        &self.rows
    }

    pub fn row(&self, context: usize) -> &[f64; LEVELS] {
        &self.rows[context]
    }

    pub fn counts(&self) -> Option<&TransitionCounts> {
        self.counts.as_ref()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Attaches the counts and smoothing the rows were estimated from.
    pub fn with_counts(mut self, counts: TransitionCounts, alpha: f64) -> Result<Self> {
        if counts.order != self.order || counts.counts.len() != self.rows.len() {
            return Err(Error::InvalidConfig(format!(
                "counts of order {} do not fit a matrix of order {}",
                counts.order, self.order
            )));
        }
        self.counts = Some(counts);
        self.alpha = alpha;
        Ok(self)
    }

    pub fn with_category(mut self, category: Option<Category>) -> Self {
        self.category = category;
        self
    }

    /// `P(next | context)`.
    #[inline]
    pub fn prob(&self, context: usize, next: RiskLevel) -> f64 {
        self.rows[context][next.rank()]
    }

    /// Most likely next level; ties go to the lower level.
    pub fn predict(&self, context: usize) -> RiskLevel {
        let row = &self.rows[context];
        let mut best = 0;
        for i in 1..LEVELS {
            if row[i] > row[best] {
                best = i;
            }
        }
        RiskLevel::from_rank(best).expect("rank < 5")
    }

    /// Whether every context ending in VIOLATED stays there with probability 1.
    pub fn is_absorbing(&self) -> bool {
        (0..self.rows.len())
            .filter(|c| c % LEVELS == RiskLevel::Violated.rank())
            .all(|c| {
                let row = &self.rows[c];
                row[RiskLevel::Violated.rank()] == 1.0 && row[..LEVELS - 1].iter().all(|p| *p == 0.0)
            })
    }
}

/// Add-α estimate. Unseen rows (with α = 0) become self-loops on the current
/// level; rows whose current level is VIOLATED are forced absorbing.
pub fn estimate_matrix(counts: &TransitionCounts, alpha: f64) -> Result<TransitionMatrix> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("smoothing alpha must be >= 0, got {alpha}")));
    }
    let rows = counts
        .counts
        .iter()
        .enumerate()
        .map(|(ctx, c)| {
            let current = ctx % LEVELS;
            let mut row = [0.0; LEVELS];
            if current == RiskLevel::Violated.rank() {
                row[current] = 1.0;
                return row;
            }
            let denom = c.iter().sum::<u64>() as f64 + LEVELS as f64 * alpha;
            if denom == 0.0 {
                row[current] = 1.0;
            } else {
                for (p, n) in row.iter_mut().zip(c) {
                    *p = (*n as f64 + alpha) / denom;
                }
            }
            row
        })
        .collect();
    Ok(TransitionMatrix {
        order: counts.order,
        rows,
        counts: Some(counts.clone()),
        alpha,
        category: None,
    })
}

/// Fits an order-`k` model by maximum likelihood (α = 0).
pub fn embed_higher_order<S: AsRef<[RiskLevel]>>(sequences: &[S], order: usize) -> Result<TransitionMatrix> {
    estimate_matrix(&count_transitions(sequences, order)?, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilsonInterval {
    pub lo: f64,
    pub hi: f64,
    pub estimate: f64,
    pub z: f64,
}

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson_ci(successes: u64, n: u64, z: f64) -> Result<WilsonInterval> {
    if n == 0 || successes > n {
        return Err(Error::InvalidCount { successes, n });
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = p + z2 / (2.0 * nf);
    let margin = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    Ok(WilsonInterval {
        lo: ((centre - margin) / denom).clamp(0.0, p),
        hi: ((centre + margin) / denom).clamp(p, 1.0),
        estimate: p,
        z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NextStateMetrics {
    pub accuracy: f64,
    pub mean_log_likelihood: f64,
    pub transitions: u64,
}

/// Argmax accuracy and mean log-likelihood of `model` on `sequences`.
pub fn next_state_metrics<S: AsRef<[RiskLevel]>>(
    model: &TransitionMatrix,
    sequences: &[S],
) -> Result<NextStateMetrics> {
    let (mut hits, mut ll, mut n) = (0u64, 0.0, 0u64);
    for seq in sequences {
        for (ctx, next) in transitions(seq.as_ref(), model.order) {
            n += 1;
            if model.predict(ctx) == next {
                hits += 1;
            }
            let p = model.prob(ctx, next);
            ll += if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR };
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(NextStateMetrics {
        accuracy: hits as f64 / n as f64,
        mean_log_likelihood: ll / n as f64,
        transitions: n,
    })
}

/// Stratified split by `(category, violated)`. Each stratum of size `n >= 2`
/// puts `round(ratio·n)` traces in train, clamped to `1..=n-1`; singleton
/// strata go to train. Both halves keep corpus order.
pub fn split_train_test(traces: &[Trace], ratio: f64, seed: u64) -> Result<(Vec<Trace>, Vec<Trace>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut strata: BTreeMap<(Category, bool), Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        strata.entry((t.category, t.violated)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; traces.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let k = if n < 2 {
            n
        } else {
            ((ratio * n as f64).round() as usize).clamp(1, n - 1)
        };
        for &i in &members[..k] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = traces
        .iter()
        .zip(in_train)
        .partition(|(_, train)| *train);
    Ok((
        train.into_iter().map(|(t, _)| t.clone()).collect(),
        test.into_iter().map(|(t, _)| t.clone()).collect(),
    ))
}
