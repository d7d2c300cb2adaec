//! Mantel permutation test and the TopSim statistic built on it.
//!
//! The observed statistic is the Pearson correlation between the upper
//! triangles of the meaning-distance and signal-distance matrices. The null
//! distribution comes from relabelling the signal matrix by a permutation
//! applied jointly to its rows and columns.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Signal, Stimulus, Vocabulary};
use crate::error::MetricError;
use crate::metrics::levenshtein::normalized_levenshtein;
use crate::metrics::semantic_distance;

/// Largest n for which [`PermutationMode::Auto`] enumerates all n! orders.
pub const EXHAUSTIVE_MAX_N: usize = 7;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Ties between permuted and observed r within this margin count as `>=`.
const TIE_EPSILON: f64 = 1e-12;

/// Symmetric, zero-diagonal matrix of non-negative distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds the matrix from a pairwise distance function evaluated on i < j.
    pub fn from_fn(n: usize, mut dist: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist(i, j);
                debug_assert!(d >= 0.0, "negative distance");
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self { n, values }
    }

    pub fn semantic(stimuli: &[Stimulus]) -> Self {
        Self::from_fn(stimuli.len(), |i, j| semantic_distance(&stimuli[i], &stimuli[j]) as f64)
    }

    pub fn signal(signals: &[Signal]) -> Self {
        Self::from_fn(signals.len(), |i, j| {
            normalized_levenshtein(signals[i].as_str(), signals[j].as_str())
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Entries above the diagonal, row-major.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Matrix with rows and columns relabelled: `out[i][j] = self[p[i]][p[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.n, |i, j| self.get(perm[i], perm[j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "count")]
pub enum PermutationMode {
    /// Exhaustive for n ≤ 7, otherwise the given number of sampled permutations.
    Auto(usize),
    Exhaustive,
    Sampled(usize),
}

impl Default for PermutationMode {
    fn default() -> Self {
        PermutationMode::Auto(DEFAULT_PERMUTATIONS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopSimResult {
    pub z_score: f64,
    pub p_value: f64,
    pub observed_r: f64,
    /// Size of the null distribution. Sampled mode: number of random
    /// permutations, p = (1 + #{r_perm ≥ r}) / (permutations + 1).
    /// Exhaustive mode: n!, identity included, p = #{r_perm ≥ r} / n!.
    pub permutations: usize,
    pub exhaustive: bool,
    pub null_mean: f64,
    pub null_std: f64,
}

/// Mantel test of `fixed` against `permuted`, relabelling the latter.
pub fn mantel_test<R: Rng + ?Sized>(
    fixed: &DistanceMatrix,
    permuted: &DistanceMatrix,
    mode: PermutationMode,
    rng: &mut R,
) -> Result<TopSimResult, MetricError> {
    let n = fixed.n();
    if n != permuted.n() {
        return Err(MetricError::Precondition("matrices differ in size".into()));
    }
    if n < 3 {
        return Err(MetricError::Precondition(format!("need at least 3 items, got {n}")));
    }
    let a = fixed.upper_triangle();
    let b = permuted.upper_triangle();
    let a_mean = a.iter().sum::<f64>() / a.len() as f64;
    let b_mean = b.iter().sum::<f64>() / b.len() as f64;
    let saa: f64 = a.iter().map(|v| (v - a_mean).powi(2)).sum();
    let sbb: f64 = b.iter().map(|v| (v - b_mean).powi(2)).sum();
    if saa == 0.0 {
        return Err(MetricError::DegenerateMatrix("meaning distances are constant".into()));
    }
    if sbb == 0.0 {
        return Err(MetricError::DegenerateMatrix("signal distances are constant".into()));
    }

    // Permutation preserves the multiset of off-diagonal entries, so the mean
    // and spread of the permuted side are fixed and only the cross term varies.
    let centred: Vec<f64> = a.iter().map(|v| v - a_mean).collect();
    let denom = (saa * sbb).sqrt();
    let correlation = |perm: &[usize]| -> f64 {
        let mut k = 0;
        let mut cross = 0.0;
        for i in 0..n {
            let row = perm[i] * n;
            for j in (i + 1)..n {
                cross += centred[k] * permuted.values[row + perm[j]];
                k += 1;
            }
        }
        cross / denom
    };

    let identity: Vec<usize> = (0..n).collect();
    let observed = correlation(&identity);

    let exhaustive = match mode {
        PermutationMode::Exhaustive => true,
        PermutationMode::Auto(_) => n <= EXHAUSTIVE_MAX_N,
        PermutationMode::Sampled(_) => false,
    };

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut at_least = 0usize;
    let mut count = 0usize;
    let mut record = |r: f64| {
        sum += r;
        sum_sq += r * r;
        count += 1;
        if r >= observed - TIE_EPSILON {
            at_least += 1;
        }
    };

    if exhaustive {
        let mut perm = identity.clone();
        loop {
            record(correlation(&perm));
            if !next_permutation(&mut perm) {
                break;
            }
        }
    } else {
        let draws = match mode {
            PermutationMode::Auto(k) | PermutationMode::Sampled(k) => k,
            PermutationMode::Exhaustive => unreachable!(),
        };
        if draws == 0 {
            return Err(MetricError::Precondition("permutation count must be positive".into()));
        }
        let mut perm = identity.clone();
        for _ in 0..draws {
            perm.shuffle(rng);
            record(correlation(&perm));
        }
    }

    let null_mean = sum / count as f64;
    let null_var = (sum_sq / count as f64 - null_mean * null_mean).max(0.0);
    let null_std = null_var.sqrt();
    if null_std == 0.0 {
        return Err(MetricError::DegenerateMatrix(
            "permutation distribution has zero spread".into(),
        ));
    }
    let p_value = if exhaustive {
        at_least as f64 / count as f64
    } else {
        (1 + at_least) as f64 / (count + 1) as f64
    };
    Ok(TopSimResult {
        z_score: (observed - null_mean) / null_std,
        p_value,
        observed_r: observed.clamp(-1.0, 1.0),
        permutations: count,
        exhaustive,
        null_mean,
        null_std,
    })
}

/// TopSim of a vocabulary: Mantel test between meaning distances
/// (3 minus shared attributes) and normalized edit distances of signals.
pub fn topsim_mantel<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    mode: PermutationMode,
    rng: &mut R,
) -> Result<TopSimResult, MetricError> {
    topsim_pairs(&vocab.pairs(), mode, rng)
}

pub fn topsim_pairs<R: Rng + ?Sized>(
    pairs: &[(Stimulus, Signal)],
    mode: PermutationMode,
    rng: &mut R,
) -> Result<TopSimResult, MetricError> {
    if pairs.len() < 3 {
        return Err(MetricError::Precondition(format!(
            "TopSim needs at least 3 entries, got {}",
            pairs.len()
        )));
    }
    let stimuli: Vec<Stimulus> = pairs.iter().map(|(s, _)| *s).collect();
    let signals: Vec<Signal> = pairs.iter().map(|(_, w)| w.clone()).collect();
    mantel_test(&DistanceMatrix::semantic(&stimuli), &DistanceMatrix::signal(&signals), mode, rng)
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = perm.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = perm.iter().rposition(|&v| v > perm[i]).expect("pivot has a successor");
    perm.swap(i, j);
    perm[i + 1..].reverse();
    true
}
