//! Communicative-success, structure and generalisation measurements.

mod levenshtein;
mod mantel;
mod stats;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Signal, Stimulus, Vocabulary};
use crate::engine::InteractionRecord;
use crate::error::MetricError;

pub use levenshtein::{levenshtein, normalized_levenshtein};
pub use mantel::{
    mantel_test, topsim_mantel, topsim_pairs, DistanceMatrix, PermutationMode, TopSimResult,
    DEFAULT_PERMUTATIONS, EXHAUSTIVE_MAX_N,
};
pub use stats::{mean, paired_t_test, pearson, sample_std, TTest};

/// N-gram orders pooled by [`ngram_diversity`].
pub const NGRAM_ORDERS: std::ops::RangeInclusive<usize> = 1..=5;

/// Number of attributes two stimuli share (0..=3).
pub fn semantic_similarity(a: &Stimulus, b: &Stimulus) -> u8 {
    u8::from(a.shape() == b.shape())
        + u8::from(a.colour() == b.colour())
        + u8::from(a.amount() == b.amount())
}

/// 3 minus [`semantic_similarity`].
pub fn semantic_distance(a: &Stimulus, b: &Stimulus) -> u8 {
    3 - semantic_similarity(a, b)
}

/// Mean over N = 1..=5 of distinct/total character N-grams pooled across
/// all signals. Orders with no grams at all are left out of the mean.
pub fn ngram_diversity<S: AsRef<str>>(signals: &[S]) -> Result<f64, MetricError> {
    let chars: Vec<Vec<char>> = signals.iter().map(|s| s.as_ref().chars().collect()).collect();
    let mut fractions = Vec::new();
    for n in NGRAM_ORDERS {
        let mut distinct = HashSet::new();
        let mut total = 0usize;
        for word in &chars {
            for gram in word.windows(n) {
                distinct.insert(gram);
                total += 1;
            }
        }
        if total > 0 {
            fractions.push(distinct.len() as f64 / total as f64);
        }
    }
    if fractions.is_empty() {
        return Err(MetricError::EmptyInput("no character n-grams in input".into()));
    }
    Ok(mean(&fractions))
}

/// Which stimulus pairs enter the generalisation correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenScorePairs {
    /// Every (train, test) pair.
    #[default]
    CrossPairs,
    /// Every unordered pair of distinct stimuli in train ∪ test.
    AllPairs,
}

impl GenScorePairs {
    pub fn as_str(self) -> &'static str {
        match self {
            GenScorePairs::CrossPairs => "cross-pairs",
            GenScorePairs::AllPairs => "all-pairs",
        }
    }
}

/// Pearson correlation between meaning distance and normalized signal edit
/// distance over train × test pairs.
pub fn generalization_score(
    train: &[(Stimulus, Signal)],
    test: &[(Stimulus, Signal)],
) -> Result<f64, MetricError> {
    generalization_score_with(train, test, GenScorePairs::CrossPairs)
}

pub fn generalization_score_with(
    train: &[(Stimulus, Signal)],
    test: &[(Stimulus, Signal)],
    pairs: GenScorePairs,
) -> Result<f64, MetricError> {
    if train.is_empty() || test.is_empty() {
        return Err(MetricError::EmptyInput("train and test must both be non-empty".into()));
    }
    let mut meaning = Vec::new();
    let mut form = Vec::new();
    let mut push = |a: &(Stimulus, Signal), b: &(Stimulus, Signal)| {
        meaning.push(semantic_distance(&a.0, &b.0) as f64);
        form.push(normalized_levenshtein(a.1.as_str(), b.1.as_str()));
    };
    match pairs {
        GenScorePairs::CrossPairs => {
            for a in train {
                for b in test {
                    push(a, b);
                }
            }
        }
        GenScorePairs::AllPairs => {
            let all: Vec<&(Stimulus, Signal)> = train.iter().chain(test).collect();
            for i in 0..all.len() {
                for j in (i + 1)..all.len() {
                    push(all[i], all[j]);
                }
            }
        }
    }
    pearson(&meaning, &form)
}

/// Fraction of successful interactions, optionally restricted to one round.
pub fn communicative_success_rate(
    records: &[InteractionRecord],
    round: Option<usize>,
) -> Result<f64, MetricError> {
    let selected: Vec<&InteractionRecord> =
        records.iter().filter(|r| round.is_none_or(|k| r.round == k)).collect();
    if selected.is_empty() {
        return Err(MetricError::EmptyInput(match round {
            Some(k) => format!("no interactions in round {k}"),
            None => "no interactions".into(),
        }));
    }
    Ok(selected.iter().filter(|r| r.success).count() as f64 / selected.len() as f64)
}

pub fn unique_signal_ratio(signals: &[Signal]) -> f64 {
    if signals.is_empty() {
        return 0.0;
    }
    signals.iter().collect::<HashSet<_>>().len() as f64 / signals.len() as f64
}

pub fn mean_signal_length(signals: &[Signal]) -> f64 {
    if signals.is_empty() {
        return 0.0;
    }
    signals.iter().map(|s| s.len() as f64).sum::<f64>() / signals.len() as f64
}

/// Structure summary of one vocabulary snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when the vocabulary is degenerate (constant signal distances)
    /// or too small for a Mantel test.
    pub topsim: Option<TopSimResult>,
    pub ngram_diversity: f64,
    pub mean_signal_length: f64,
    pub unique_signal_ratio: f64,
    pub perc_com: Option<f64>,
    pub gen_score: Option<f64>,
}

impl MetricReport {
    /// TopSim, n-gram diversity, length and uniqueness of a vocabulary.
    pub fn for_vocabulary<R: Rng + ?Sized>(
        vocab: &Vocabulary,
        mode: PermutationMode,
        rng: &mut R,
    ) -> Result<Self, MetricError> {
        Self::for_pairs(&vocab.pairs(), mode, rng)
    }

    pub fn for_pairs<R: Rng + ?Sized>(
        pairs: &[(Stimulus, Signal)],
        mode: PermutationMode,
        rng: &mut R,
    ) -> Result<Self, MetricError> {
        let signals: Vec<Signal> = pairs.iter().map(|(_, w)| w.clone()).collect();
        let topsim = match topsim_pairs(pairs, mode, rng) {
            Ok(t) => Some(t),
            Err(MetricError::DegenerateMatrix(msg)) | Err(MetricError::Precondition(msg)) => {
                log::debug!("TopSim unavailable: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Self {
            topsim,
            ngram_diversity: ngram_diversity(&signals)?,
            mean_signal_length: mean_signal_length(&signals),
            unique_signal_ratio: unique_signal_ratio(&signals),
            perc_com: None,
            gen_score: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Colour;
    use approx::assert_abs_diff_eq;

    fn st(shape: u8, colour: Colour, amount: u8) -> Stimulus {
        Stimulus::new(shape, colour, amount).unwrap()
    }

    fn sig(s: &str) -> Signal {
        Signal::new(s).unwrap()
    }

    #[test]
    fn semantic_similarity_cases() {
        let a = st(1, Colour::Blue, 1);
        assert_eq!(semantic_similarity(&a, &a), 3);
        assert_eq!(semantic_similarity(&a, &st(2, Colour::Green, 2)), 0);
        assert_eq!(semantic_similarity(&a, &st(1, Colour::Blue, 3)), 2);
        let all = crate::domain::enumerate_stimuli();
        for x in &all {
            for y in &all {
                assert_eq!(semantic_similarity(x, y), semantic_similarity(y, x));
            }
        }
    }

    #[test]
    fn ngram_diversity_hand_counts() {
        assert_abs_diff_eq!(ngram_diversity(&["aa"]).unwrap(), 0.75, epsilon = 1e-15);
        let repeated = ngram_diversity(&["na", "na", "na"]).unwrap();
        let varied = ngram_diversity(&["na", "gi", "wo"]).unwrap();
        assert!(repeated < varied);
        assert!(matches!(ngram_diversity::<&str>(&[]), Err(MetricError::EmptyInput(_))));
        assert!(matches!(ngram_diversity(&[""]), Err(MetricError::EmptyInput(_))));
    }

    #[test]
    fn genscore_requires_both_sides() {
        let p = vec![(st(1, Colour::Blue, 1), sig("nafa"))];
        assert!(matches!(generalization_score(&p, &[]), Err(MetricError::EmptyInput(_))));
        assert!(matches!(generalization_score(&[], &p), Err(MetricError::EmptyInput(_))));
    }

    #[test]
    fn genscore_constant_signals_degenerate() {
        let train = vec![(st(1, Colour::Blue, 1), sig("gigi")), (st(2, Colour::Blue, 1), sig("gigi"))];
        let test = vec![(st(3, Colour::Green, 2), sig("gigi"))];
        assert!(matches!(
            generalization_score(&train, &test),
            Err(MetricError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn uniqueness_and_length() {
        let s = [sig("gigi"), sig("gigi"), sig("nafa"), sig("wowowo")];
        assert_eq!(unique_signal_ratio(&s), 0.75);
        assert_eq!(mean_signal_length(&s), 4.5);
    }
}
