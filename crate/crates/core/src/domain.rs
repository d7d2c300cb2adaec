//! Meaning space, signal alphabet and vocabularies.
//!
//! A stimulus is a (shape, colour, amount) triple drawn from a 3×3×3 space.
//! Signals are lowercase strings; freshly generated ones are 2 to 4
//! consonant-vowel syllables, but signals produced by agents may be any
//! lowercase letter run, so the CV grammar is a property rather than an
//! invariant of [`Signal`].

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DomainError;

pub const CONSONANTS: [char; 8] = ['g', 'h', 'k', 'l', 'm', 'n', 'p', 'w'];
pub const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Number of distinct stimuli in the meaning space.
pub const STIMULUS_COUNT: usize = 27;
pub const TRAIN_SIZE: usize = 15;
pub const TEST_SIZE: usize = STIMULUS_COUNT - TRAIN_SIZE;
/// Occurrences of each attribute value in a balanced training set.
pub const PER_VALUE_IN_TRAIN: usize = 5;
/// Longest signal accepted from any source.
pub const MAX_SIGNAL_LEN: usize = 32;

const SPLIT_ATTEMPTS_PER_RESTART: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colour {
    Blue,
    Green,
    Orange,
}

impl Colour {
    pub const ALL: [Colour; 3] = [Colour::Blue, Colour::Green, Colour::Orange];

    pub fn as_str(self) -> &'static str {
        match self {
            Colour::Blue => "blue",
            Colour::Green => "green",
            Colour::Orange => "orange",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Colour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Colour {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blue" => Ok(Colour::Blue),
            "green" => Ok(Colour::Green),
            "orange" => Ok(Colour::Orange),
            other => Err(DomainError::InvalidAttribute(format!("colour '{other}'"))),
        }
    }
}

/// A meaning. Ordering is the canonical shape-major, colour, amount order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawStimulus")]
pub struct Stimulus {
    shape: u8,
    colour: Colour,
    amount: u8,
}

#[derive(Deserialize)]
struct RawStimulus {
    shape: u8,
    colour: Colour,
    amount: u8,
}

impl TryFrom<RawStimulus> for Stimulus {
    type Error = DomainError;

    fn try_from(r: RawStimulus) -> Result<Self, Self::Error> {
        Stimulus::new(r.shape, r.colour, r.amount)
    }
}

impl Stimulus {
    pub fn new(shape: u8, colour: Colour, amount: u8) -> Result<Self, DomainError> {
        if !(1..=3).contains(&shape) {
            return Err(DomainError::InvalidAttribute(format!("shape {shape}")));
        }
        if !(1..=3).contains(&amount) {
            return Err(DomainError::InvalidAttribute(format!("amount {amount}")));
        }
        Ok(Self { shape, colour, amount })
    }

    pub fn shape(&self) -> u8 {
        self.shape
    }

    pub fn colour(&self) -> Colour {
        self.colour
    }

    pub fn amount(&self) -> u8 {
        self.amount
    }

    /// Position in [`enumerate_stimuli`] order.
    pub fn canonical_index(&self) -> usize {
        (self.shape as usize - 1) * 9 + self.colour.index() * 3 + (self.amount as usize - 1)
    }

    /// Attribute values as indices in 0..3, in shape, colour, amount order.
    pub fn attribute_indices(&self) -> [usize; 3] {
        [
            self.shape as usize - 1,
            self.colour.index(),
            self.amount as usize - 1,
        ]
    }
}

impl fmt::Display for Stimulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.shape, self.colour, self.amount)
    }
}

/// All 27 stimuli, shape-major, then colour (blue, green, orange), then amount.
pub fn enumerate_stimuli() -> Vec<Stimulus> {
    let mut out = Vec::with_capacity(STIMULUS_COUNT);
    for shape in 1..=3 {
        for colour in Colour::ALL {
            for amount in 1..=3 {
                out.push(Stimulus { shape, colour, amount });
            }
        }
    }
    out
}

/// A word of the artificial language.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Signal(String);

impl Signal {
    /// Accepts any non-empty run of ASCII lowercase letters up to
    /// [`MAX_SIGNAL_LEN`] characters.
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.is_empty() {
            return Err(DomainError::InvalidSignal("empty signal".into()));
        }
        if text.len() > MAX_SIGNAL_LEN {
            return Err(DomainError::InvalidSignal(format!(
                "'{text}' is longer than {MAX_SIGNAL_LEN} characters"
            )));
        }
        if !text.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(DomainError::InvalidSignal(format!(
                "'{text}' contains characters other than a-z"
            )));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when the signal is 2-4 syllables over the generator alphabet.
    pub fn is_cv_wellformed(&self) -> bool {
        let chars: Vec<char> = self.0.chars().collect();
        if !matches!(chars.len(), 4 | 6 | 8) {
            return false;
        }
        chars.chunks(2).all(|syl| CONSONANTS.contains(&syl[0]) && VOWELS.contains(&syl[1]))
    }
}

impl AsRef<str> for Signal {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Signal {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Signal::new(value)
    }
}

impl From<Signal> for String {
    fn from(value: Signal) -> Self {
        value.0
    }
}

impl FromStr for Signal {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Signal::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub stimulus: Stimulus,
    pub signal: Signal,
    /// Outcome of the last interaction about this stimulus.
    pub communicative_success: bool,
}

impl VocabularyEntry {
    pub fn new(stimulus: Stimulus, signal: Signal) -> Self {
        Self { stimulus, signal, communicative_success: false }
    }
}

/// Ordered stimulus-to-signal mapping with at most one entry per stimulus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<VocabularyEntry>", into = "Vec<VocabularyEntry>")]
pub struct Vocabulary {
    entries: Vec<VocabularyEntry>,
}

impl Vocabulary {
    pub fn new(entries: Vec<VocabularyEntry>) -> Result<Self, DomainError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.stimulus) {
                return Err(DomainError::DuplicateStimulus(e.stimulus));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<I>(pairs: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = (Stimulus, Signal)>,
    {
        Self::new(pairs.into_iter().map(|(s, w)| VocabularyEntry::new(s, w)).collect())
    }

    pub fn entries(&self) -> &[VocabularyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, stimulus: &Stimulus) -> Option<&VocabularyEntry> {
        self.entries.iter().find(|e| e.stimulus == *stimulus)
    }

    pub fn contains(&self, stimulus: &Stimulus) -> bool {
        self.get(stimulus).is_some()
    }

    pub fn stimuli(&self) -> Vec<Stimulus> {
        self.entries.iter().map(|e| e.stimulus).collect()
    }

    pub fn signals(&self) -> Vec<Signal> {
        self.entries.iter().map(|e| e.signal.clone()).collect()
    }

    pub fn pairs(&self) -> Vec<(Stimulus, Signal)> {
        self.entries.iter().map(|e| (e.stimulus, e.signal.clone())).collect()
    }

    /// Sets the signal and flag for `stimulus`, appending an entry if absent.
    pub fn upsert(&mut self, stimulus: Stimulus, signal: Signal, success: bool) {
        match self.entries.iter_mut().find(|e| e.stimulus == stimulus) {
            Some(e) => {
                e.signal = signal;
                e.communicative_success = success;
            }
            None => self.entries.push(VocabularyEntry {
                stimulus,
                signal,
                communicative_success: success,
            }),
        }
    }

    /// Copy with the entry for `stimulus` removed.
    pub fn without(&self, stimulus: &Stimulus) -> Vocabulary {
        Vocabulary {
            entries: self.entries.iter().filter(|e| e.stimulus != *stimulus).cloned().collect(),
        }
    }

    pub fn reset_flags(&mut self) {
        for e in &mut self.entries {
            e.communicative_success = false;
        }
    }

    /// Copy sorted in canonical stimulus order.
    pub fn canonical(&self) -> Vocabulary {
        let mut entries = self.entries.clone();
        entries.sort_by_key(|e| e.stimulus);
        Vocabulary { entries }
    }
}

impl TryFrom<Vec<VocabularyEntry>> for Vocabulary {
    type Error = DomainError;

    fn try_from(value: Vec<VocabularyEntry>) -> Result<Self, Self::Error> {
        Vocabulary::new(value)
    }
}

impl From<Vocabulary> for Vec<VocabularyEntry> {
    fn from(value: Vocabulary) -> Self {
        value.entries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTestSplit {
    pub train: Vec<Stimulus>,
    pub test: Vec<Stimulus>,
}

/// True when every attribute value occurs exactly `PER_VALUE_IN_TRAIN` times.
pub fn is_balanced(train: &[Stimulus]) -> bool {
    let mut counts = [[0usize; 3]; 3];
    for s in train {
        for (attr, value) in s.attribute_indices().into_iter().enumerate() {
            counts[attr][value] += 1;
        }
    }
    train.len() == TRAIN_SIZE && counts.iter().flatten().all(|&c| c == PER_VALUE_IN_TRAIN)
}

/// Uniformly samples a balanced 15-stimulus training set by rejection.
///
/// Roughly 0.12% of random 15-subsets are balanced, so a batch of 10,000
/// attempts fails with probability around e^-12; on exhaustion sampling
/// restarts with the same generator.
pub fn sample_training_set<R: Rng + ?Sized>(rng: &mut R) -> TrainTestSplit {
    let all = enumerate_stimuli();
    let mut pool = all.clone();
    loop {
        for _ in 0..SPLIT_ATTEMPTS_PER_RESTART {
            pool.shuffle(rng);
            let train = &pool[..TRAIN_SIZE];
            if is_balanced(train) {
                let train = train.to_vec();
                let test = all.iter().filter(|s| !train.contains(s)).copied().collect();
                return TrainTestSplit { train, test };
            }
        }
        log::warn!("balanced split not found in {SPLIT_ATTEMPTS_PER_RESTART} attempts; restarting");
    }
}

/// 2, 3 or 4 uniformly random CV syllables.
pub fn random_signal<R: Rng + ?Sized>(rng: &mut R) -> Signal {
    let syllables = rng.gen_range(2..=4);
    let mut text = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        text.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())]);
        text.push(VOWELS[rng.gen_range(0..VOWELS.len())]);
    }
    Signal(text)
}

/// Holistic language: one fresh random signal per stimulus, all distinct.
pub fn generate_language<R: Rng + ?Sized>(
    rng: &mut R,
    stimuli: &[Stimulus],
) -> Result<Vocabulary, DomainError> {
    let mut used = HashSet::with_capacity(stimuli.len());
    let mut entries = Vec::with_capacity(stimuli.len());
    for &stimulus in stimuli {
        let signal = loop {
            let candidate = random_signal(rng);
            if used.insert(candidate.clone()) {
                break candidate;
            }
        };
        entries.push(VocabularyEntry::new(stimulus, signal));
    }
    Vocabulary::new(entries)
}
