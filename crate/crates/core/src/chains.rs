//! Iterated learning: each generation's dyad learns from the previous
//! generation's best testing output.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentSpec;
use crate::backend::{BackendClient, EventLog};
use crate::domain::{enumerate_stimuli, sample_training_set, Signal, Stimulus, Vocabulary, STIMULUS_COUNT};
use crate::engine::{build_agents, run_simulation, RunConfig, SimulationResult, AGENT_IDS};
use crate::error::{EngineError, MetricError};
use crate::metrics::{mean, paired_t_test, topsim_pairs, PermutationMode, TTest};
use crate::prompts::Instructions;
use crate::{derive_seed, rng_for};

/// Settings replaced for one generation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationOverride {
    pub generation: usize,
    pub agents: Option<[AgentSpec; 2]>,
    pub rounds: Option<usize>,
    pub candidate_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub generations: usize,
    pub chains: usize,
    pub overrides: Vec<GenerationOverride>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { generations: 8, chains: 6, overrides: Vec::new() }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.generations == 0 {
            return Err(EngineError::Config("generations must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(EngineError::Config("chains must be at least 1".into()));
        }
        Ok(())
    }

    /// Run settings for generation `g` of a chain seeded with `seed`.
    pub fn generation_config(&self, base: &RunConfig, chain_seed: u64, g: usize) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = derive_seed(chain_seed, &format!("generation-{g}"));
        for o in self.overrides.iter().filter(|o| o.generation == g) {
            if let Some(agents) = &o.agents {
                cfg.agents = agents.clone();
            }
            if let Some(r) = o.rounds {
                cfg.rounds = r;
            }
            if let Some(c) = o.candidate_count {
                cfg.candidate_count = c;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorChoice {
    pub donor: String,
    /// Neither agent had a usable TopSim; A was taken by default.
    pub degenerate: bool,
    pub z_scores: [Option<f64>; 2],
}

/// The testing output with the higher TopSim Z; A wins ties. A side whose
/// TopSim is undefined (constant signal distances, missing stimuli) loses.
/// Both sides use the same permutation stream.
pub fn select_donor<R: Rng + ?Sized>(
    test_a: &[(Stimulus, Signal)],
    test_b: &[(Stimulus, Signal)],
    mode: PermutationMode,
    rng: &mut R,
) -> Result<DonorChoice, MetricError> {
    let stream = rng.gen::<u64>();
    let mut z = [None, None];
    for (slot, pairs) in z.iter_mut().zip([test_a, test_b]) {
        if pairs.len() != STIMULUS_COUNT {
            continue;
        }
        match topsim_pairs(pairs, mode, &mut ChaCha8Rng::seed_from_u64(stream)) {
            Ok(t) => *slot = Some(t.z_score),
            Err(MetricError::DegenerateMatrix(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let (donor, degenerate) = match z {
        [Some(a), Some(b)] => (if b > a { 1 } else { 0 }, false),
        [None, Some(_)] => (1, false),
        [Some(_), None] => (0, false),
        [None, None] => (0, true),
    };
    Ok(DonorChoice { donor: AGENT_IDS[donor].into(), degenerate, z_scores: z })
}

/// Fresh balanced split of the transmitted language; flags cleared.
pub fn derive_training_language<R: Rng + ?Sized>(
    transmitted: &Vocabulary,
    rng: &mut R,
) -> Result<Vocabulary, EngineError> {
    if let Some(missing) = enumerate_stimuli().into_iter().find(|s| !transmitted.contains(s)) {
        return Err(EngineError::Config(format!("transmitted language has no signal for {missing}")));
    }
    let split = sample_training_set(rng);
    let pairs = split.train.iter().map(|s| (*s, transmitted.get(s).expect("checked above").signal.clone()));
    Ok(Vocabulary::from_pairs(pairs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub result: SimulationResult,
    pub donor: DonorChoice,
    /// The donor's 27-item testing output, handed to the next generation.
    pub transmitted: Vocabulary,
}

impl GenerationRecord {
    pub fn training_language(&self) -> &Vocabulary {
        &self.result.training_language
    }

    pub fn row(&self, chain: usize) -> ChainRow {
        let rounds: Vec<f64> = (1..=self.result.config.rounds).filter_map(|k| self.result.perc_com(k)).collect();
        let d = &self.donor.donor;
        ChainRow {
            chain,
            generation: self.generation,
            donor: d.clone(),
            learnability: self.result.learnability(),
            perc_com: (!rounds.is_empty()).then(|| mean(&rounds)),
            topsim_z: self.donor.z_scores[if d == "A" { 0 } else { 1 }],
            ngram_diversity: self.result.metric("testing", None, d, "ngram_diversity"),
            unique_signal_ratio: self.result.metric("testing", None, d, "unique_signal_ratio"),
        }
    }
}

/// One line of the chain-level CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub chain: usize,
    pub generation: usize,
    pub donor: String,
    pub learnability: Option<f64>,
    /// Mean over communication rounds.
    pub perc_com: Option<f64>,
    pub topsim_z: Option<f64>,
    pub ngram_diversity: Option<f64>,
    pub unique_signal_ratio: Option<f64>,
}

/// Chain statistic names accepted by [`paired_generation_test`].
pub const CHAIN_METRICS: [&str; 5] = ["learnability", "perc_com", "topsim_z", "ngram_diversity", "unique_signal_ratio"];

impl ChainRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "learnability" => self.learnability,
            "perc_com" => self.perc_com,
            "topsim_z" => self.topsim_z,
            "ngram_diversity" => self.ngram_diversity,
            "unique_signal_ratio" => self.unique_signal_ratio,
            _ => None,
        }
    }
}

/// Paired t-test of `metric` between two generations across chains.
/// Only chains with both values contribute.
pub fn paired_generation_test(rows: &[ChainRow], metric: &str, first: usize, last: usize) -> Result<TTest, MetricError> {
    if !CHAIN_METRICS.contains(&metric) {
        return Err(MetricError::Precondition(format!("unknown chain metric '{metric}'")));
    }
    let mut chains: Vec<usize> = rows.iter().map(|r| r.chain).collect();
    chains.sort_unstable();
    chains.dedup();
    let value = |c: usize, g: usize| rows.iter().find(|r| r.chain == c && r.generation == g).and_then(|r| r.get(metric));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for c in chains {
        if let (Some(x), Some(y)) = (value(c, first), value(c, last)) {
            a.push(x);
            b.push(y);
        }
    }
    paired_t_test(&a, &b)
}

/// Where generation 0 comes from.
#[derive(Debug, Clone)]
pub enum ChainOrigin {
    /// Run a simulation on a fresh random language.
    Fresh,
    /// Use an existing complete simulation as generation 0.
    Imported(Box<SimulationResult>),
}

#[derive(Debug)]
pub struct ChainOutcome {
    pub generations: Vec<GenerationRecord>,
    /// The generation that stopped the chain, if any.
    pub failed: Option<SimulationResult>,
}

/// Hooks for persistence while a chain runs.
pub trait ChainSink {
    fn event_log(&mut self, generation: usize) -> Result<EventLog, EngineError>;
    fn generation_done(&mut self, record: &GenerationRecord) -> Result<(), EngineError>;
    fn generation_failed(&mut self, generation: usize, result: &SimulationResult) -> Result<(), EngineError>;
}

/// Keeps nothing.
pub struct NullSink;

impl ChainSink for NullSink {
    fn event_log(&mut self, _generation: usize) -> Result<EventLog, EngineError> {
        Ok(EventLog::new())
    }

    fn generation_done(&mut self, _record: &GenerationRecord) -> Result<(), EngineError> {
        Ok(())
    }

    fn generation_failed(&mut self, _generation: usize, _result: &SimulationResult) -> Result<(), EngineError> {
        Ok(())
    }
}

pub struct ChainRunner<'a> {
    pub config: &'a ChainConfig,
    pub base: &'a RunConfig,
    pub live: Option<&'a Arc<BackendClient>>,
    pub instructions: &'a Instructions,
}

impl ChainRunner<'_> {
    fn finish(&self, generation: usize, result: SimulationResult) -> Result<GenerationRecord, EngineError> {
        let pairs = |agent: &str| result.testing_pairs(agent);
        let mut rng = rng_for(result.config.seed, "donor");
        let donor = select_donor(&pairs("A"), &pairs("B"), result.config.permutations, &mut rng)?;
        let transmitted = Vocabulary::from_pairs(pairs(&donor.donor))?;
        Ok(GenerationRecord { generation, result, donor, transmitted })
    }

    /// Runs one chain. `completed` holds generations restored from disk;
    /// the chain continues after the last of them.
    pub fn run(
        &self,
        chain_id: &str,
        chain_seed: u64,
        origin: ChainOrigin,
        completed: Vec<GenerationRecord>,
        sink: &mut dyn ChainSink,
    ) -> Result<ChainOutcome, EngineError> {
        self.config.validate()?;
        let mut generations = completed;
        for (i, g) in generations.iter().enumerate() {
            if g.generation != i {
                return Err(EngineError::Config(format!("resumed chain {chain_id} skips generation {i}")));
            }
        }
        for g in generations.len()..self.config.generations {
            let config = self.config.generation_config(self.base, chain_seed, g);
            let language = match (g, &origin) {
                (0, ChainOrigin::Imported(result)) => {
                    let record = self.finish(0, (**result).clone())?;
                    sink.generation_done(&record)?;
                    generations.push(record);
                    continue;
                }
                (0, ChainOrigin::Fresh) => None,
                _ => {
                    let prev = generations.last().expect("generation g-1 exists");
                    let mut rng = rng_for(config.seed, "transmission");
                    Some(derive_training_language(&prev.transmitted, &mut rng)?)
                }
            };
            let agents = build_agents(&config, self.live, self.instructions)?;
            let log = sink.event_log(g)?;
            let result = run_simulation(&format!("{chain_id}/gen-{g}"), &config, agents, language, &log)?;
            if let Err(e) = log.flush() {
                log::warn!("event log flush failed: {e}");
            }
            if !result.is_complete() {
                sink.generation_failed(g, &result)?;
                return Ok(ChainOutcome { generations, failed: Some(result) });
            }
            let record = self.finish(g, result)?;
            sink.generation_done(&record)?;
            generations.push(record);
        }
        Ok(ChainOutcome { generations, failed: None })
    }
}
