//! The four-block dyad protocol: guessing, labelling, communication, testing.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentSpec, ChoiceRequest, SyllableTables, TaskEnv, DEFAULT_AGENT_RETRIES};
use crate::backend::{CallSite, EventLog};
use crate::domain::{
    enumerate_stimuli, generate_language, sample_training_set, Signal, Stimulus, TrainTestSplit, Vocabulary,
    TRAIN_SIZE,
};
use crate::error::{AgentError, BackendError, EngineError, MetricError};
use crate::metrics::{
    communicative_success_rate, generalization_score_with, mean, normalized_levenshtein, GenScorePairs,
    MetricReport, PermutationMode,
};
use crate::prompts::PromptTask;
use crate::rng_for;

pub const AGENT_IDS: [&str; 2] = ["A", "B"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub tasks_per_round: usize,
    /// Require `tasks_per_round == 2 * TRAIN_SIZE`.
    pub paper_schedule: bool,
    /// Target plus distractors shown to the listener.
    pub candidate_count: usize,
    pub guessing_distractors: usize,
    pub permutations: PermutationMode,
    pub agent_retries: usize,
    pub genscore_pairs: GenScorePairs,
    pub agents: [AgentSpec; 2],
    /// Used by the compositional, regularizer and repair oracles.
    pub tables: SyllableTables,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 4,
            tasks_per_round: 2 * TRAIN_SIZE,
            paper_schedule: true,
            candidate_count: 4,
            guessing_distractors: 3,
            permutations: PermutationMode::default(),
            agent_retries: DEFAULT_AGENT_RETRIES,
            genscore_pairs: GenScorePairs::default(),
            agents: [AgentSpec::Lookup, AgentSpec::Lookup],
            tables: SyllableTables::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.tasks_per_round == 0 {
            return bad("tasks_per_round must be at least 1".into());
        }
        if self.paper_schedule && self.tasks_per_round != 2 * TRAIN_SIZE {
            return bad(format!(
                "tasks_per_round = {} but the paper schedule needs {}",
                self.tasks_per_round,
                2 * TRAIN_SIZE
            ));
        }
        if !(2..=TRAIN_SIZE).contains(&self.candidate_count) {
            return bad(format!("candidate_count must be in 2..={TRAIN_SIZE}"));
        }
        if !(1..TRAIN_SIZE).contains(&self.guessing_distractors) {
            return bad(format!("guessing_distractors must be in 1..{TRAIN_SIZE}"));
        }
        if let PermutationMode::Sampled(0) | PermutationMode::Auto(0) = self.permutations {
            return bad("permutation count must be positive".into());
        }
        self.tables.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    #[default]
    None,
    FailedProduction,
    FailedChoice,
}

/// One speaker/listener exchange in the communication block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub round: usize,
    pub task_index: usize,
    pub speaker: String,
    pub listener: String,
    pub stimulus: Stimulus,
    pub signal: Option<Signal>,
    pub candidates: Vec<Stimulus>,
    pub chosen: Option<usize>,
    pub success: bool,
    pub failure_mode: FailureMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuessRecord {
    pub agent: String,
    pub stimulus: Stimulus,
    pub candidates: Vec<Signal>,
    pub chosen: Option<usize>,
    pub correct: bool,
    pub failure_mode: FailureMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub agent: String,
    pub stimulus: Stimulus,
    pub truth: Signal,
    pub produced: Option<Signal>,
    pub failure_mode: FailureMode,
}

impl LabelRecord {
    /// Normalized edit distance to the training signal; `None` on failure.
    pub fn distance(&self) -> Option<f64> {
        self.produced.as_ref().map(|p| normalized_levenshtein(p.as_str(), self.truth.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub agent: String,
    pub stimulus: Stimulus,
    pub in_train: bool,
    /// `None` marks a failed production, excluded from metrics.
    pub signal: Option<Signal>,
    pub extrapolated: bool,
    pub failure_mode: FailureMode,
}

/// Any record kind, as stored one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "kebab-case")]
pub enum Record {
    Guessing(GuessRecord),
    Labelling(LabelRecord),
    Communication(InteractionRecord),
    Testing(TestRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSnapshot {
    pub agent: String,
    /// `labelled`, `round-<k>` or `testing`.
    pub label: String,
    pub vocabulary: Vocabulary,
}

impl VocabSnapshot {
    pub fn block_and_round(&self) -> (&'static str, Option<usize>) {
        snapshot_block(&self.label)
    }

    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.agent, self.label)
    }
}

pub fn snapshot_block(label: &str) -> (&'static str, Option<usize>) {
    match label.strip_prefix("round-").and_then(|k| k.parse().ok()) {
        Some(k) => ("communication", Some(k)),
        None if label == "labelled" => ("labelling", None),
        None => ("testing", None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub block: String,
    pub round: Option<usize>,
    pub agent: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Incomplete { stage: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub id: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub split: TrainTestSplit,
    pub training_language: Vocabulary,
    pub guessing: Vec<GuessRecord>,
    pub labelling: Vec<LabelRecord>,
    pub interactions: Vec<InteractionRecord>,
    pub testing: Vec<TestRecord>,
    pub snapshots: Vec<VocabSnapshot>,
    pub metrics: Vec<MetricRow>,
}

impl SimulationResult {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn snapshot(&self, agent: &str, label: &str) -> Option<&Vocabulary> {
        self.snapshots.iter().find(|s| s.agent == agent && s.label == label).map(|s| &s.vocabulary)
    }

    /// The agent's vocabulary after the last communication round (or
    /// after labelling if no round finished).
    pub fn final_vocabulary(&self, agent: &str) -> Option<&Vocabulary> {
        self.snapshots
            .iter()
            .rev()
            .find(|s| s.agent == agent && s.label != "testing")
            .map(|s| &s.vocabulary)
    }

    pub fn metric(&self, block: &str, round: Option<usize>, agent: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.block == block && m.round == round && m.agent == agent && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn perc_com(&self, round: usize) -> Option<f64> {
        self.metric("communication", Some(round), "dyad", "perc_com")
    }

    /// Successful testing productions of one agent, canonical order.
    pub fn testing_pairs(&self, agent: &str) -> Vec<(Stimulus, Signal)> {
        let mut pairs: Vec<(Stimulus, Signal)> = self
            .testing
            .iter()
            .filter(|t| t.agent == agent)
            .filter_map(|t| t.signal.clone().map(|s| (t.stimulus, s)))
            .collect();
        pairs.sort_by_key(|(s, _)| *s);
        pairs
    }

    /// Mean labelling distance over both agents.
    pub fn learnability(&self) -> Option<f64> {
        let d: Vec<f64> = self.labelling.iter().filter_map(LabelRecord::distance).collect();
        (!d.is_empty()).then(|| mean(&d))
    }

    pub fn records(&self) -> Vec<Record> {
        self.guessing
            .iter()
            .cloned()
            .map(Record::Guessing)
            .chain(self.labelling.iter().cloned().map(Record::Labelling))
            .chain(self.interactions.iter().cloned().map(Record::Communication))
            .chain(self.testing.iter().cloned().map(Record::Testing))
            .collect()
    }
}

/// One slot of a communication round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTask {
    /// 0 for agent A, 1 for agent B.
    pub speaker: usize,
    pub stimulus: Stimulus,
}

/// `tasks` slots alternating A, B, A, B... Each agent walks its own random
/// permutation of `train`, starting a new one when exhausted.
pub fn schedule_round_with<R: Rng + ?Sized>(train: &[Stimulus], tasks: usize, rng: &mut R) -> Vec<ScheduledTask> {
    let per_agent = [tasks.div_ceil(2), tasks / 2];
    let mut orders: [Vec<Stimulus>; 2] = [Vec::new(), Vec::new()];
    for (agent, order) in orders.iter_mut().enumerate() {
        while order.len() < per_agent[agent] {
            let mut perm = train.to_vec();
            perm.shuffle(rng);
            order.extend(perm);
        }
    }
    (0..tasks).map(|k| ScheduledTask { speaker: k % 2, stimulus: orders[k % 2][k / 2] }).collect()
}

/// Standard round: `2 * train.len()` tasks, each agent speaking each
/// stimulus exactly once.
pub fn schedule_round<R: Rng + ?Sized>(train: &[Stimulus], rng: &mut R) -> Vec<ScheduledTask> {
    schedule_round_with(train, 2 * train.len(), rng)
}

/// Backend failures that end a simulation rather than one interaction.
fn fatal(e: &AgentError) -> Option<BackendError> {
    match e {
        AgentError::Backend(b) if b.is_transient() || matches!(b, BackendError::CapabilityUnsupported(_)) => {
            Some(b.clone())
        }
        _ => None,
    }
}

fn site(sim: &str, block: &str, round: Option<usize>, task: PromptTask, agent: &str) -> CallSite {
    CallSite {
        simulation: sim.into(),
        block: block.into(),
        round,
        task: task.as_str().into(),
        agent: agent.into(),
    }
}

/// Per-run context shared by the block functions.
pub struct BlockCtx<'a> {
    pub sim: &'a str,
    pub log: &'a EventLog,
}

impl BlockCtx<'_> {
    fn env(&self, block: &str, round: Option<usize>, task: PromptTask, agent: &str) -> TaskEnv<'_> {
        TaskEnv { log: self.log, site: site(self.sim, block, round, task, agent), round }
    }
}

/// Signal multiple choice over the training language, target in context.
pub fn run_guessing_block<R: Rng + ?Sized>(
    agent: &mut Agent,
    vocab: &Vocabulary,
    distractors: usize,
    ctx: &BlockCtx<'_>,
    rng: &mut R,
) -> Result<Vec<GuessRecord>, BackendError> {
    let mut order = vocab.stimuli();
    order.shuffle(rng);
    let mut records = Vec::with_capacity(order.len());
    for stimulus in order {
        let truth = vocab.get(&stimulus).expect("stimulus from vocab").signal.clone();
        let others: Vec<Signal> =
            vocab.entries().iter().filter(|e| e.stimulus != stimulus).map(|e| e.signal.clone()).collect();
        let mut candidates: Vec<Signal> = others.choose_multiple(rng, distractors).cloned().collect();
        candidates.push(truth.clone());
        candidates.shuffle(rng);
        let env = ctx.env("guessing", None, PromptTask::Guessing, &agent.id);
        let request = ChoiceRequest::Guess { stimulus: &stimulus, candidates: &candidates };
        let (chosen, failure_mode) = match agent.choose(vocab, &request, &env, rng) {
            Ok(c) => (Some(c.index), FailureMode::None),
            Err(e) => {
                if let Some(b) = fatal(&e) {
                    return Err(b);
                }
                (None, FailureMode::FailedChoice)
            }
        };
        let correct = chosen.is_some_and(|i| candidates[i] == truth);
        records.push(GuessRecord { agent: agent.id.clone(), stimulus, candidates, chosen, correct, failure_mode });
    }
    Ok(records)
}

pub fn guessing_accuracy(records: &[GuessRecord]) -> Option<f64> {
    (!records.is_empty()).then(|| records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// The agent relabels every training stimulus with the full language in
/// view; its answers become its vocabulary. Failed productions keep the
/// training signal.
pub fn run_labelling_block<R: Rng + ?Sized>(
    agent: &mut Agent,
    vocab: &Vocabulary,
    ctx: &BlockCtx<'_>,
    rng: &mut R,
) -> Result<Vec<LabelRecord>, BackendError> {
    let mut order = vocab.stimuli();
    order.shuffle(rng);
    let mut records = Vec::with_capacity(order.len());
    let mut learned = vocab.clone();
    learned.reset_flags();
    for stimulus in order {
        let truth = vocab.get(&stimulus).expect("stimulus from vocab").signal.clone();
        let env = ctx.env("labelling", None, PromptTask::Labelling, &agent.id);
        let (produced, failure_mode) = match agent.produce_signal(vocab, &stimulus, PromptTask::Labelling, &env, rng) {
            Ok(p) => (Some(p.signal), FailureMode::None),
            Err(e) => {
                if let Some(b) = fatal(&e) {
                    return Err(b);
                }
                (None, FailureMode::FailedProduction)
            }
        };
        if let Some(signal) = &produced {
            learned.upsert(stimulus, signal.clone(), false);
        }
        records.push(LabelRecord { agent: agent.id.clone(), stimulus, truth, produced, failure_mode });
    }
    agent.set_vocabulary(learned);
    Ok(records)
}

/// Target plus `count - 1` other train stimuli, in random order.
pub fn sample_candidates<R: Rng + ?Sized>(
    train: &[Stimulus],
    target: &Stimulus,
    count: usize,
    rng: &mut R,
) -> Vec<Stimulus> {
    let others: Vec<Stimulus> = train.iter().filter(|s| *s != target).copied().collect();
    let mut candidates: Vec<Stimulus> = others.choose_multiple(rng, count - 1).copied().collect();
    candidates.push(*target);
    candidates.shuffle(rng);
    candidates
}

/// One communication round over `schedule`. Both agents adopt every
/// produced signal, flagged with the outcome.
pub fn run_communication_round<R: Rng + ?Sized>(
    agents: &mut [Agent; 2],
    train: &[Stimulus],
    schedule: &[ScheduledTask],
    round: usize,
    candidate_count: usize,
    ctx: &BlockCtx<'_>,
    rng: &mut R,
) -> Result<Vec<InteractionRecord>, BackendError> {
    let mut records = Vec::with_capacity(schedule.len());
    for (task_index, task) in schedule.iter().enumerate() {
        let (s, l) = (task.speaker, 1 - task.speaker);
        let stimulus = task.stimulus;
        let candidates = sample_candidates(train, &stimulus, candidate_count, rng);
        let env = ctx.env("communication", Some(round), PromptTask::Speaking, &agents[s].id);
        let mut failure_mode = FailureMode::None;
        let signal = match agents[s].speak(&stimulus, PromptTask::Speaking, &env, rng) {
            Ok(p) => Some(p.signal),
            Err(e) => {
                if let Some(b) = fatal(&e) {
                    return Err(b);
                }
                failure_mode = FailureMode::FailedProduction;
                None
            }
        };
        let mut chosen = None;
        if let Some(signal) = &signal {
            let env = ctx.env("communication", Some(round), PromptTask::Listening, &agents[l].id);
            match agents[l].listen(&stimulus, signal, &candidates, &env, rng) {
                Ok(c) => chosen = Some(c.index),
                Err(e) => {
                    if let Some(b) = fatal(&e) {
                        return Err(b);
                    }
                    failure_mode = FailureMode::FailedChoice;
                }
            }
        }
        let success = chosen.is_some_and(|i| candidates[i] == stimulus);
        if let Some(signal) = &signal {
            for agent in agents.iter_mut() {
                agent.vocabulary_mut().upsert(stimulus, signal.clone(), success);
            }
        }
        records.push(InteractionRecord {
            round,
            task_index,
            speaker: agents[s].id.clone(),
            listener: agents[l].id.clone(),
            stimulus,
            signal,
            candidates,
            chosen,
            success,
            failure_mode,
        });
    }
    Ok(records)
}

/// Signals for all 27 stimuli from the agent's vocabulary; prompts never
/// show the current stimulus.
pub fn run_testing_block<R: Rng + ?Sized>(
    agent: &mut Agent,
    ctx: &BlockCtx<'_>,
    rng: &mut R,
) -> Result<Vec<TestRecord>, BackendError> {
    let train = agent.vocabulary().clone();
    let mut records = Vec::new();
    for stimulus in enumerate_stimuli() {
        let env = ctx.env("testing", None, PromptTask::Testing, &agent.id);
        let record = match agent.produce_signal(&train, &stimulus, PromptTask::Testing, &env, rng) {
            Ok(p) => TestRecord {
                agent: agent.id.clone(),
                stimulus,
                in_train: train.contains(&stimulus),
                signal: Some(p.signal),
                extrapolated: p.extrapolated,
                failure_mode: FailureMode::None,
            },
            Err(e) => {
                if let Some(b) = fatal(&e) {
                    return Err(b);
                }
                TestRecord {
                    agent: agent.id.clone(),
                    stimulus,
                    in_train: train.contains(&stimulus),
                    signal: None,
                    extrapolated: false,
                    failure_mode: FailureMode::FailedProduction,
                }
            }
        };
        records.push(record);
    }
    Ok(records)
}

/// Builds both agents of a dyad from the config.
pub fn build_agents(
    config: &RunConfig,
    live: Option<&std::sync::Arc<crate::backend::BackendClient>>,
    instructions: &crate::prompts::Instructions,
) -> Result<[Agent; 2], EngineError> {
    let a = config.agents[0].build(AGENT_IDS[0], &config.tables, live, instructions, config.agent_retries)?;
    let b = config.agents[1].build(AGENT_IDS[1], &config.tables, live, instructions, config.agent_retries)?;
    Ok([a, b])
}

/// Runs all four blocks for a dyad. `language` is the shared training
/// language; a fresh random one is drawn when absent. A fatal backend
/// failure yields an incomplete result holding everything finished so far.
pub fn run_simulation(
    id: &str,
    config: &RunConfig,
    mut agents: [Agent; 2],
    language: Option<Vocabulary>,
    log: &EventLog,
) -> Result<SimulationResult, EngineError> {
    config.validate()?;
    let seed = config.seed;
    let (split, training_language) = match language {
        Some(vocab) => {
            let train = vocab.stimuli();
            let test = enumerate_stimuli().into_iter().filter(|s| !vocab.contains(s)).collect();
            let mut vocab = vocab.canonical();
            vocab.reset_flags();
            (TrainTestSplit { train, test }, vocab)
        }
        None => {
            let split = sample_training_set(&mut rng_for(seed, "split"));
            let vocab = generate_language(&mut rng_for(seed, "language"), &split.train)?;
            (split, vocab)
        }
    };
    if training_language.len() < config.candidate_count.max(config.guessing_distractors + 1) {
        return Err(EngineError::Config(format!(
            "training language has {} entries, too few for the candidate settings",
            training_language.len()
        )));
    }
    for (agent, name) in agents.iter_mut().zip(AGENT_IDS) {
        agent.id = name.to_string();
    }

    let mut result = SimulationResult {
        id: id.to_string(),
        config: config.clone(),
        status: RunStatus::Complete,
        split,
        training_language: training_language.clone(),
        guessing: Vec::new(),
        labelling: Vec::new(),
        interactions: Vec::new(),
        testing: Vec::new(),
        snapshots: Vec::new(),
        metrics: Vec::new(),
    };
    let ctx = BlockCtx { sim: id, log };
    if let Err((stage, e)) = run_blocks(&mut result, &mut agents, &training_language, config, &ctx) {
        log::warn!("simulation {id} aborted during {stage}: {e}");
        result.status = RunStatus::Incomplete { stage, error: e.to_string() };
    }
    result.metrics = compute_metrics(&result)?;
    Ok(result)
}

fn run_blocks(
    result: &mut SimulationResult,
    agents: &mut [Agent; 2],
    language: &Vocabulary,
    config: &RunConfig,
    ctx: &BlockCtx<'_>,
) -> Result<(), (String, BackendError)> {
    let seed = config.seed;
    let train = language.stimuli();
    for agent in agents.iter_mut() {
        let mut rng = rng_for(seed, &format!("guessing/{}", agent.id));
        let records = run_guessing_block(agent, language, config.guessing_distractors, ctx, &mut rng)
            .map_err(|e| ("guessing".to_string(), e))?;
        result.guessing.extend(records);
    }
    for agent in agents.iter_mut() {
        let mut rng = rng_for(seed, &format!("labelling/{}", agent.id));
        let records = run_labelling_block(agent, language, ctx, &mut rng).map_err(|e| ("labelling".to_string(), e))?;
        result.labelling.extend(records);
        result.snapshots.push(VocabSnapshot {
            agent: agent.id.clone(),
            label: "labelled".into(),
            vocabulary: agent.vocabulary().clone(),
        });
    }
    for round in 1..=config.rounds {
        let mut rng = rng_for(seed, &format!("communication/round-{round}"));
        let schedule = schedule_round_with(&train, config.tasks_per_round, &mut rng);
        let records = run_communication_round(agents, &train, &schedule, round, config.candidate_count, ctx, &mut rng)
            .map_err(|e| (format!("communication round {round}"), e))?;
        result.interactions.extend(records);
        for agent in agents.iter() {
            result.snapshots.push(VocabSnapshot {
                agent: agent.id.clone(),
                label: format!("round-{round}"),
                vocabulary: agent.vocabulary().clone(),
            });
        }
    }
    for agent in agents.iter_mut() {
        let mut rng = rng_for(seed, &format!("testing/{}", agent.id));
        let records = run_testing_block(agent, ctx, &mut rng).map_err(|e| ("testing".to_string(), e))?;
        result.testing.extend(records);
    }
    for agent in AGENT_IDS {
        let pairs = result.testing_pairs(agent);
        if let Ok(vocabulary) = Vocabulary::from_pairs(pairs) {
            result.snapshots.push(VocabSnapshot { agent: agent.into(), label: "testing".into(), vocabulary });
        }
    }
    Ok(())
}

/// Every metric of a (possibly partial) result. Deterministic in the
/// result contents and its seed, so stored rows can be recomputed.
pub fn compute_metrics(r: &SimulationResult) -> Result<Vec<MetricRow>, MetricError> {
    let mut rows = Vec::new();
    let mut push = |block: &str, round: Option<usize>, agent: &str, metric: &str, value: f64| {
        rows.push(MetricRow { block: block.into(), round, agent: agent.into(), metric: metric.into(), value });
    };
    for agent in AGENT_IDS {
        let guesses: Vec<GuessRecord> = r.guessing.iter().filter(|g| g.agent == agent).cloned().collect();
        if let Some(acc) = guessing_accuracy(&guesses) {
            push("guessing", None, agent, "accuracy", acc);
        }
    }
    for agent in AGENT_IDS {
        let d: Vec<f64> = r.labelling.iter().filter(|l| l.agent == agent).filter_map(LabelRecord::distance).collect();
        if !d.is_empty() {
            push("labelling", None, agent, "learnability", mean(&d));
        }
    }
    let rounds: std::collections::BTreeSet<usize> = r.interactions.iter().map(|i| i.round).collect();
    for round in rounds {
        push("communication", Some(round), "dyad", "perc_com", communicative_success_rate(&r.interactions, Some(round))?);
    }
    for snap in &r.snapshots {
        if snap.vocabulary.is_empty() {
            continue;
        }
        let (block, round) = snap.block_and_round();
        let mut rng = rng_for(r.config.seed, &format!("metrics/{}/{}", snap.agent, snap.label));
        let report = MetricReport::for_vocabulary(&snap.vocabulary.canonical(), r.config.permutations, &mut rng)?;
        if let Some(t) = &report.topsim {
            push(block, round, &snap.agent, "topsim_z", t.z_score);
            push(block, round, &snap.agent, "topsim_p", t.p_value);
            push(block, round, &snap.agent, "topsim_r", t.observed_r);
        }
        push(block, round, &snap.agent, "ngram_diversity", report.ngram_diversity);
        push(block, round, &snap.agent, "mean_signal_length", report.mean_signal_length);
        push(block, round, &snap.agent, "unique_signal_ratio", report.unique_signal_ratio);
    }
    for agent in AGENT_IDS {
        let Some(trained) = r.final_vocabulary(agent) else { continue };
        let test: Vec<(Stimulus, Signal)> =
            r.testing_pairs(agent).into_iter().filter(|(s, _)| !trained.contains(s)).collect();
        if test.is_empty() {
            continue;
        }
        match generalization_score_with(&trained.canonical().pairs(), &test, r.config.genscore_pairs) {
            Ok(g) => push("testing", None, agent, "gen_score", g),
            Err(e) => log::debug!("GenScore for {agent} unavailable: {e}"),
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Oracle;
    use crate::domain::Colour;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn train() -> Vec<Stimulus> {
        sample_training_set(&mut ChaCha8Rng::seed_from_u64(3)).train
    }

    #[test]
    fn schedule_alternates_and_covers() {
        let train = train();
        let s = schedule_round(&train, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.len(), 30);
        for (k, t) in s.iter().enumerate() {
            assert_eq!(t.speaker, k % 2);
        }
        for agent in 0..2 {
            let mut spoken: Vec<Stimulus> = s.iter().filter(|t| t.speaker == agent).map(|t| t.stimulus).collect();
            spoken.sort();
            let mut expected = train.clone();
            expected.sort();
            assert_eq!(spoken, expected);
        }
        assert_eq!(s, schedule_round(&train, &mut ChaCha8Rng::seed_from_u64(1)));
    }

    #[test]
    fn candidates_hold_target_once() {
        let train = train();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for target in &train {
            for count in [2, 4, 5, 15] {
                let c = sample_candidates(&train, target, count, &mut rng);
                assert_eq!(c.len(), count);
                assert_eq!(c.iter().filter(|s| *s == target).count(), 1);
                assert!(c.iter().all(|s| train.contains(s)));
                let mut d = c.clone();
                d.sort();
                d.dedup();
                assert_eq!(d.len(), count);
            }
        }
    }

    #[test]
    fn config_validation() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig { tasks_per_round: 20, ..Default::default() }.validate().is_err());
        RunConfig { tasks_per_round: 20, paper_schedule: false, ..Default::default() }.validate().unwrap();
        assert!(RunConfig { candidate_count: 1, ..Default::default() }.validate().is_err());
        RunConfig { candidate_count: 5, ..Default::default() }.validate().unwrap();
    }

    #[test]
    fn lookup_dyad_runs_every_block() {
        let config = RunConfig { seed: 11, permutations: PermutationMode::Sampled(200), ..Default::default() };
        let agents = [Agent::oracle("x", Oracle::Lookup), Agent::oracle("y", Oracle::Lookup)];
        let log = EventLog::new();
        let r = run_simulation("t", &config, agents, None, &log).unwrap();
        assert!(r.is_complete());
        assert_eq!(r.guessing.len(), 30);
        assert_eq!(r.labelling.len(), 30);
        assert_eq!(r.interactions.len(), 120);
        assert_eq!(r.testing.len(), 54);
        for round in 1..=4 {
            assert_eq!(r.perc_com(round), Some(1.0));
        }
        assert_eq!(r.metric("guessing", None, "A", "accuracy"), Some(1.0));
        assert_eq!(r.learnability(), Some(0.0));
        let extrapolated = r.testing.iter().filter(|t| t.extrapolated).count();
        assert_eq!(extrapolated, 24);
        assert!(r.testing.iter().all(|t| t.extrapolated != t.in_train));
    }

    #[test]
    fn record_tagging_round_trips() {
        let rec = Record::Communication(InteractionRecord {
            round: 1,
            task_index: 0,
            speaker: "A".into(),
            listener: "B".into(),
            stimulus: Stimulus::new(1, Colour::Blue, 1).unwrap(),
            signal: None,
            candidates: vec![],
            chosen: None,
            success: false,
            failure_mode: FailureMode::FailedProduction,
        });
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"block\":\"communication\""));
        assert!(line.contains("failed-production"));
        assert_eq!(serde_json::from_str::<Record>(&line).unwrap(), rec);
    }
}
