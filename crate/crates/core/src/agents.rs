//! Agents: LLM-backed players and deterministic oracles.
//!
//! LLM agents see vocabularies only through prompts, so they are subject to
//! the context exclusion rules of [`crate::prompts`]. Oracles bypass prompts
//! and apply their rule to the vocabulary they are handed.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendClient, CallSite, Event, EventLog, ScriptedBackend, ScriptedSpec};
use crate::domain::{enumerate_stimuli, Colour, Signal, Stimulus, Vocabulary};
use crate::error::{AgentError, BackendError, EngineError};
use crate::metrics::{normalized_levenshtein, semantic_similarity};
use crate::prompts::{
    build_guessing_prompts, build_labelling_prompt, build_listener_prompts, build_speaker_prompt,
    build_testing_prompt, parse_signal_response, Instructions, Prompt, PromptTask,
};

pub const DEFAULT_AGENT_RETRIES: usize = 3;

/// One syllable (or longer chunk) per attribute value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyllableTables {
    pub shape: [String; 3],
    /// Indexed blue, green, orange.
    pub colour: [String; 3],
    pub amount: [String; 3],
}

impl Default for SyllableTables {
    fn default() -> Self {
        let t = |a: &str, b: &str, c: &str| [a.to_string(), b.to_string(), c.to_string()];
        Self {
            shape: t("su", "gi", "wi"),
            colour: t("nu", "ta", "ko"),
            amount: t("se", "pepi", "pitite"),
        }
    }
}

impl SyllableTables {
    /// Shape, colour and amount parts concatenated in that order.
    pub fn compose(&self, stimulus: &Stimulus) -> Signal {
        let [s, c, a] = stimulus.attribute_indices();
        Signal::new(format!("{}{}{}", self.shape[s], self.colour[c], self.amount[a]))
            .expect("syllable tables hold lowercase letters")
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let all = enumerate_stimuli();
        let mut words: Vec<String> = Vec::new();
        for s in &all {
            let [si, ci, ai] = s.attribute_indices();
            let w = format!("{}{}{}", self.shape[si], self.colour[ci], self.amount[ai]);
            Signal::new(w.clone()).map_err(|e| EngineError::Config(format!("syllable tables: {e}")))?;
            words.push(w);
        }
        words.sort();
        words.dedup();
        if words.len() != all.len() {
            return Err(EngineError::Config("syllable tables produce colliding words".into()));
        }
        Ok(())
    }
}

/// Rule-based stand-ins for a language model.
#[derive(Debug, Clone, PartialEq)]
pub enum Oracle {
    /// Reproduces stored signals; unseen stimuli get the signal of the most
    /// similar stored stimulus (ties by canonical order). Chooses the
    /// candidate whose stored form is closest to the probe.
    Lookup,
    /// Composes signals from syllable tables and chooses the candidate whose
    /// composed form is closest to the probe.
    Compositional(SyllableTables),
    /// Produces like [`Oracle::Lookup`], chooses uniformly at random.
    RandomChooser,
    /// Lookup learner that, with probability `error_rate`, replaces a stored
    /// non-compositional signal with its composed form. Composes for unseen
    /// stimuli.
    Regularizer { tables: SyllableTables, error_rate: f64 },
    /// Lookup speaker that replaces at most `per_round` stored signals per
    /// communication round with their composed forms.
    Repair { tables: SyllableTables, per_round: usize, round: Option<usize>, used: usize },
}

/// Probe and candidates for a discrimination task.
#[derive(Debug, Clone, Copy)]
pub enum ChoiceRequest<'a> {
    /// Guessing block: which signal names `stimulus`?
    Guess { stimulus: &'a Stimulus, candidates: &'a [Signal] },
    /// Listening: which stimulus did the speaker mean by `signal`?
    /// `target` is withheld from prompt contexts.
    Listen { target: &'a Stimulus, signal: &'a Signal, candidates: &'a [Stimulus] },
}

impl ChoiceRequest<'_> {
    pub fn len(&self) -> usize {
        match self {
            ChoiceRequest::Guess { candidates, .. } => candidates.len(),
            ChoiceRequest::Listen { candidates, .. } => candidates.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub signal: Signal,
    pub raw_response: Option<String>,
    /// Produced by extrapolating from another stimulus's entry.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Index of the highest score; the earliest wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Call context threaded through every agent action.
pub struct TaskEnv<'a> {
    pub log: &'a EventLog,
    pub site: CallSite,
    pub round: Option<usize>,
}

pub struct LlmAgent {
    client: Arc<BackendClient>,
    instructions: Instructions,
    retries: usize,
}

impl LlmAgent {
    pub fn new(client: Arc<BackendClient>, instructions: Instructions, retries: usize) -> Self {
        Self { client, instructions, retries }
    }

    fn production_prompt<R: Rng + ?Sized>(
        &self,
        context: &Vocabulary,
        stimulus: &Stimulus,
        task: PromptTask,
        rng: &mut R,
    ) -> Result<Prompt, AgentError> {
        match task {
            PromptTask::Labelling => build_labelling_prompt(context, stimulus, &self.instructions, rng),
            PromptTask::Speaking => Ok(build_speaker_prompt(context, stimulus, &self.instructions, rng)),
            PromptTask::Testing => Ok(build_testing_prompt(context, stimulus, &self.instructions, rng)),
            other => Err(AgentError::WrongTask(other.as_str().into())),
        }
    }

    fn produce<R: Rng + ?Sized>(
        &self,
        context: &Vocabulary,
        stimulus: &Stimulus,
        task: PromptTask,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Production, AgentError> {
        let mut last = None;
        for attempt in 0..=self.retries {
            let prompt = self.production_prompt(context, stimulus, task, rng)?;
            let raw = self.client.complete(&prompt, &env.site, env.log)?;
            let parsed = parse_signal_response(&raw);
            let mut event = Event::new(&env.site, "parse");
            event.attempt = attempt;
            event.raw_response = Some(raw.clone());
            match &parsed {
                Ok(signal) => event.parsed = Some(signal.to_string()),
                Err(e) => event.error = Some(e.to_string()),
            }
            env.log.append(event);
            match parsed {
                Ok(signal) => return Ok(Production { signal, raw_response: Some(raw), extrapolated: false }),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn choose<R: Rng + ?Sized>(
        &self,
        context: &Vocabulary,
        request: &ChoiceRequest<'_>,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Choice, AgentError> {
        let prompts = match *request {
            ChoiceRequest::Guess { stimulus, candidates } => {
                build_guessing_prompts(context, stimulus, candidates, &self.instructions, rng)?
            }
            ChoiceRequest::Listen { target, signal, candidates } => {
                build_listener_prompts(context, target, signal, candidates, &self.instructions, rng)
            }
        };
        let scores = prompts
            .iter()
            .map(|p| self.client.score(p, &env.site, env.log))
            .collect::<Result<Vec<f64>, BackendError>>()?;
        Ok(Choice { index: argmax_first(&scores), scores })
    }
}

/// Stored signal for `stimulus`, or the signal of the most similar stored
/// stimulus (earliest in canonical order on ties).
pub fn nearest_signal(vocab: &Vocabulary, stimulus: &Stimulus) -> Option<(Signal, bool)> {
    if let Some(e) = vocab.get(stimulus) {
        return Some((e.signal.clone(), false));
    }
    vocab
        .canonical()
        .entries()
        .iter()
        .fold(None::<(u8, &Signal)>, |best, e| {
            let sim = semantic_similarity(stimulus, &e.stimulus);
            match best {
                Some((b, _)) if b >= sim => best,
                _ => Some((sim, &e.signal)),
            }
        })
        .map(|(_, s)| (s.clone(), true))
}

impl Oracle {
    pub fn kind(&self) -> &'static str {
        match self {
            Oracle::Lookup => "lookup",
            Oracle::Compositional(_) => "compositional",
            Oracle::RandomChooser => "random",
            Oracle::Regularizer { .. } => "regularizer",
            Oracle::Repair { .. } => "repair",
        }
    }

    fn lookup(context: &Vocabulary, stimulus: &Stimulus) -> Result<Production, AgentError> {
        let (signal, extrapolated) =
            nearest_signal(context, stimulus).ok_or(AgentError::StimulusMissing(*stimulus))?;
        Ok(Production { signal, raw_response: None, extrapolated })
    }

    fn produce<R: Rng + ?Sized>(
        &mut self,
        context: &Vocabulary,
        stimulus: &Stimulus,
        task: PromptTask,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Production, AgentError> {
        match self {
            Oracle::Lookup | Oracle::RandomChooser => Self::lookup(context, stimulus),
            Oracle::Compositional(tables) => {
                Ok(Production { signal: tables.compose(stimulus), raw_response: None, extrapolated: false })
            }
            Oracle::Regularizer { tables, error_rate } => {
                let composed = tables.compose(stimulus);
                let Some(entry) = context.get(stimulus) else {
                    return Ok(Production { signal: composed, raw_response: None, extrapolated: true });
                };
                let regularise = entry.signal != composed && rng.gen_bool(*error_rate);
                let signal = if regularise { composed } else { entry.signal.clone() };
                Ok(Production { signal, raw_response: None, extrapolated: false })
            }
            Oracle::Repair { tables, per_round, round, used } => {
                if task == PromptTask::Speaking {
                    if *round != env.round {
                        *round = env.round;
                        *used = 0;
                    }
                    let composed = tables.compose(stimulus);
                    let stored = context.get(stimulus).map(|e| &e.signal);
                    if *used < *per_round && stored != Some(&composed) {
                        *used += 1;
                        return Ok(Production { signal: composed, raw_response: None, extrapolated: false });
                    }
                }
                Self::lookup(context, stimulus)
            }
        }
    }

    fn choose<R: Rng + ?Sized>(
        &mut self,
        context: &Vocabulary,
        request: &ChoiceRequest<'_>,
        rng: &mut R,
    ) -> Result<Choice, AgentError> {
        if let Oracle::RandomChooser = self {
            let index = rng.gen_range(0..request.len());
            return Ok(Choice { index, scores: vec![0.0; request.len()] });
        }
        let this = &*self;
        let form = |s: &Stimulus| -> Result<Signal, AgentError> {
            match this {
                Oracle::Compositional(tables) => Ok(tables.compose(s)),
                _ => Ok(Self::lookup(context, s)?.signal),
            }
        };
        let scores = match *request {
            ChoiceRequest::Guess { stimulus, candidates } => {
                let expected = form(stimulus)?;
                candidates
                    .iter()
                    .map(|c| -normalized_levenshtein(expected.as_str(), c.as_str()))
                    .collect::<Vec<_>>()
            }
            ChoiceRequest::Listen { signal, candidates, .. } => candidates
                .iter()
                .map(|c| Ok(-normalized_levenshtein(signal.as_str(), form(c)?.as_str())))
                .collect::<Result<Vec<_>, AgentError>>()?,
        };
        Ok(Choice { index: argmax_first(&scores), scores })
    }
}

pub enum Behaviour {
    Llm(LlmAgent),
    Oracle(Oracle),
}

/// A player owning exactly one vocabulary.
pub struct Agent {
    pub id: String,
    behaviour: Behaviour,
    vocabulary: Vocabulary,
}

impl Agent {
    pub fn new(id: impl Into<String>, behaviour: Behaviour) -> Self {
        Self { id: id.into(), behaviour, vocabulary: Vocabulary::default() }
    }

    pub fn oracle(id: impl Into<String>, oracle: Oracle) -> Self {
        Self::new(id, Behaviour::Oracle(oracle))
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn vocabulary_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocabulary
    }

    pub fn set_vocabulary(&mut self, vocabulary: Vocabulary) {
        self.vocabulary = vocabulary;
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self.behaviour, Behaviour::Oracle(_))
    }

    /// Produces a signal for `stimulus` given `context`.
    pub fn produce_signal<R: Rng + ?Sized>(
        &mut self,
        context: &Vocabulary,
        stimulus: &Stimulus,
        task: PromptTask,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Production, AgentError> {
        if !task.produces_signal() {
            return Err(AgentError::WrongTask(task.as_str().into()));
        }
        match &mut self.behaviour {
            Behaviour::Llm(llm) => llm.produce(context, stimulus, task, env, rng),
            Behaviour::Oracle(oracle) => {
                let result = oracle.produce(context, stimulus, task, env, rng);
                let mut event = Event::new(&env.site, "oracle");
                match &result {
                    Ok(p) => event.parsed = Some(p.signal.to_string()),
                    Err(e) => event.error = Some(e.to_string()),
                }
                env.log.append(event);
                result
            }
        }
    }

    /// Produces a signal from the agent's own vocabulary.
    pub fn speak<R: Rng + ?Sized>(
        &mut self,
        stimulus: &Stimulus,
        task: PromptTask,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Production, AgentError> {
        let context = self.vocabulary.clone();
        self.produce_signal(&context, stimulus, task, env, rng)
    }

    /// Picks one candidate; ties go to the earliest position.
    pub fn choose<R: Rng + ?Sized>(
        &mut self,
        context: &Vocabulary,
        request: &ChoiceRequest<'_>,
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Choice, AgentError> {
        if request.len() < 2 {
            return Err(AgentError::TooFewCandidates(request.len()));
        }
        match &mut self.behaviour {
            Behaviour::Llm(llm) => llm.choose(context, request, env, rng),
            Behaviour::Oracle(oracle) => {
                let result = oracle.choose(context, request, rng);
                let mut event = Event::new(&env.site, "oracle");
                match &result {
                    Ok(c) => event.parsed = Some(c.index.to_string()),
                    Err(e) => event.error = Some(e.to_string()),
                }
                env.log.append(event);
                result
            }
        }
    }

    /// Listens using the agent's own vocabulary.
    pub fn listen<R: Rng + ?Sized>(
        &mut self,
        target: &Stimulus,
        signal: &Signal,
        candidates: &[Stimulus],
        env: &TaskEnv<'_>,
        rng: &mut R,
    ) -> Result<Choice, AgentError> {
        let context = self.vocabulary.clone();
        self.choose(&context, &ChoiceRequest::Listen { target, signal, candidates }, env, rng)
    }
}

/// How to construct an agent, in `kind[:arg]` string form.
///
/// `oracle:lookup`, `oracle:compositional`, `oracle:random`,
/// `oracle:regularizer[:rate]`, `oracle:repair[:per_round]`, `llm`,
/// `scripted:hashed`, `scripted:const:<word>`, `scripted:<path>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AgentSpec {
    Lookup,
    Compositional,
    RandomChooser,
    Regularizer(f64),
    Repair(usize),
    Llm,
    ScriptedHashed,
    ScriptedConst(String),
    ScriptedFile(PathBuf),
}

impl AgentSpec {
    pub fn needs_live_backend(&self) -> bool {
        matches!(self, AgentSpec::Llm)
    }

    pub fn build(
        &self,
        id: &str,
        tables: &SyllableTables,
        live: Option<&Arc<BackendClient>>,
        instructions: &Instructions,
        retries: usize,
    ) -> Result<Agent, EngineError> {
        let llm = |client: Arc<BackendClient>| {
            Agent::new(id, Behaviour::Llm(LlmAgent::new(client, instructions.clone(), retries)))
        };
        Ok(match self {
            AgentSpec::Lookup => Agent::oracle(id, Oracle::Lookup),
            AgentSpec::Compositional => Agent::oracle(id, Oracle::Compositional(tables.clone())),
            AgentSpec::RandomChooser => Agent::oracle(id, Oracle::RandomChooser),
            AgentSpec::Regularizer(rate) => {
                Agent::oracle(id, Oracle::Regularizer { tables: tables.clone(), error_rate: *rate })
            }
            AgentSpec::Repair(per_round) => Agent::oracle(
                id,
                Oracle::Repair { tables: tables.clone(), per_round: *per_round, round: None, used: 0 },
            ),
            AgentSpec::Llm => llm(live
                .cloned()
                .ok_or_else(|| EngineError::Config("agent 'llm' needs a [backend] section".into()))?),
            AgentSpec::ScriptedHashed => llm(Arc::new(BackendClient::scripted(ScriptedBackend::hashed()))),
            AgentSpec::ScriptedConst(word) => llm(Arc::new(BackendClient::scripted(ScriptedBackend::new(
                ScriptedSpec {
                    default_completion: Some(word.clone()),
                    default_score: Some(-1.0),
                    ..Default::default()
                },
            )))),
            AgentSpec::ScriptedFile(path) => llm(Arc::new(BackendClient::scripted(
                ScriptedBackend::load(path).map_err(|e| EngineError::Config(e.to_string()))?,
            ))),
        })
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentSpec::Lookup => write!(f, "oracle:lookup"),
            AgentSpec::Compositional => write!(f, "oracle:compositional"),
            AgentSpec::RandomChooser => write!(f, "oracle:random"),
            AgentSpec::Regularizer(rate) => write!(f, "oracle:regularizer:{rate}"),
            AgentSpec::Repair(n) => write!(f, "oracle:repair:{n}"),
            AgentSpec::Llm => write!(f, "llm"),
            AgentSpec::ScriptedHashed => write!(f, "scripted:hashed"),
            AgentSpec::ScriptedConst(w) => write!(f, "scripted:const:{w}"),
            AgentSpec::ScriptedFile(p) => write!(f, "scripted:{}", p.display()),
        }
    }
}

impl FromStr for AgentSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().splitn(3, ':').collect();
        let bad = || format!("unknown agent spec '{s}'");
        Ok(match parts.as_slice() {
            ["oracle", "lookup"] => AgentSpec::Lookup,
            ["oracle", "compositional"] => AgentSpec::Compositional,
            ["oracle", "random"] => AgentSpec::RandomChooser,
            ["oracle", "regularizer"] => AgentSpec::Regularizer(0.5),
            ["oracle", "regularizer", rate] => {
                let rate: f64 = rate.parse().map_err(|_| bad())?;
                if !(0.0..=1.0).contains(&rate) {
                    return Err(format!("regularizer rate {rate} outside [0, 1]"));
                }
                AgentSpec::Regularizer(rate)
            }
            ["oracle", "repair"] => AgentSpec::Repair(1),
            ["oracle", "repair", n] => AgentSpec::Repair(n.parse().map_err(|_| bad())?),
            ["llm"] => AgentSpec::Llm,
            ["scripted", "hashed"] => AgentSpec::ScriptedHashed,
            ["scripted", "const", w] => AgentSpec::ScriptedConst(w.to_string()),
            ["scripted", rest @ ..] if !rest.is_empty() => AgentSpec::ScriptedFile(PathBuf::from(rest.join(":"))),
            _ => return Err(bad()),
        })
    }
}

impl TryFrom<String> for AgentSpec {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<AgentSpec> for String {
    fn from(value: AgentSpec) -> Self {
        value.to_string()
    }
}

/// Colour parts are indexed in [`Colour::ALL`] order.
pub fn colour_slot(c: Colour) -> usize {
    c.index()
}
