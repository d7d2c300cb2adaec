//! Python bindings for the langevo core crate.

use std::path::PathBuf;

use langevo::backend::EventLog;
use langevo::engine::{build_agents, run_simulation, RunConfig, RunStatus};
use langevo::format::{parse_vocabulary, render_vocabulary};
use langevo::metrics::{self, GenScorePairs, PermutationMode};
use langevo::{domain, persist, rng_for, AgentSpec, Colour, Signal, Vocabulary};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// One of the 27 stimuli: shape 1-3, colour, amount 1-3.
#[pyclass(name = "Stimulus", frozen, eq, hash, ord, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PyStimulus(domain::Stimulus);

#[pymethods]
impl PyStimulus {
    #[new]
    fn new(shape: u8, colour: &str, amount: u8) -> PyResult<Self> {
        let colour: Colour = colour.parse().map_err(value_err)?;
        domain::Stimulus::new(shape, colour, amount).map(Self).map_err(value_err)
    }

    #[getter]
    fn shape(&self) -> u8 {
        self.0.shape()
    }

    #[getter]
    fn colour(&self) -> &'static str {
        self.0.colour().as_str()
    }

    #[getter]
    fn amount(&self) -> u8 {
        self.0.amount()
    }

    #[getter]
    fn index(&self) -> usize {
        self.0.canonical_index()
    }

    fn __repr__(&self) -> String {
        format!("Stimulus({}, '{}', {})", self.0.shape(), self.0.colour(), self.0.amount())
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

type Pairs = Vec<(PyStimulus, String)>;

fn to_pairs(pairs: Pairs) -> PyResult<Vec<(domain::Stimulus, Signal)>> {
    pairs
        .into_iter()
        .map(|(s, w)| Ok((s.0, Signal::new(w).map_err(value_err)?)))
        .collect()
}

fn from_vocab(v: &Vocabulary) -> Pairs {
    v.pairs().into_iter().map(|(s, w)| (PyStimulus(s), w.as_str().to_string())).collect()
}

fn permutation_mode(permutations: Option<usize>, exhaustive: bool) -> PermutationMode {
    match (exhaustive, permutations) {
        (true, _) => PermutationMode::Exhaustive,
        (false, Some(n)) => PermutationMode::Sampled(n),
        (false, None) => PermutationMode::default(),
    }
}

fn genscore_pairs(name: &str) -> PyResult<GenScorePairs> {
    match name {
        "cross-pairs" => Ok(GenScorePairs::CrossPairs),
        "all-pairs" => Ok(GenScorePairs::AllPairs),
        other => Err(PyValueError::new_err(format!("unknown pair set '{other}'"))),
    }
}

/// All 27 stimuli in canonical order.
#[pyfunction]
fn enumerate_stimuli() -> Vec<PyStimulus> {
    domain::enumerate_stimuli().into_iter().map(PyStimulus).collect()
}

/// Balanced 15/12 train/test split drawn from the "split" stream of `seed`.
#[pyfunction]
fn sample_training_set(seed: u64) -> (Vec<PyStimulus>, Vec<PyStimulus>) {
    let split = domain::sample_training_set(&mut rng_for(seed, "split"));
    (
        split.train.into_iter().map(PyStimulus).collect(),
        split.test.into_iter().map(PyStimulus).collect(),
    )
}

/// Parses vocabulary text into (stimulus, signal) pairs.
#[pyfunction]
fn parse_vocab(text: &str) -> PyResult<Pairs> {
    let doc = parse_vocabulary(text).map_err(value_err)?;
    Ok(from_vocab(&doc.vocabulary))
}

#[pyfunction]
fn render_vocab(pairs: Pairs) -> PyResult<String> {
    let vocab = Vocabulary::from_pairs(to_pairs(pairs)?).map_err(value_err)?;
    Ok(render_vocabulary(&vocab, false))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

#[pyfunction]
fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    metrics::normalized_levenshtein(a, b)
}

/// Mantel-test TopSim. Sampled when `permutations` is given, exhaustive on
/// request, otherwise the default automatic mode.
#[pyfunction]
#[pyo3(signature = (pairs, seed=0, permutations=None, exhaustive=false))]
fn topsim<'py>(
    py: Python<'py>,
    pairs: Pairs,
    seed: u64,
    permutations: Option<usize>,
    exhaustive: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let pairs = to_pairs(pairs)?;
    let mode = permutation_mode(permutations, exhaustive);
    let r = metrics::topsim_pairs(&pairs, mode, &mut rng_for(seed, "topsim")).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("z", r.z_score)?;
    d.set_item("p", r.p_value)?;
    d.set_item("r", r.observed_r)?;
    d.set_item("permutations", r.permutations)?;
    d.set_item("exhaustive", r.exhaustive)?;
    Ok(d)
}

#[pyfunction]
fn ngram_diversity(signals: Vec<String>) -> PyResult<f64> {
    metrics::ngram_diversity(&signals).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (train, test, pairs="cross-pairs"))]
fn generalization_score(train: Pairs, test: Pairs, pairs: &str) -> PyResult<f64> {
    metrics::generalization_score_with(&to_pairs(train)?, &to_pairs(test)?, genscore_pairs(pairs)?)
        .map_err(value_err)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&x, &y).map_err(value_err)
}

/// Paired t-test; returns (t, two-sided p, df).
#[pyfunction]
fn paired_t_test(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let t = metrics::paired_t_test(&x, &y).map_err(value_err)?;
    Ok((t.t, t.p, t.df))
}

/// A finished offline simulation.
#[pyclass(name = "Simulation", frozen)]
pub struct PySimulation(langevo::SimulationResult);

#[pymethods]
impl PySimulation {
    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn complete(&self) -> bool {
        matches!(self.0.status, RunStatus::Complete)
    }

    /// Rows of (block, round, agent, metric, value).
    fn metrics(&self) -> Vec<(String, Option<usize>, String, String, f64)> {
        self.0
            .metrics
            .iter()
            .map(|m| (m.block.clone(), m.round, m.agent.clone(), m.metric.clone(), m.value))
            .collect()
    }

    #[pyo3(signature = (block, metric, agent=None, round=None))]
    fn metric(&self, block: &str, metric: &str, agent: Option<&str>, round: Option<usize>) -> Option<f64> {
        self.0
            .metrics
            .iter()
            .find(|m| {
                m.block == block
                    && m.metric == metric
                    && agent.is_none_or(|a| a == m.agent)
                    && (round.is_none() || m.round == round)
            })
            .map(|m| m.value)
    }

    /// Vocabulary snapshot by file stem, e.g. "A-round-4".
    fn snapshot(&self, stem: &str) -> Option<Pairs> {
        self.0.snapshots.iter().find(|s| s.file_stem() == stem).map(|s| from_vocab(&s.vocabulary))
    }

    fn training_language(&self) -> Pairs {
        from_vocab(&self.0.training_language)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(runtime_err)
    }

    /// Writes a run directory that `replay` can verify.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        persist::write_run(&dir, &self.0, &persist::now_rfc3339(), &[]).map_err(runtime_err)?;
        Ok(())
    }
}

/// Runs one offline simulation with oracle or scripted agents.
#[pyfunction]
#[pyo3(signature = (agents=("oracle:lookup".to_string(), "oracle:lookup".to_string()), seed=0, permutations=None, rounds=4))]
fn simulate(
    py: Python<'_>,
    agents: (String, String),
    seed: u64,
    permutations: Option<usize>,
    rounds: usize,
) -> PyResult<PySimulation> {
    let specs: [AgentSpec; 2] = [agents.0.parse().map_err(value_err)?, agents.1.parse().map_err(value_err)?];
    if specs.iter().any(|s| s.needs_live_backend()) {
        return Err(PyValueError::new_err("live agents are only available through the CLI"));
    }
    let config = RunConfig {
        seed,
        rounds,
        agents: specs,
        permutations: permutations.map(PermutationMode::Sampled).unwrap_or_default(),
        ..RunConfig::default()
    };
    let result = py
        .detach(|| {
            let pair = build_agents(&config, None, &Default::default())?;
            run_simulation("sim-000", &config, pair, None, &EventLog::new())
        })
        .map_err(runtime_err)?;
    Ok(PySimulation(result))
}

/// Verifies a run directory. Returns (ok, metrics checked, snapshots
/// checked, mismatch descriptions).
#[pyfunction]
fn replay(py: Python<'_>, dir: PathBuf) -> PyResult<(bool, usize, usize, Vec<String>)> {
    let report = py.detach(|| persist::replay(&dir)).map_err(runtime_err)?;
    Ok((
        report.ok(),
        report.metrics_checked,
        report.snapshots_checked,
        report.mismatches.iter().map(|m| m.to_string()).collect(),
    ))
}

#[pymodule]
fn langevo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStimulus>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(enumerate_stimuli, m)?)?;
    m.add_function(wrap_pyfunction!(sample_training_set, m)?)?;
    m.add_function(wrap_pyfunction!(parse_vocab, m)?)?;
    m.add_function(wrap_pyfunction!(render_vocab, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(topsim, m)?)?;
    m.add_function(wrap_pyfunction!(ngram_diversity, m)?)?;
    m.add_function(wrap_pyfunction!(generalization_score, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
