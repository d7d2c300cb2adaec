use std::collections::BTreeMap;

use langevo::backend::EventLog;
use langevo::domain::{enumerate_stimuli, sample_training_set};
use langevo::engine::{build_agents, schedule_round, FailureMode};
use langevo::format::render_attributes;
use langevo::metrics::PermutationMode;
use langevo::prompts::Instructions;
use langevo::{rng_for, run_simulation, AgentSpec, RunConfig, SimulationResult};
use proptest::prelude::*;

fn config(seed: u64, a: AgentSpec, b: AgentSpec) -> RunConfig {
    RunConfig { seed, agents: [a, b], permutations: PermutationMode::Sampled(200), ..RunConfig::default() }
}

fn run_logged(config: &RunConfig) -> (SimulationResult, EventLog) {
    let log = EventLog::new();
    let agents = build_agents(config, None, &Instructions::default()).unwrap();
    let result = run_simulation("sim-000", config, agents, None, &log).unwrap();
    (result, log)
}

fn run(config: &RunConfig) -> SimulationResult {
    run_logged(config).0
}

#[test]
fn scripted_runs_are_deterministic() {
    let cfg = config(11, AgentSpec::ScriptedHashed, AgentSpec::ScriptedHashed);
    let a = run(&cfg);
    let b = run(&cfg);
    assert!(a.is_complete());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = run(&config(12, AgentSpec::ScriptedHashed, AgentSpec::ScriptedHashed));
    assert_ne!(a.training_language, c.training_language);
}

#[test]
fn block_sizes_follow_the_protocol() {
    let r = run(&config(3, AgentSpec::ScriptedHashed, AgentSpec::Lookup));
    assert_eq!(r.split.train.len(), 15);
    assert_eq!(r.split.test.len(), 12);
    assert_eq!(r.guessing.len(), 30);
    assert_eq!(r.labelling.len(), 30);
    assert_eq!(r.interactions.len(), 4 * 30);
    assert_eq!(r.testing.len(), 2 * 27);
    for i in &r.interactions {
        assert_eq!(i.candidates.len(), 4);
        assert!(i.candidates.contains(&i.stimulus));
        assert!(i.candidates.iter().all(|c| r.split.train.contains(c)));
        assert_ne!(i.speaker, i.listener);
    }
    let labels: Vec<String> = r.snapshots.iter().map(|s| s.file_stem()).collect();
    for agent in ["A", "B"] {
        for label in ["labelled", "round-1", "round-2", "round-3", "round-4", "testing"] {
            assert!(labels.contains(&format!("{agent}-{label}")), "missing {agent}-{label}");
        }
    }
}

#[test]
fn each_agent_speaks_each_training_stimulus_once_per_round() {
    let r = run(&config(5, AgentSpec::Lookup, AgentSpec::Lookup));
    for round in 1..=4 {
        for agent in ["A", "B"] {
            let mut spoken: Vec<_> = r
                .interactions
                .iter()
                .filter(|i| i.round == round && i.speaker == agent)
                .map(|i| i.stimulus)
                .collect();
            spoken.sort();
            let mut train = r.split.train.clone();
            train.sort();
            assert_eq!(spoken, train, "round {round} speaker {agent}");
        }
    }
}

#[test]
fn compositional_pair_communicates_perfectly() {
    let r = run(&config(9, AgentSpec::Compositional, AgentSpec::Compositional));
    for k in 1..=4 {
        assert_eq!(r.perc_com(k), Some(1.0));
    }
    assert!(r.metric("labelling", None, "A", "learnability").unwrap() > 0.0);
    let z = r.metric("testing", None, "A", "topsim_z").unwrap();
    assert!(z > 5.0, "z = {z}");
}

#[test]
fn lookup_oracles_reproduce_the_training_language() {
    let r = run(&config(4, AgentSpec::Lookup, AgentSpec::Lookup));
    assert_eq!(r.learnability(), Some(0.0));
    assert!(r.guessing.iter().all(|g| g.correct));
    for agent in ["A", "B"] {
        assert_eq!(r.snapshot(agent, "labelled").unwrap().canonical(), r.training_language.canonical());
    }
}

#[test]
fn random_chooser_is_near_chance() {
    let mut hits = 0;
    let mut total = 0;
    for seed in 0..10 {
        let r = run(&config(seed, AgentSpec::RandomChooser, AgentSpec::RandomChooser));
        hits += r.interactions.iter().filter(|i| i.success).count();
        total += r.interactions.len();
    }
    let rate = hits as f64 / total as f64;
    assert!((rate - 0.25).abs() < 0.05, "rate = {rate}");
}

#[test]
fn speaking_and_testing_prompts_hide_the_target_line() {
    let (r, log) = run_logged(&config(21, AgentSpec::ScriptedHashed, AgentSpec::ScriptedHashed));
    assert!(r.is_complete());
    let mut checked = BTreeMap::new();
    for ev in log.events() {
        if ev.kind != "complete" || (ev.task != "speaking" && ev.task != "testing") {
            continue;
        }
        let prompt = ev.prompt.as_deref().expect("prompt logged");
        let (context, stem) = prompt.rsplit_once('\n').unwrap();
        let attrs = stem.trim_start_matches('{').trim_end_matches(",'word':'");
        assert!(!context.contains(attrs), "target {attrs} visible in {} prompt", ev.task);
        *checked.entry(ev.task.clone()).or_insert(0) += 1;
    }
    assert_eq!(checked.get("speaking"), Some(&120));
    assert_eq!(checked.get("testing"), Some(&54));
}

#[test]
fn labelling_prompts_show_the_target_line() {
    let (_, log) = run_logged(&config(22, AgentSpec::ScriptedHashed, AgentSpec::Lookup));
    let mut n = 0;
    for ev in log.events().iter().filter(|e| e.kind == "complete" && e.task == "labelling") {
        let prompt = ev.prompt.as_deref().unwrap();
        let (context, stem) = prompt.rsplit_once('\n').unwrap();
        let attrs = stem.trim_start_matches('{').trim_end_matches(",'word':'");
        assert!(context.contains(attrs));
        n += 1;
    }
    assert_eq!(n, 15);
}

#[test]
fn constant_speaker_collapses_the_vocabulary() {
    let r = run(&config(2, AgentSpec::ScriptedConst("gigi".into()), AgentSpec::ScriptedConst("gigi".into())));
    assert!(r.is_complete());
    let v = r.final_vocabulary("A").unwrap();
    assert!(v.entries().iter().all(|e| e.signal.as_str() == "gigi"));
    assert_eq!(r.metric("testing", None, "A", "unique_signal_ratio"), Some(1.0 / 27.0));
}

#[test]
fn unparseable_replies_are_failed_productions() {
    let r = run(&config(2, AgentSpec::ScriptedConst("42".into()), AgentSpec::Lookup));
    assert!(r.is_complete());
    let a_labels: Vec<_> = r.labelling.iter().filter(|l| l.agent == "A").collect();
    assert!(a_labels.iter().all(|l| l.failure_mode == FailureMode::FailedProduction));
    assert!(r.interactions.iter().filter(|i| i.speaker == "A").all(|i| !i.success && i.signal.is_none()));
}

#[test]
fn transient_backend_failure_marks_the_run_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flaky.toml");
    std::fs::write(&path, "hashed_completions = true\nhashed_scores = true\ntransient_failures = 1000\n").unwrap();
    let spec: AgentSpec = format!("scripted:{}", path.display()).parse().unwrap();
    let r = run(&config(1, spec, AgentSpec::Lookup));
    assert!(!r.is_complete());
}

#[test]
fn oracle_and_training_split_use_labelled_streams() {
    let cfg = config(77, AgentSpec::Lookup, AgentSpec::Lookup);
    let r = run(&cfg);
    let split = sample_training_set(&mut rng_for(77, "split"));
    assert_eq!(r.split, split);
    assert_eq!(r.training_language.stimuli().len(), 15);
    assert!(r.split.test.iter().all(|s| !r.training_language.contains(s)));
    assert_eq!(r.split.train.len() + r.split.test.len(), enumerate_stimuli().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedule_is_balanced(seed in any::<u64>()) {
        let split = sample_training_set(&mut rng_for(seed, "split"));
        let tasks = schedule_round(&split.train, &mut rng_for(seed, "schedule"));
        prop_assert_eq!(tasks.len(), 30);
        for speaker in 0..2 {
            let mut mine: Vec<_> = tasks.iter().filter(|t| t.speaker == speaker).map(|t| t.stimulus).collect();
            mine.sort();
            let mut train = split.train.clone();
            train.sort();
            prop_assert_eq!(mine, train);
        }
        for (k, t) in tasks.iter().enumerate() {
            prop_assert_eq!(t.speaker, k % 2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn dyad_vocabularies_agree_after_every_round(seed in any::<u64>()) {
        let r = run(&config(seed, AgentSpec::ScriptedHashed, AgentSpec::ScriptedHashed));
        prop_assert!(r.is_complete());
        for k in 1..=4 {
            let label = format!("round-{k}");
            let a = r.snapshot("A", &label).unwrap().canonical();
            let b = r.snapshot("B", &label).unwrap().canonical();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn testing_covers_every_stimulus(seed in any::<u64>()) {
        let r = run(&config(seed, AgentSpec::Compositional, AgentSpec::Lookup));
        for agent in ["A", "B"] {
            let stimuli: Vec<_> = r.testing.iter().filter(|t| t.agent == agent).map(|t| t.stimulus).collect();
            prop_assert_eq!(stimuli.len(), 27);
            let mut sorted = stimuli.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), 27);
            for t in r.testing.iter().filter(|t| t.agent == agent) {
                prop_assert_eq!(t.in_train, r.split.train.contains(&t.stimulus));
                prop_assert!(!t.in_train || !t.extrapolated);
            }
        }
    }
}

#[test]
fn attribute_rendering_matches_stems() {
    let s = enumerate_stimuli()[5];
    let attrs = render_attributes(&s);
    assert!(attrs.starts_with("'shape':"));
}

#[test]
fn repair_oracles_raise_topsim_across_rounds() {
    for seed in 0..4 {
        let r = run(&config(seed, AgentSpec::Repair(2), AgentSpec::Repair(2)));
        let z = |k: usize| r.metric("communication", Some(k), "A", "topsim_z").unwrap();
        assert!(z(4) > z(1), "seed {seed}: {} -> {}", z(1), z(4));
    }
}
