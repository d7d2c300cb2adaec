use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn langevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langevo")).args(args).output().expect("binary runs")
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn simulate(out: &Path, agents: &str, seed: &str) -> Output {
    langevo(&["simulate", "--agents", agents, "--seed", seed, "--permutations", "200", "--out", out.to_str().unwrap()])
}

#[test]
fn simulate_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = simulate(&out, "oracle:compositional", "4");
    assert!(o.status.success(), "{}", stderr(&o));
    let run = out.join("sim-000");
    for file in ["manifest.json", "records.jsonl", "events.jsonl", "metrics.csv", "vocab/training.vocab", "vocab/B-testing.vocab"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    assert!(out.join("config.toml").exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# schema=langevo-metrics version=1.0 genscore_pairs=cross-pairs\nblock,round,agent,metric,value\n"));
    assert!(metrics.contains("communication,4,dyad,perc_com,1\n"));
}

#[test]
fn seeds_make_runs_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(simulate(&a, "scripted:hashed", "11").status.success());
    assert!(simulate(&b, "scripted:hashed", "11").status.success());
    assert!(simulate(&c, "scripted:hashed", "12").status.success());
    let read = |d: &PathBuf| fs::read(d.join("sim-000/metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn several_simulations_run_in_parallel() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let o = langevo(&[
        "simulate", "--count", "3", "--workers", "2", "--agents", "oracle:lookup", "--permutations", "100", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..3 {
        assert!(out.join(format!("sim-{i:03}/manifest.json")).exists());
    }
    let r = langevo(&["replay", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stdout(&r));
}

#[test]
fn replay_flags_tampering_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    assert!(simulate(&out, "oracle:lookup", "1").status.success());
    let records = out.join("sim-000/records.jsonl");
    let text = fs::read_to_string(&records).unwrap().replacen("\"success\":true", "\"success\":false", 1);
    fs::write(&records, text).unwrap();
    let r = langevo(&["replay", out.join("sim-000").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3), "{}{}", stdout(&r), stderr(&r));
}

#[test]
fn metrics_command_reports_table_one() {
    let o = langevo(&["metrics", &data("table1_train.vocab"), &data("table1_test.vocab"), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let z = v["topsim"]["z_score"].as_f64().unwrap();
    assert!((z - 7.13).abs() < 0.5, "z = {z}");
    assert!((v["gen_score"].as_f64().unwrap() - 0.5832).abs() < 1e-4);
}

#[test]
fn validation_errors_exit_1_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let vocab = tmp.path().join("bad.vocab");
    fs::write(&vocab, "{'shape':1,'colour':'blue','amount':1,'word':'gigi'}\n{'shape':2,'colour':'mauve','amount':1,'word':'gogo'}\n").unwrap();
    let o = langevo(&["metrics", vocab.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let one = tmp.path().join("one.vocab");
    fs::write(&one, "{'shape':1,'colour':'blue','amount':1,'word':'gigi'}\n").unwrap();
    assert_eq!(langevo(&["metrics", one.to_str().unwrap()]).status.code(), Some(1));

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n\n[run]\nrounds = \"many\"\n").unwrap();
    let o = langevo(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('4'), "{}", stderr(&o));

    assert_eq!(langevo(&["simulate", "--agents", "oracle:telepathic"]).status.code(), Some(1));
}

#[test]
fn live_agents_without_a_backend_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = langevo(&["simulate", "--agents", "llm", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn chains_resume_and_accept_imported_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("chains");
    let out_s = out.to_str().unwrap();
    let base = ["--agents", "oracle:lookup", "--chains", "2", "--permutations", "100", "--seed", "5", "--out", out_s];
    let first = langevo(&[&["chain", "--generations", "2"][..], &base[..]].concat());
    assert!(first.status.success(), "{}", stderr(&first));
    let before = fs::read(out.join("chain-00/gen-01/metrics.csv")).unwrap();
    let second = langevo(&[&["chain", "--generations", "3", "--resume"][..], &base[..]].concat());
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(fs::read(out.join("chain-00/gen-01/metrics.csv")).unwrap(), before);
    assert!(out.join("chain-01/gen-02/donor.json").exists());
    let csv = fs::read_to_string(out.join("chains.csv")).unwrap();
    assert!(csv.starts_with("# schema=langevo-chain version=1.0"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 3);

    let seeds = tmp.path().join("seeds");
    assert!(simulate(&seeds, "oracle:compositional", "9").status.success());
    let imported = tmp.path().join("imported");
    let o = langevo(&[
        "chain", "--agents", "oracle:lookup", "--chains", "1", "--generations", "2", "--permutations", "100",
        "--seed-from", seeds.to_str().unwrap(), "--out", imported.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = langevo(&["replay", imported.join("chain-00/gen-00").to_str().unwrap(), imported.join("chain-00/gen-01").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stdout(&r));
}
