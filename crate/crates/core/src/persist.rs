//! Run directories, versioned CSV exports and offline replay.
//!
//! A run directory holds:
//!
//! ```text
//! manifest.json     config, seed, versions, timestamps, status, sha256 of every other file
//! records.jsonl     one guessing/labelling/communication/testing record per line
//! events.jsonl      backend and oracle call log (when enabled)
//! metrics.csv       versioned long-format metric table
//! vocab/*.vocab     training language and per-agent snapshots
//! donor.json        chain generations only
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chains::{ChainRow, DonorChoice, GenerationRecord};
use crate::domain::{enumerate_stimuli, Vocabulary};
use crate::engine::{compute_metrics, MetricRow, Record, RunConfig, RunStatus, SimulationResult, VocabSnapshot};
use crate::error::PersistError;
use crate::format::{parse_vocabulary, render_vocabulary};
use crate::metrics::GenScorePairs;

pub const RUN_SCHEMA: &str = "langevo-run";
pub const METRICS_SCHEMA: &str = "langevo-metrics";
pub const CHAIN_SCHEMA: &str = "langevo-chain";
/// Major.minor of every schema written here. Readers accept any minor.
pub const SCHEMA_VERSION: &str = "1.0";
pub const MANIFEST: &str = "manifest.json";
pub const RECORDS: &str = "records.jsonl";
pub const EVENTS: &str = "events.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const DONOR: &str = "donor.json";
pub const TRAINING_VOCAB: &str = "vocab/training.vocab";
/// Absolute tolerance for replayed metric values.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub schema_version: String,
    pub artifact_version: String,
    pub id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub status: RunStatus,
    /// Snapshot file stems in creation order.
    pub snapshots: Vec<String>,
    /// Relative path → sha256 hex.
    pub files: BTreeMap<String, String>,
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(dir: &Path, rel: &str, bytes: &[u8]) -> Result<(), PersistError> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PersistError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| PersistError::io(&path, e))
}

fn read_string(path: &Path) -> Result<String, PersistError> {
    fs::read_to_string(path).map_err(|e| PersistError::io(path, e))
}

fn check_version(schema: &str, found_schema: &str, version: &str) -> Result<(), PersistError> {
    if found_schema != schema {
        return Err(PersistError::UnsupportedSchema(format!("expected {schema}, found {found_schema}")));
    }
    let expected_major = SCHEMA_VERSION.split('.').next().expect("version has a major part");
    if version.split('.').next() != Some(expected_major) {
        return Err(PersistError::UnsupportedSchema(format!("{schema} version {version}")));
    }
    Ok(())
}

fn header_fields(line: &str) -> BTreeMap<String, String> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number '{s}'"))
    }
}

/// Metric table with its schema line; the GenScore pair definition is part
/// of the header.
pub fn render_metrics_csv(rows: &[MetricRow], pairs: GenScorePairs) -> String {
    let mut out = format!(
        "# schema={METRICS_SCHEMA} version={SCHEMA_VERSION} genscore_pairs={}\n",
        pairs.as_str()
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "round", "agent", "metric", "value"]).expect("in-memory write");
    for r in rows {
        let round = r.round.map(|k| k.to_string()).unwrap_or_default();
        w.write_record([r.block.as_str(), round.as_str(), r.agent.as_str(), r.metric.as_str(), &r.value.to_string()])
            .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv"));
    out
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<(Vec<MetricRow>, GenScorePairs), PersistError> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let h = header_fields(first);
    check_version(
        METRICS_SCHEMA,
        h.get("schema").map_or("", String::as_str),
        h.get("version").map_or("", String::as_str),
    )?;
    let pairs = match h.get("genscore_pairs").map(String::as_str) {
        Some("all-pairs") => GenScorePairs::AllPairs,
        Some("cross-pairs") | None => GenScorePairs::CrossPairs,
        Some(other) => return Err(PersistError::parse(path, format!("unknown genscore_pairs '{other}'"))),
    };
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| PersistError::parse(path, e.to_string()))?;
        let bad = |m: &str| PersistError::parse(path, format!("line {}: {m}", i + 3));
        if rec.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        rows.push(MetricRow {
            block: rec[0].to_string(),
            round: if rec[1].is_empty() { None } else { Some(rec[1].parse().map_err(|_| bad("bad round"))?) },
            agent: rec[2].to_string(),
            metric: rec[3].to_string(),
            value: rec[4].parse().map_err(|_| bad("bad value"))?,
        });
    }
    Ok((rows, pairs))
}

pub fn render_chain_csv(rows: &[ChainRow]) -> String {
    let mut out = format!("# schema={CHAIN_SCHEMA} version={SCHEMA_VERSION}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "chain",
        "generation",
        "donor",
        "learnability",
        "perc_com",
        "topsim_z",
        "ngram_diversity",
        "unique_signal_ratio",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.chain.to_string(),
            r.generation.to_string(),
            r.donor.clone(),
            fmt_opt(r.learnability),
            fmt_opt(r.perc_com),
            fmt_opt(r.topsim_z),
            fmt_opt(r.ngram_diversity),
            fmt_opt(r.unique_signal_ratio),
        ])
        .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv"));
    out
}

pub fn parse_chain_csv(text: &str, path: &Path) -> Result<Vec<ChainRow>, PersistError> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let h = header_fields(first);
    check_version(
        CHAIN_SCHEMA,
        h.get("schema").map_or("", String::as_str),
        h.get("version").map_or("", String::as_str),
    )?;
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| PersistError::parse(path, e.to_string()))?;
        let bad = |m: String| PersistError::parse(path, format!("line {}: {m}", i + 3));
        if rec.len() != 8 {
            return Err(bad("expected 8 columns".into()));
        }
        let num = |k: usize| parse_opt(&rec[k]).map_err(bad);
        rows.push(ChainRow {
            chain: rec[0].parse().map_err(|_| bad("bad chain".into()))?,
            generation: rec[1].parse().map_err(|_| bad("bad generation".into()))?,
            donor: rec[2].to_string(),
            learnability: num(3)?,
            perc_com: num(4)?,
            topsim_z: num(5)?,
            ngram_diversity: num(6)?,
            unique_signal_ratio: num(7)?,
        });
    }
    Ok(rows)
}

fn snapshot_path(stem: &str) -> String {
    format!("vocab/{stem}.vocab")
}

fn snapshot_with_success(label: &str) -> bool {
    label != "testing"
}

/// Writes everything except the event log (streamed during the run) and
/// then the manifest, which digests every file present.
pub fn write_run(
    dir: &Path,
    result: &SimulationResult,
    started: &str,
    extra: &[(&str, Vec<u8>)],
) -> Result<RunManifest, PersistError> {
    fs::create_dir_all(dir).map_err(|e| PersistError::io(dir, e))?;
    let mut records = String::new();
    for r in result.records() {
        records.push_str(&serde_json::to_string(&r).expect("record serializes"));
        records.push('\n');
    }
    write(dir, RECORDS, records.as_bytes())?;
    write(dir, TRAINING_VOCAB, render_vocabulary(&result.training_language, false).as_bytes())?;
    for snap in &result.snapshots {
        let text = render_vocabulary(&snap.vocabulary, snapshot_with_success(&snap.label));
        write(dir, &snapshot_path(&snap.file_stem()), text.as_bytes())?;
    }
    write(dir, METRICS, render_metrics_csv(&result.metrics, result.config.genscore_pairs).as_bytes())?;
    for (rel, bytes) in extra {
        write(dir, rel, bytes)?;
    }
    let mut files = BTreeMap::new();
    let mut rels = vec![RECORDS.to_string(), TRAINING_VOCAB.to_string(), METRICS.to_string()];
    rels.extend(result.snapshots.iter().map(|s| snapshot_path(&s.file_stem())));
    rels.extend(extra.iter().map(|(r, _)| r.to_string()));
    if dir.join(EVENTS).exists() {
        rels.push(EVENTS.to_string());
    }
    for rel in rels {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| PersistError::io(&path, e))?;
        files.insert(rel, sha256_hex(&bytes));
    }
    let manifest = RunManifest {
        schema: RUN_SCHEMA.into(),
        schema_version: SCHEMA_VERSION.into(),
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        id: result.id.clone(),
        config: result.config.clone(),
        seed: result.config.seed,
        started: started.into(),
        finished: now_rfc3339(),
        status: result.status.clone(),
        snapshots: result.snapshots.iter().map(VocabSnapshot::file_stem).collect(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(dir, MANIFEST, json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, PersistError> {
    let path = dir.join(MANIFEST);
    let m: RunManifest =
        serde_json::from_str(&read_string(&path)?).map_err(|e| PersistError::parse(&path, e.to_string()))?;
    check_version(RUN_SCHEMA, &m.schema, &m.schema_version)?;
    Ok(m)
}

/// Checks every digest listed in the manifest.
pub fn verify_digests(dir: &Path, manifest: &RunManifest) -> Result<(), PersistError> {
    for (rel, expected) in &manifest.files {
        let path = dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| PersistError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(PersistError::DigestMismatch { file: rel.clone(), expected: expected.clone(), actual });
        }
    }
    Ok(())
}

fn read_vocab(dir: &Path, rel: &str) -> Result<Vocabulary, PersistError> {
    let path = dir.join(rel);
    parse_vocabulary(&read_string(&path)?)
        .map(|d| d.vocabulary)
        .map_err(|source| PersistError::Format { path, source })
}

/// Loads a run after verifying its digests. Metrics come from the stored
/// CSV, not recomputed.
pub fn read_run(dir: &Path) -> Result<(RunManifest, SimulationResult), PersistError> {
    let manifest = read_manifest(dir)?;
    verify_digests(dir, &manifest)?;
    let training_language = read_vocab(dir, TRAINING_VOCAB)?;
    let mut result = SimulationResult {
        id: manifest.id.clone(),
        config: manifest.config.clone(),
        status: manifest.status.clone(),
        split: crate::domain::TrainTestSplit {
            train: training_language.stimuli(),
            test: enumerate_stimuli().into_iter().filter(|s| !training_language.contains(s)).collect(),
        },
        training_language,
        guessing: Vec::new(),
        labelling: Vec::new(),
        interactions: Vec::new(),
        testing: Vec::new(),
        snapshots: Vec::new(),
        metrics: Vec::new(),
    };
    let path = dir.join(RECORDS);
    for (i, line) in read_string(&path)?.lines().enumerate() {
        let rec: Record =
            serde_json::from_str(line).map_err(|e| PersistError::parse(&path, format!("line {}: {e}", i + 1)))?;
        match rec {
            Record::Guessing(r) => result.guessing.push(r),
            Record::Labelling(r) => result.labelling.push(r),
            Record::Communication(r) => result.interactions.push(r),
            Record::Testing(r) => result.testing.push(r),
        }
    }
    for stem in &manifest.snapshots {
        let (agent, label) = stem
            .split_once('-')
            .ok_or_else(|| PersistError::parse(dir.join(MANIFEST), format!("bad snapshot name '{stem}'")))?;
        result.snapshots.push(VocabSnapshot {
            agent: agent.into(),
            label: label.into(),
            vocabulary: read_vocab(dir, &snapshot_path(stem))?,
        });
    }
    let path = dir.join(METRICS);
    result.metrics = parse_metrics_csv(&read_string(&path)?, &path)?.0;
    Ok((manifest, result))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub block: String,
    pub round: Option<usize>,
    pub agent: String,
    pub metric: String,
    pub stored: Option<f64>,
    pub recomputed: Option<f64>,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let round = self.round.map(|k| format!(" round {k}")).unwrap_or_default();
        let show = |v: Option<f64>| v.map_or("missing".to_string(), |x| x.to_string());
        write!(
            f,
            "{} {}{round} agent {}: stored {} vs recomputed {}",
            self.metric,
            self.block,
            self.agent,
            show(self.stored),
            show(self.recomputed)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub id: String,
    pub metrics_checked: usize,
    pub snapshots_checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Rebuilds each round snapshot from the labelled vocabularies and the
/// interaction records; returns the labels that disagree.
fn replay_snapshots(result: &SimulationResult) -> (usize, Vec<Mismatch>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for agent in crate::engine::AGENT_IDS {
        let Some(mut vocab) = result.snapshot(agent, "labelled").cloned() else { continue };
        let mut rounds: Vec<usize> = result.interactions.iter().map(|i| i.round).collect();
        rounds.dedup();
        for round in rounds {
            for i in result.interactions.iter().filter(|i| i.round == round) {
                if let Some(signal) = &i.signal {
                    vocab.upsert(i.stimulus, signal.clone(), i.success);
                }
            }
            let label = format!("round-{round}");
            if let Some(stored) = result.snapshot(agent, &label) {
                checked += 1;
                if stored.canonical() != vocab.canonical() {
                    bad.push(Mismatch {
                        block: "communication".into(),
                        round: Some(round),
                        agent: agent.into(),
                        metric: "vocabulary".into(),
                        stored: None,
                        recomputed: None,
                    });
                }
            }
        }
    }
    (checked, bad)
}

/// Verifies digests, rebuilds vocabularies from the records and recomputes
/// every metric. No backend is touched.
pub fn replay(dir: &Path) -> Result<ReplayReport, PersistError> {
    let (manifest, stored) = read_run(dir)?;
    let path = dir.join(METRICS);
    let (_, pairs) = parse_metrics_csv(&read_string(&path)?, &path)?;
    if pairs != stored.config.genscore_pairs {
        return Err(PersistError::parse(&path, "genscore_pairs header disagrees with the manifest"));
    }
    let recomputed = compute_metrics(&stored).map_err(|e| PersistError::parse(dir, e.to_string()))?;
    let key = |r: &MetricRow| (r.block.clone(), r.round, r.agent.clone(), r.metric.clone());
    let a: BTreeMap<_, f64> = stored.metrics.iter().map(|r| (key(r), r.value)).collect();
    let b: BTreeMap<_, f64> = recomputed.iter().map(|r| (key(r), r.value)).collect();
    let mut mismatches = Vec::new();
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).cloned().collect();
    for k in &keys {
        let (x, y) = (a.get(k).copied(), b.get(k).copied());
        let same = match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() <= REPLAY_TOLERANCE || (x.is_nan() && y.is_nan()),
            _ => false,
        };
        if !same {
            mismatches.push(Mismatch {
                block: k.0.clone(),
                round: k.1,
                agent: k.2.clone(),
                metric: k.3.clone(),
                stored: x,
                recomputed: y,
            });
        }
    }
    let (snapshots_checked, bad) = replay_snapshots(&stored);
    mismatches.extend(bad);
    Ok(ReplayReport { id: manifest.id, metrics_checked: keys.len(), snapshots_checked, mismatches })
}

pub fn generation_dir(chain_dir: &Path, generation: usize) -> PathBuf {
    chain_dir.join(format!("gen-{generation:02}"))
}

pub fn write_generation(chain_dir: &Path, record: &GenerationRecord, started: &str) -> Result<RunManifest, PersistError> {
    let donor = serde_json::to_vec_pretty(&record.donor).expect("donor serializes");
    write_run(&generation_dir(chain_dir, record.generation), &record.result, started, &[(DONOR, donor)])
}

/// Complete generations found on disk, in order, stopping at the first
/// that is missing, incomplete or fails its digests.
pub fn load_completed_generations(chain_dir: &Path) -> Result<Vec<GenerationRecord>, PersistError> {
    let mut out = Vec::new();
    loop {
        let dir = generation_dir(chain_dir, out.len());
        if !dir.join(MANIFEST).exists() {
            break;
        }
        let (manifest, result) = match read_run(&dir) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}: not resumable ({e}); rerunning from here", dir.display());
                break;
            }
        };
        if manifest.status != RunStatus::Complete || !manifest.files.contains_key(DONOR) {
            break;
        }
        let path = dir.join(DONOR);
        let donor: DonorChoice =
            serde_json::from_str(&read_string(&path)?).map_err(|e| PersistError::parse(&path, e.to_string()))?;
        let transmitted = Vocabulary::from_pairs(result.testing_pairs(&donor.donor))
            .map_err(|e| PersistError::parse(&dir, e.to_string()))?;
        out.push(GenerationRecord { generation: out.len(), result, donor, transmitted });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_round_trip_and_version_gate() {
        let rows = vec![
            MetricRow { block: "communication".into(), round: Some(2), agent: "dyad".into(), metric: "perc_com".into(), value: 0.9333333333333333 },
            MetricRow { block: "testing".into(), round: None, agent: "A".into(), metric: "gen_score".into(), value: -0.125 },
        ];
        let text = render_metrics_csv(&rows, GenScorePairs::AllPairs);
        assert!(text.starts_with("# schema=langevo-metrics version=1.0 genscore_pairs=all-pairs\n"));
        let p = Path::new("m.csv");
        assert_eq!(parse_metrics_csv(&text, p).unwrap(), (rows, GenScorePairs::AllPairs));
        let future = text.replace("version=1.0", "version=2.0");
        assert!(matches!(parse_metrics_csv(&future, p), Err(PersistError::UnsupportedSchema(_))));
        let minor = text.replace("version=1.0", "version=1.7");
        assert!(parse_metrics_csv(&minor, p).is_ok());
    }

    #[test]
    fn chain_csv_round_trip() {
        let rows = vec![ChainRow {
            chain: 0,
            generation: 3,
            donor: "B".into(),
            learnability: Some(0.25),
            perc_com: None,
            topsim_z: Some(4.5),
            ngram_diversity: Some(0.5),
            unique_signal_ratio: Some(1.0),
        }];
        let text = render_chain_csv(&rows);
        assert_eq!(parse_chain_csv(&text, Path::new("c.csv")).unwrap(), rows);
        assert!(parse_chain_csv(&text.replace("version=1.0", "version=3.1"), Path::new("c.csv")).is_err());
    }
}
