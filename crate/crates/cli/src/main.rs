use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use langevo::agents::{Agent, AgentSpec};
use langevo::backend::{BackendClient, ChatTemplate, EventLog, HttpBackend};
use langevo::chains::{paired_generation_test, ChainOrigin, ChainRow, ChainRunner, ChainSink, GenerationRecord};
use langevo::config::ExperimentConfig;
use langevo::domain::{generate_language, sample_training_set};
use langevo::engine::{
    build_agents, guessing_accuracy, run_guessing_block, run_labelling_block, run_simulation, BlockCtx,
    SimulationResult,
};
use langevo::format::parse_vocabulary;
use langevo::metrics::{
    generalization_score_with, mean_signal_length, ngram_diversity, topsim_mantel, GenScorePairs, PermutationMode,
};
use langevo::persist::{self, MANIFEST};
use langevo::{derive_seed, rng_for, EngineError, MetricError, PersistError, Vocabulary};
use rand::Rng;
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "langevo", version, about = "Language-evolution simulations with LLM or oracle agents")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run independent dyad simulations.
    Simulate(SimulateArgs),
    /// Run iterated-learning transmission chains.
    Chain(ChainArgs),
    /// Score vocabulary files (train, optionally test).
    Metrics(MetricsArgs),
    /// Verify run directories offline.
    Replay(ReplayArgs),
    /// Run guessing and labelling against the configured backend and report
    /// the observed values.
    Probe(ProbeArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Two agent specs, e.g. `oracle:lookup,oracle:lookup` or `llm,llm`.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Mantel permutations (exhaustive below 8 items).
    #[arg(long)]
    permutations: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of simulations.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct ChainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    /// Simulation directories (or folders of them) to import as generation 0.
    #[arg(long)]
    seed_from: Vec<PathBuf>,
    /// Continue each chain after its last complete generation on disk.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Training vocabulary file.
    train: PathBuf,
    /// Test vocabulary file; enables GenScore.
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cross-pairs", value_parser = parse_pairs)]
    genscore_pairs: GenScorePairs,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run directories, or folders containing them.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_pairs(s: &str) -> Result<GenScorePairs, String> {
    match s {
        "cross-pairs" => Ok(GenScorePairs::CrossPairs),
        "all-pairs" => Ok(GenScorePairs::AllPairs),
        _ => Err("expected cross-pairs or all-pairs".into()),
    }
}

/// Exit status classes: 1 validation, 2 runtime, 3 verification.
enum Failure {
    Validation(String),
    Runtime(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Domain(_) | EngineError::Metric(_) => Failure::Validation(e.to_string()),
            EngineError::BackendExhausted { .. } => Failure::Runtime(e.to_string()),
            EngineError::Persist(p) => p.into(),
        }
    }
}

impl From<PersistError> for Failure {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Io { .. } => Failure::Runtime(e.to_string()),
            PersistError::DigestMismatch { .. } => Failure::Verification(e.to_string()),
            PersistError::Format { .. } | PersistError::Parse { .. } | PersistError::UnsupportedSchema(_) => {
                Failure::Validation(e.to_string())
            }
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.run.seed = seed;
    }
    if let Some(agents) = &common.agents {
        let specs: Vec<AgentSpec> = agents
            .iter()
            .map(|a| a.parse::<AgentSpec>())
            .collect::<Result<_, _>>()
            .map_err(Failure::Validation)?;
        cfg.run.agents = match specs.as_slice() {
            [one] => [one.clone(), one.clone()],
            [a, b] => [a.clone(), b.clone()],
            _ => return Err(Failure::Validation("--agents takes one or two specs".into())),
        };
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(p) = common.permutations {
        cfg.run.permutations = PermutationMode::Auto(p);
    }
    Ok(cfg)
}

/// Client for `llm` agents, after checking credentials.
fn live_client(cfg: &ExperimentConfig, required: bool) -> Result<Option<Arc<BackendClient>>, Failure> {
    if !required {
        return Ok(None);
    }
    let desc = cfg
        .backend
        .clone()
        .ok_or_else(|| Failure::Validation("llm agents need a [backend] section in the config".into()))?;
    desc.api_key().map_err(|e| Failure::Validation(format!("backend credential: {e}")))?;
    let template = match &desc.template {
        Some(path) => ChatTemplate::load(path)?,
        None => ChatTemplate::plain(),
    };
    let backend = HttpBackend::new(desc.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    Ok(Some(Arc::new(BackendClient::new(Arc::new(backend), desc, template))))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| PersistError::io(dir, e).into())
}

fn event_log(dir: &Path, enabled: bool) -> Result<EventLog, Failure> {
    create_dir(dir)?;
    if enabled {
        Ok(EventLog::with_file(&dir.join(persist::EVENTS))?)
    } else {
        Ok(EventLog::new())
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn simulate_one(
    id: &str,
    cfg: &ExperimentConfig,
    live: Option<&Arc<BackendClient>>,
) -> Result<SimulationResult, Failure> {
    let mut run = cfg.run.clone();
    run.seed = derive_seed(cfg.seed, id);
    let dir = cfg.output.join(id);
    let log = event_log(&dir, cfg.export.events)?;
    let agents = build_agents(&run, live, &cfg.instructions)?;
    let started = persist::now_rfc3339();
    let result = run_simulation(id, &run, agents, None, &log)?;
    log.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    persist::write_run(&dir, &result, &started, &[])?;
    Ok(result)
}

fn write_config_snapshot(cfg: &ExperimentConfig) -> Result<(), Failure> {
    create_dir(&cfg.output)?;
    let path = cfg.output.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| PersistError::io(&path, e).into())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.count {
        cfg.count = n;
    }
    cfg.validate()?;
    let live = live_client(&cfg, cfg.needs_backend())?;
    write_config_snapshot(&cfg)?;
    let ids: Vec<String> = (0..cfg.count).map(|i| format!("sim-{i:03}")).collect();
    let results: Vec<Result<SimulationResult, Failure>> =
        pool(cfg.workers)?.install(|| ids.par_iter().map(|id| simulate_one(id, &cfg, live.as_ref())).collect());

    println!(
        "{:<8} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>7} {:>7}",
        "run", "status", "guessA", "guessB", "learn", "com1", "com2", "com3", "topsimA", "topsimB", "genA", "genB"
    );
    let mut incomplete = 0;
    for (id, r) in ids.iter().zip(&results) {
        match r {
            Ok(r) => {
                if !r.is_complete() {
                    incomplete += 1;
                }
                let com = |k| fmt(r.perc_com(k));
                println!(
                    "{:<8} {:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8} {:>7} {:>7}",
                    id,
                    if r.is_complete() { "complete" } else { "incomplete" },
                    fmt(r.metric("guessing", None, "A", "accuracy")),
                    fmt(r.metric("guessing", None, "B", "accuracy")),
                    fmt(r.learnability()),
                    com(1),
                    com(2),
                    com(3),
                    fmt(r.metric("testing", None, "A", "topsim_z")),
                    fmt(r.metric("testing", None, "B", "topsim_z")),
                    fmt(r.metric("testing", None, "A", "gen_score")),
                    fmt(r.metric("testing", None, "B", "gen_score")),
                );
            }
            Err(e) => println!("{id:<8} error: {}", e.message()),
        }
    }
    println!("results in {}", cfg.output.display());
    if let Some(e) = results.into_iter().find_map(Result::err) {
        return Err(e);
    }
    if incomplete > 0 {
        return Err(Failure::Runtime(format!("{incomplete} simulation(s) incomplete")));
    }
    Ok(())
}

/// Directories under `path` (or `path` itself) holding a manifest.
fn run_dirs(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.join(MANIFEST).exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Failure::from(PersistError::io(path, e)))?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    let mut out = Vec::new();
    for d in subdirs {
        out.extend(run_dirs(&d)?);
    }
    Ok(out)
}

/// Rows of one chain and the error that stopped it, if any.
type ChainReport = (Vec<ChainRow>, Option<String>);

struct DiskSink {
    chain_dir: PathBuf,
    events: bool,
    started: String,
}

impl ChainSink for DiskSink {
    fn event_log(&mut self, generation: usize) -> Result<EventLog, EngineError> {
        self.started = persist::now_rfc3339();
        let dir = persist::generation_dir(&self.chain_dir, generation);
        std::fs::create_dir_all(&dir).map_err(|e| PersistError::io(&dir, e))?;
        if self.events {
            Ok(EventLog::with_file(&dir.join(persist::EVENTS))?)
        } else {
            Ok(EventLog::new())
        }
    }

    fn generation_done(&mut self, record: &GenerationRecord) -> Result<(), EngineError> {
        persist::write_generation(&self.chain_dir, record, &self.started)?;
        Ok(())
    }

    fn generation_failed(&mut self, generation: usize, result: &SimulationResult) -> Result<(), EngineError> {
        persist::write_run(&persist::generation_dir(&self.chain_dir, generation), result, &self.started, &[])?;
        Ok(())
    }
}

fn cmd_chain(args: ChainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = args.chains {
        cfg.chain.chains = c;
    }
    if let Some(g) = args.generations {
        cfg.chain.generations = g;
    }
    cfg.validate()?;
    let live = live_client(&cfg, cfg.needs_backend())?;
    let mut imported = Vec::new();
    for path in &args.seed_from {
        for dir in run_dirs(path)? {
            let (_, result) = persist::read_run(&dir)?;
            if !result.is_complete() {
                return Err(Failure::Validation(format!("{} is not a complete simulation", dir.display())));
            }
            imported.push(result);
        }
    }
    if !args.seed_from.is_empty() && imported.is_empty() {
        return Err(Failure::Validation("--seed-from found no simulations".into()));
    }
    write_config_snapshot(&cfg)?;
    let runner = ChainRunner { config: &cfg.chain, base: &cfg.run, live: live.as_ref(), instructions: &cfg.instructions };
    let chain_ids: Vec<usize> = (0..cfg.chain.chains).collect();
    let outcomes: Vec<Result<ChainReport, Failure>> = pool(cfg.workers)?.install(|| {
        chain_ids
            .par_iter()
            .map(|&c| {
                let chain_id = format!("chain-{c:02}");
                let chain_dir = cfg.output.join(&chain_id);
                let completed = if args.resume { persist::load_completed_generations(&chain_dir)? } else { Vec::new() };
                if !completed.is_empty() {
                    log::info!("{chain_id}: resuming after generation {}", completed.len() - 1);
                }
                let origin = if imported.is_empty() {
                    ChainOrigin::Fresh
                } else {
                    let pick = rng_for(cfg.seed, &format!("{chain_id}/seed-from")).gen_range(0..imported.len());
                    ChainOrigin::Imported(Box::new(imported[pick].clone()))
                };
                let mut sink = DiskSink { chain_dir: chain_dir.clone(), events: cfg.export.events, started: String::new() };
                let outcome = runner.run(&chain_id, derive_seed(cfg.seed, &chain_id), origin, completed, &mut sink)?;
                let rows: Vec<ChainRow> = outcome.generations.iter().map(|g| g.row(c)).collect();
                let path = chain_dir.join("chain.csv");
                std::fs::write(&path, persist::render_chain_csv(&rows)).map_err(|e| PersistError::io(&path, e))?;
                let failed = outcome.failed.map(|r| format!("{chain_id}: {} stopped ({:?})", r.id, r.status));
                Ok((rows, failed))
            })
            .collect()
    });

    let mut all_rows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        let (rows, failed) = o?;
        all_rows.extend(rows);
        failures.extend(failed);
    }
    let path = cfg.output.join("chains.csv");
    std::fs::write(&path, persist::render_chain_csv(&all_rows)).map_err(|e| Failure::from(PersistError::io(&path, e)))?;
    println!(
        "{:<6} {:>4} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "chain", "gen", "donor", "learn", "perccom", "topsim", "ngram", "unique"
    );
    for r in &all_rows {
        println!(
            "{:<6} {:>4} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.chain,
            r.generation,
            r.donor,
            fmt(r.learnability),
            fmt(r.perc_com),
            fmt(r.topsim_z),
            fmt(r.ngram_diversity),
            fmt(r.unique_signal_ratio)
        );
    }
    let last = cfg.chain.generations - 1;
    if cfg.chain.chains >= 2 && last > 0 {
        for metric in ["learnability", "topsim_z", "ngram_diversity"] {
            match paired_generation_test(&all_rows, metric, 0, last) {
                Ok(t) => println!("{metric}: generation 0 vs {last}: t({}) = {:.3}, p = {:.4}", t.df, t.t, t.p),
                Err(e) => println!("{metric}: generation 0 vs {last}: {e}"),
            }
        }
    }
    println!("results in {}", cfg.output.display());
    if !failures.is_empty() {
        return Err(Failure::Runtime(failures.join("; ")));
    }
    Ok(())
}

fn read_vocab_file(path: &Path) -> Result<Vocabulary, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(PersistError::io(path, e)))?;
    parse_vocabulary(&text)
        .map(|d| d.vocabulary)
        .map_err(|source| PersistError::Format { path: path.into(), source }.into())
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), Failure> {
    let train = read_vocab_file(&args.train)?;
    let mut rng = rng_for(args.seed, "metrics");
    let topsim = topsim_mantel(&train, PermutationMode::Auto(args.permutations), &mut rng)?;
    let signals = train.signals();
    let ngram = ngram_diversity(&signals)?;
    let unique = langevo::metrics::unique_signal_ratio(&signals);
    let length = mean_signal_length(&signals);
    let gen = match &args.test {
        Some(path) => {
            let test = read_vocab_file(path)?;
            Some(generalization_score_with(&train.pairs(), &test.pairs(), args.genscore_pairs)?)
        }
        None => None,
    };
    if args.json {
        let value = serde_json::json!({
            "entries": train.len(),
            "topsim": topsim,
            "ngram_diversity": ngram,
            "unique_signal_ratio": unique,
            "mean_signal_length": length,
            "gen_score": gen,
            "genscore_pairs": args.genscore_pairs.as_str(),
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        println!("entries              {}", train.len());
        println!(
            "topsim_z             {:.4}  (p = {:.5}, r = {:.4}, {} permutations{})",
            topsim.z_score,
            topsim.p_value,
            topsim.observed_r,
            topsim.permutations,
            if topsim.exhaustive { ", exhaustive" } else { "" }
        );
        println!("ngram_diversity      {ngram:.4}");
        println!("unique_signal_ratio  {unique:.4}");
        println!("mean_signal_length   {length:.4}");
        if let Some(g) = gen {
            println!("gen_score            {g:.4}  ({})", args.genscore_pairs.as_str());
        }
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), Failure> {
    let mut dirs = Vec::new();
    for d in &args.dirs {
        dirs.extend(run_dirs(d)?);
    }
    if dirs.is_empty() {
        return Err(Failure::Validation("no run directories found".into()));
    }
    let mut bad = 0;
    for dir in &dirs {
        match persist::replay(dir) {
            Ok(report) if report.ok() => println!(
                "replay OK: {} ({} metrics, {} snapshots)",
                dir.display(),
                report.metrics_checked,
                report.snapshots_checked
            ),
            Ok(report) => {
                bad += 1;
                println!("replay MISMATCH: {}", dir.display());
                for m in &report.mismatches {
                    println!("  {m}");
                }
            }
            Err(e) => {
                bad += 1;
                println!("replay FAILED: {}: {e}", dir.display());
            }
        }
    }
    if bad > 0 {
        return Err(Failure::Verification(format!("{bad} of {} run(s) failed verification", dirs.len())));
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let client = live_client(&cfg, true)?.expect("required");
    let mut rng = rng_for(cfg.seed, "probe");
    let split = sample_training_set(&mut rng);
    let language = generate_language(&mut rng, &split.train).map_err(|e| Failure::Validation(e.to_string()))?;
    let mut agent = AgentSpec::Llm.build("A", &cfg.run.tables, Some(&client), &cfg.instructions, cfg.run.agent_retries)?;
    let dir = cfg.output.join("probe");
    let log = event_log(&dir, cfg.export.events)?;
    let ctx = BlockCtx { sim: "probe", log: &log };
    let guesses = run_guessing_block(&mut agent, &language, cfg.run.guessing_distractors, &ctx, &mut rng)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let labels = run_labelling_block(&mut agent, &language, &ctx, &mut rng).map_err(|e| Failure::Runtime(e.to_string()))?;
    log.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    report_probe(&agent, &guesses, &labels);
    println!("event log in {}", dir.display());
    Ok(())
}

fn report_probe(agent: &Agent, guesses: &[langevo::engine::GuessRecord], labels: &[langevo::engine::LabelRecord]) {
    let d: Vec<f64> = labels.iter().filter_map(|l| l.distance()).collect();
    let exact = labels.iter().filter(|l| l.distance() == Some(0.0)).count();
    println!("guessing accuracy      {}", fmt(guessing_accuracy(guesses)));
    println!("labelling distance     {}", fmt((!d.is_empty()).then(|| langevo::metrics::mean(&d))));
    println!("labelling exact        {exact}/{}", labels.len());
    println!("failed productions     {}", labels.len() - d.len());
    println!("learned vocabulary     {} entries", agent.vocabulary().len());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Chain(a) => cmd_chain(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Probe(a) => cmd_probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
