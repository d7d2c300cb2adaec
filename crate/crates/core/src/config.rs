//! Experiment configuration files (TOML).
//!
//! Credentials never live in the file: `api_key = "${VAR}"` under
//! `[backend]` is rewritten to `api_key_env = "VAR"` and read from the
//! environment at request time. No other interpolation happens.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::chains::ChainConfig;
use crate::engine::RunConfig;
use crate::error::{EngineError, FormatError};
use crate::prompts::Instructions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Simulate,
    Chain,
    Metrics,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    /// Write events.jsonl next to each run.
    pub events: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { events: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every simulation and chain derives its own from it.
    pub seed: u64,
    pub mode: Mode,
    pub output: PathBuf,
    /// Independent simulations for `simulate`.
    pub count: usize,
    /// Simulations or chains run concurrently.
    pub workers: usize,
    pub run: RunConfig,
    pub chain: ChainConfig,
    pub backend: Option<BackendDescriptor>,
    pub instructions: Instructions,
    pub export: ExportOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::default(),
            output: PathBuf::from("runs"),
            count: 1,
            workers: 4,
            run: RunConfig::default(),
            chain: ChainConfig::default(),
            backend: None,
            instructions: Instructions::default(),
            export: ExportOptions::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Rewrites `api_key = "${VAR}"` inside `[backend]` to
/// `api_key_env = "VAR"`, keeping line numbers intact.
fn interpolate_credentials(text: &str) -> Result<String, FormatError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        let key = trimmed.split('=').next().unwrap_or("").trim();
        if key == "api_key" && section == "backend" {
            let value = trimmed.split_once('=').map(|(_, v)| v.trim()).unwrap_or("");
            let var = value
                .strip_prefix("\"${")
                .and_then(|v| v.strip_suffix("}\""))
                .filter(|v| !v.is_empty() && v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
                .ok_or_else(|| {
                    FormatError::new(i + 1, "backend.api_key must be an environment reference like \"${OPENAI_API_KEY}\"")
                })?;
            out.push(format!("api_key_env = \"{var}\""));
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out.join("\n"))
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line when known.
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let text = interpolate_credentials(text)?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| line_of(&text, s.start)).unwrap_or(0);
            FormatError::new(line, e.message().to_string())
        })?;
        config.run.seed = config.seed;
        config.validate().map_err(|e| FormatError::new(0, e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, crate::error::PersistError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::PersistError::io(path, e))?;
        Self::parse(&text).map_err(|source| crate::error::PersistError::Format { path: path.into(), source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.run.validate()?;
        self.chain.validate()?;
        if self.count == 0 {
            return Err(EngineError::Config("count must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(EngineError::Config("workers must be at least 1".into()));
        }
        if let Some(b) = &self.backend {
            if b.temperature != 0.0 {
                return Err(EngineError::Config("backend.temperature must be 0 (greedy decoding)".into()));
            }
            if b.max_in_flight == 0 {
                return Err(EngineError::Config("backend.max_in_flight must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Whether any agent needs the live backend.
    pub fn needs_backend(&self) -> bool {
        self.run.agents.iter().any(|a| a.needs_live_backend())
            || self.chain.overrides.iter().flat_map(|o| o.agents.iter().flatten()).any(|a| a.needs_live_backend())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentSpec;
    use crate::metrics::PermutationMode;

    #[test]
    fn defaults_match_reference_parameters() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.run.rounds, 4);
        assert_eq!(c.run.tasks_per_round, 30);
        assert_eq!(c.run.permutations, PermutationMode::Auto(10_000));
        assert_eq!(c.chain.generations, 8);
        assert_eq!(c.chain.chains, 6);
        assert!(c.backend.is_none());
        assert_eq!(BackendDescriptor::default().temperature, 0.0);
    }

    #[test]
    fn round_trip_is_stable() {
        let text = r#"
seed = 42
count = 3

[run]
agents = ["oracle:compositional", "oracle:lookup"]
permutations = { mode = "sampled", count = 500 }

[chain]
generations = 3

[backend]
endpoint = "http://localhost:9000/v1"
api_key = "${LANGEVO_TEST_KEY}"
"#;
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.run.seed, 42);
        assert_eq!(c.run.agents, [AgentSpec::Compositional, AgentSpec::Lookup]);
        assert_eq!(c.backend.as_ref().unwrap().api_key_env.as_deref(), Some("LANGEVO_TEST_KEY"));
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn literal_keys_rejected() {
        let err = ExperimentConfig::parse("[backend]\napi_key = \"sk-123\"\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn errors_name_the_line() {
        let err = ExperimentConfig::parse("seed = 1\n[run]\nrounds = \"four\"\n").unwrap_err();
        assert_eq!(err.line, 3, "{err}");
        let err = ExperimentConfig::parse("seed = 1\nseed = = 2\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(ExperimentConfig::parse("[run]\ntasks_per_round = 10\n").is_err());
        assert!(ExperimentConfig::parse("bogus = 1\n").is_err());
    }
}
