//! Simulated language evolution between language-model agents.
//!
//! Two agents learn a small artificial language over a 3×3×3 meaning
//! space, play referential games, and are scored for structure
//! (TopSim, n-gram diversity) and generalisation. Transmission chains
//! repeat the procedure across generations.

pub mod agents;
pub mod backend;
pub mod chains;
pub mod config;
pub mod domain;
pub mod engine;
pub mod error;
pub mod format;
pub mod metrics;
pub mod persist;
pub mod prompts;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use agents::{Agent, AgentSpec, Oracle, SyllableTables};
pub use domain::{Colour, Signal, Stimulus, Vocabulary, VocabularyEntry};
pub use engine::{run_simulation, RunConfig, SimulationResult};
pub use error::{AgentError, BackendError, DomainError, EngineError, FormatError, MetricError, PersistError};

/// Independent 64-bit seed for a named sub-stream of a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

pub fn rng_for(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}
