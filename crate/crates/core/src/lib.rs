//! Finite-time quantized average consensus for distributed test allocation,
//! with an offset-injection privacy layer and the matching curious-node
//! inference attack.
//!
//! Typical flow: parse a [`config::SimConfig`], [`resolve`](config::SimConfig::resolve)
//! it into a [`config::Scenario`], then [`engine::run`] it.

pub mod adversary;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod digraph;
pub mod engine;
pub mod protocol;
pub mod rng;

pub use analysis::ExactRatio;
pub use config::{Scenario, SimConfig};
pub use digraph::Digraph;
pub use engine::{run, run_with, RunOptions, RunResult};
pub use protocol::{NodeInit, Role, Variant};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] digraph::GraphError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Adversary(#[from] adversary::AdversaryError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
