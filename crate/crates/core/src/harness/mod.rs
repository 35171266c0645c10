//! Deterministic deployment simulator: topologies, scripted scenarios,
//! fault plans, ledger verification, replay trials and throughput runs.

pub mod bench;
pub mod campaign;
pub mod faults;
mod net;
pub mod replay;
pub mod scenario;
pub mod topology;
pub mod verify;
mod world;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::identity::IdentityError;
use crate::ledger::LedgerError;

pub use campaign::{dvp_campaign, CampaignConfig, CampaignSummary};
pub use faults::{Fault, FaultKind, FaultPlan, TargetKind};
pub use scenario::{random_dvp, DvpWorkload, Scenario, Step};
pub use topology::Topology;
pub use verify::{verify_ledger, LedgerVerdict};
pub use world::{run_scenario, AssertionResult, LedgerSummary, ScenarioReport, ScenarioRun};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Identity(#[from] IdentityError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_owned(), source }
    }
}

const BUNDLED: &[(&str, &str)] = &[
    ("green_bond.topology.toml", include_str!("../../scenarios/green_bond.topology.toml")),
    ("green_bond.scenario.toml", include_str!("../../scenarios/green_bond.scenario.toml")),
    ("dvp.topology.toml", include_str!("../../scenarios/dvp.topology.toml")),
    ("dvp.scenario.toml", include_str!("../../scenarios/dvp.scenario.toml")),
    ("dvp_tcp.topology.toml", include_str!("../../scenarios/dvp_tcp.topology.toml")),
    ("empty.scenario.toml", include_str!("../../scenarios/empty.scenario.toml")),
];

/// A file shipped with the crate, by file name or by short name and kind
/// (`green_bond` + `topology`).
pub fn bundled(name: &str, kind: &str) -> Option<&'static str> {
    let long = format!("{name}.{kind}.toml");
    BUNDLED.iter().find(|(n, _)| *n == name || *n == long).map(|(_, text)| *text)
}

/// Reads `path`, falling back to a bundled file of the same name when no
/// such file exists.
pub(crate) fn read_source(path: &Path, kind: &str) -> Result<String, HarnessError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => path
            .to_str()
            .and_then(|n| bundled(n, kind))
            .map(str::to_owned)
            .ok_or_else(|| HarnessError::io(path, e)),
        Err(e) => Err(HarnessError::io(path, e)),
    }
}
