//! Offline verification of persisted ledgers.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::HarnessError;
use crate::identity::verify_identity_chain;
use crate::ledger::{parse_records, verify_chain, EventEnvelope, FileTail, VerifyOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerVerdict {
    pub path: PathBuf,
    /// Records that parsed.
    pub entries: u64,
    pub outcome: VerifyOutcome,
    pub warnings: Vec<String>,
}

impl LedgerVerdict {
    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    /// First bad record, if any.
    pub fn first_bad(&self) -> Option<u64> {
        match self.outcome {
            VerifyOutcome::Ok => None,
            VerifyOutcome::Corrupt { seq, .. } => Some(seq),
        }
    }
}

#[derive(Deserialize)]
struct Sidecar {
    entries: u64,
    head: String,
}

fn read(path: &Path) -> Result<Vec<u8>, HarnessError> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn is_identity_chain(entries: &[EventEnvelope]) -> bool {
    entries.first().is_some_and(|e| e.payload_kind == "identity.register")
}

/// Verifies the ledger at `path` against the party keys recorded in the
/// identity ledger at `identity`. Reports the lowest record that fails
/// framing, hash linkage, sequencing or signature checks. A `.head`
/// sidecar next to the ledger, when present, also catches truncation and
/// a rewritten final record.
pub fn verify_ledger(path: &Path, identity: &Path) -> Result<LedgerVerdict, HarnessError> {
    let parsed = parse_records(&read(path)?);
    let same_file = matches!((path.canonicalize(), identity.canonicalize()), (Ok(a), Ok(b)) if a == b);
    let chain = if same_file || is_identity_chain(&parsed.entries) {
        verify_identity_chain(parsed.entries.iter()).0
    } else {
        let ids = parse_records(&read(identity)?);
        if ids.tail != FileTail::Clean {
            return Err(HarnessError::Config(format!("identity ledger {} is damaged", identity.display())));
        }
        let (outcome, state) = verify_identity_chain(ids.entries.iter());
        if let VerifyOutcome::Corrupt { seq, reason } = outcome {
            return Err(HarnessError::Config(format!("identity ledger {} fails at entry {seq}: {reason}", identity.display())));
        }
        verify_chain(parsed.entries.iter(), &state)
    };
    let entries = parsed.entries.len() as u64;
    let mut verdict = LedgerVerdict { path: path.to_owned(), entries, outcome: chain, warnings: Vec::new() };
    if !verdict.is_ok() {
        return Ok(verdict);
    }
    match parsed.tail {
        FileTail::Clean => {}
        FileTail::Torn { record, .. } => {
            verdict.outcome = VerifyOutcome::Corrupt { seq: record, reason: "incomplete record".into() };
            return Ok(verdict);
        }
        FileTail::Malformed { record, error, .. } => {
            verdict.outcome = VerifyOutcome::Corrupt { seq: record, reason: format!("undecodable record: {error}") };
            return Ok(verdict);
        }
    }
    let mut side = path.as_os_str().to_owned();
    side.push(".head");
    let side = PathBuf::from(side);
    if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| HarnessError::io(&side, e))?;
        let s: Sidecar = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", side.display())))?;
        let head = parsed.entries.last().map(|e| hex::encode(e.digest())).unwrap_or_default();
        if entries < s.entries {
            verdict.warnings.push(format!("ledger has {entries} entries but its head file records {}; truncated", s.entries));
        } else if entries > s.entries {
            verdict.warnings.push(format!("ledger has {} entries beyond its head file", entries - s.entries));
        } else if head != s.head {
            verdict.outcome = VerifyOutcome::Corrupt { seq: entries.saturating_sub(1), reason: "head hash differs from head file".into() };
        }
    }
    Ok(verdict)
}
