//! Ingest throughput of sharded managers.
//!
//! Each shard is one contract manager receiving price marks and one
//! resource manager receiving transfers, about nine marks per transfer.
//! Drafts are signed ahead of time against identical shadow managers so the
//! timed section covers validation, signature checks, hashing, appending
//! and state application only.

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::HarnessError;
use crate::contract::{make_green_bond, ContractManager, GreenBondTerms};
use crate::crypto::{KeyPair, PartySigner};
use crate::identity::{IdentityHandle, IdentityManager, Role};
use crate::ids::{Isin, ManagerId, ResourceId};
use crate::ledger::{Draft, Durability, MemDisk, SigCheck};
use crate::resource::{ResourceManager, TransferInstruction};

/// Rate of a busy equities feed, used as a yardstick in reports.
pub const REFERENCE_EVENTS_PER_SEC: f64 = 200_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SigMode {
    /// Signatures are not checked.
    None,
    /// One verification per event.
    Each,
    /// Batch verification over runs of drafts.
    Batch,
}

impl FromStr for SigMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(SigMode::None),
            "each" => Ok(SigMode::Each),
            "batch" => Ok(SigMode::Batch),
            _ => Err(format!("unknown signature mode `{s}`; expected none, each or batch")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    /// Events per shard.
    pub events: usize,
    pub sig: SigMode,
    pub shards: usize,
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { events: 100_000, sig: SigMode::None, shards: 1, batch: 64 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub sig: SigMode,
    pub shards: usize,
    pub events: u64,
    pub elapsed_ms: f64,
    pub events_per_sec: f64,
    pub reference_ratio: f64,
    pub cpus: usize,
}

struct Shard {
    cm: ContractManager,
    rm: ResourceManager,
    marks: Vec<Draft>,
    transfers: Vec<Draft>,
}

struct Setup {
    dir: IdentityHandle,
    cm_op: PartySigner,
    rm_op: PartySigner,
    issuer: PartySigner,
    bank: PartySigner,
    calc: PartySigner,
    verifier: PartySigner,
    alice: PartySigner,
    bob: PartySigner,
    _ids: IdentityManager,
}

fn setup() -> Setup {
    let mut ids = IdentityManager::bootstrap(MemDisk::new().storage(), "operator", KeyPair::derive(7, "operator")).expect("fresh ledger");
    let mut add = |name: &str, role: Role| {
        let key = KeyPair::derive(7, name);
        let id = ids.register_party(name, &[role], key.public().as_bytes()).expect("registers");
        PartySigner::new(id, key)
    };
    let cm_op = add("cm", Role::MarketOperator);
    let rm_op = add("cash", Role::MarketOperator);
    let issuer = add("issuer", Role::Issuer);
    let bank = add("bank", Role::Issuer);
    let calc = add("calc", Role::CalculationAgent);
    let verifier = add("verifier", Role::VerificationAgent);
    let alice = add("alice", Role::Investor);
    let bob = add("bob", Role::Investor);
    Setup { dir: ids.handle(), cm_op, rm_op, issuer, bank, calc, verifier, alice, bob, _ids: ids }
}

/// Two managers in the state every shard starts from.
fn fresh(s: &Setup, shard: usize) -> Result<(ContractManager, ResourceManager, Isin, ResourceId), HarnessError> {
    let setup_err = |e: String| HarnessError::Setup(e);
    let mut cm = ContractManager::new(ManagerId::new(format!("cm{shard}")), MemDisk::new().storage(), s.dir.clone(), s.cm_op.clone());
    let mut rm = ResourceManager::new(ManagerId::new(format!("cash{shard}")), MemDisk::new().storage(), s.dir.clone(), s.rm_op.clone());
    cm.ledger_mut().set_durability(Durability::Batched(1024));
    rm.ledger_mut().set_durability(Durability::Batched(1024));
    let terms = GreenBondTerms {
        principal: 1_000_000,
        currency: ResourceId::from("EUR"),
        n_coupons: 1,
        co2_threshold: 1,
        coupon_dates: vec![u64::MAX / 4],
        maturity: u64::MAX / 2,
        verifier: s.verifier.party.clone(),
        calculator: s.calc.party.clone(),
    };
    let spec = make_green_bond(&terms).map_err(|e| setup_err(e.to_string()))?;
    let isin = cm.issue_instrument(&spec, b"bench".to_vec(), &s.issuer).map_err(|e| setup_err(e.to_string()))?;
    let eur = ResourceId::from("EUR");
    rm.define_resource(eur.clone(), 2, Some(s.bank.party.clone())).map_err(|e| setup_err(e.to_string()))?;
    for who in [&s.alice, &s.bob] {
        rm.issue_units(eur.clone(), who.party.clone(), 1 << 40, &s.bank).map_err(|e| setup_err(e.to_string()))?;
    }
    Ok((cm, rm, isin, eur))
}

fn prepare(s: &Setup, shard: usize, events: usize) -> Result<Shard, HarnessError> {
    let (mut shadow_cm, mut shadow_rm, isin, eur) = fresh(s, shard)?;
    shadow_cm.ledger_mut().set_sig_check(SigCheck::Skip);
    shadow_rm.ledger_mut().set_sig_check(SigCheck::Skip);
    let n_transfers = events / 10;
    let mut marks = Vec::with_capacity(events - n_transfers);
    for i in 0..events - n_transfers {
        let d = shadow_cm.mark_draft(&isin, 90 + (i % 20) as i64, &s.calc);
        marks.push(d.clone());
        shadow_cm.submit(d).map_err(|e| HarnessError::Setup(e.to_string()))?;
    }
    let mut transfers = Vec::with_capacity(n_transfers);
    for i in 0..n_transfers {
        let (from, to) = if i % 2 == 0 { (&s.alice, &s.bob) } else { (&s.bob, &s.alice) };
        let instr = TransferInstruction { from: from.party.clone(), to: to.party.clone(), resource: eur.clone(), amount: 1 + (i % 7) as u64, reference: None };
        let d = shadow_rm.transfer_draft(instr, from);
        transfers.push(d.clone());
        shadow_rm.submit(d).map_err(|e| HarnessError::Setup(e.to_string()))?;
    }
    let (cm, rm, _, _) = fresh(s, shard)?;
    Ok(Shard { cm, rm, marks, transfers })
}

fn ingest(shard: &mut Shard, sig: SigMode, batch: usize) -> Result<u64, String> {
    let marks = std::mem::take(&mut shard.marks);
    let transfers = std::mem::take(&mut shard.transfers);
    let n = (marks.len() + transfers.len()) as u64;
    if sig == SigMode::None {
        shard.cm.ledger_mut().set_sig_check(SigCheck::Skip);
        shard.rm.ledger_mut().set_sig_check(SigCheck::Skip);
    }
    match sig {
        SigMode::None | SigMode::Each => {
            for d in marks {
                shard.cm.submit(d).map_err(|e| e.to_string())?;
            }
            for d in transfers {
                shard.rm.submit(d).map_err(|e| e.to_string())?;
            }
        }
        SigMode::Batch => {
            let mut marks = marks.into_iter().peekable();
            while marks.peek().is_some() {
                shard.cm.submit_batch(marks.by_ref().take(batch).collect()).map_err(|e| e.to_string())?;
            }
            let mut transfers = transfers.into_iter().peekable();
            while transfers.peek().is_some() {
                shard.rm.submit_batch(transfers.by_ref().take(batch).collect()).map_err(|e| e.to_string())?;
            }
        }
    }
    shard.cm.ledger_mut().flush().map_err(|e| e.to_string())?;
    shard.rm.ledger_mut().flush().map_err(|e| e.to_string())?;
    Ok(n)
}

/// Runs one throughput measurement.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, HarnessError> {
    if cfg.shards == 0 || cfg.events == 0 || cfg.batch == 0 {
        return Err(HarnessError::Config("events, shards and batch must be positive".into()));
    }
    let s = setup();
    let mut shards = (0..cfg.shards).map(|i| prepare(&s, i, cfg.events)).collect::<Result<Vec<_>, _>>()?;
    let start = Instant::now();
    let results: Vec<Result<u64, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = shards.iter_mut().map(|sh| scope.spawn(move || ingest(sh, cfg.sig, cfg.batch))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("shard panicked".into()))).collect()
    });
    let elapsed = start.elapsed().max(Duration::from_nanos(1));
    let mut events = 0;
    for r in results {
        events += r.map_err(HarnessError::Setup)?;
    }
    let rate = events as f64 / elapsed.as_secs_f64();
    Ok(BenchReport {
        sig: cfg.sig,
        shards: cfg.shards,
        events,
        elapsed_ms: elapsed.as_secs_f64() * 1e3,
        events_per_sec: rate,
        reference_ratio: rate / REFERENCE_EVENTS_PER_SEC,
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_ingests_every_event() {
        for sig in [SigMode::None, SigMode::Each, SigMode::Batch] {
            let r = run_bench(&BenchConfig { events: 300, sig, shards: 2, batch: 16 }).unwrap();
            assert_eq!(r.events, 600);
        }
        assert!("each".parse::<SigMode>().is_ok());
        assert!("some".parse::<SigMode>().is_err());
    }
}
