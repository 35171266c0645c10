//! Kill-point trials: run a random workload against one manager with
//! batched durability, kill it at a random point, recover from what reached
//! the disk and compare with the live state at that point.
//!
//! A kill either drops everything written since the last durability
//! barrier or cuts the written bytes at an arbitrary offset, which may
//! leave a torn final record.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contract::{make_green_bond, ContractManager, ContractReducer, GreenBondTerms, InstanceStatus, LifecycleEvent, LifecycleKind};
use crate::crypto::{KeyPair, PartySigner};
use crate::identity::{IdentityHandle, IdentityManager, IdentityReducer, Role};
use crate::ids::{Isin, ManagerId, PartyId, ResourceId};
use crate::ledger::{parse_records, replay, Durability, EventEnvelope, FileTail, Ledger, MemDisk, Reducer, Storage};
use crate::resource::{ResourceManager, ResourceReducer, SettleDecision, TransferInstruction};
use crate::trading::{Coordinated, Listing, OrderRequest, Side, TradeManager, TradeReducer};
use crate::txn::{participant_handle, Coordinator, Transport, TransportError, TxnHost, TxnMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Identity,
    Resource,
    Contract,
    Trade,
}

impl TrialKind {
    pub const ALL: [TrialKind; 4] = [TrialKind::Identity, TrialKind::Resource, TrialKind::Contract, TrialKind::Trade];

    pub fn name(self) -> &'static str {
        match self {
            TrialKind::Identity => "identity",
            TrialKind::Resource => "resource",
            TrialKind::Contract => "contract",
            TrialKind::Trade => "trade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KillTrial {
    pub kind: TrialKind,
    pub seed: u64,
    /// Entries appended before the kill.
    pub written: u64,
    /// Entries recovered after it.
    pub survived: u64,
    pub torn_tail: bool,
    /// Recovered entries are a prefix of the live ledger.
    pub prefix_ok: bool,
    /// Recovered state encodes identically to an independent replay.
    pub replay_ok: bool,
    /// Recovered state encodes identically to the live state at the same
    /// ledger length (checked when the kill fell between operations).
    pub live_ok: Option<bool>,
    pub error: Option<String>,
}

impl KillTrial {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.prefix_ok && self.replay_ok && self.live_ok != Some(false)
    }
}

struct Cast {
    ids: IdentityManager,
    s: BTreeMap<&'static str, PartySigner>,
}

impl Cast {
    fn new(seed: u64, storage: Box<dyn Storage>) -> Self {
        let ids = IdentityManager::bootstrap(storage, "operator", KeyPair::derive(seed, "operator")).expect("fresh ledger");
        let mut c = Cast { ids, s: BTreeMap::new() };
        for (name, role) in [
            ("cash", Role::MarketOperator),
            ("sec", Role::MarketOperator),
            ("cm", Role::MarketOperator),
            ("tm", Role::MarketOperator),
            ("coord", Role::MarketOperator),
            ("bank", Role::Issuer),
            ("issuer", Role::Issuer),
            ("verifier", Role::VerificationAgent),
            ("calc", Role::CalculationAgent),
            ("alice", Role::Investor),
            ("bob", Role::Investor),
            ("carol", Role::Investor),
        ] {
            let key = KeyPair::derive(seed, name);
            let id = c.ids.register_party(name, &[role], key.public().as_bytes()).expect("registers");
            c.s.insert(name, PartySigner::new(id, key));
        }
        c
    }

    fn dir(&self) -> IdentityHandle {
        self.ids.handle()
    }

    fn id(&self, n: &str) -> PartyId {
        self.s[n].party.clone()
    }
}

const INVESTORS: [&str; 3] = ["alice", "bob", "carol"];

/// Live state after each operation, keyed by ledger length.
type Snapshots = BTreeMap<u64, Vec<u8>>;

/// Runs `trials` seeded trials for `kind`.
pub fn kill_point_trials(kind: TrialKind, trials: u64, seed: u64) -> Vec<KillTrial> {
    (0..trials).map(|i| trial(kind, seed.wrapping_mul(1_000_003).wrapping_add(i))).collect()
}

fn trial(kind: TrialKind, seed: u64) -> KillTrial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = rng.gen_range(1..60);
    let batch = Durability::Batched(rng.gen_range(1..8));
    let disk = MemDisk::new();
    let (entries, snaps) = match kind {
        TrialKind::Identity => identity_workload(&mut rng, seed, &disk, batch, ops),
        TrialKind::Resource => resource_workload(&mut rng, seed, &disk, batch, ops),
        TrialKind::Contract => contract_workload(&mut rng, seed, &disk, batch, ops),
        TrialKind::Trade => trade_workload(&mut rng, seed, &disk, batch, ops),
    };
    // Kill: lose the unsynced suffix, or keep an arbitrary byte prefix.
    let written_bytes = disk.bytes();
    let after = MemDisk::new();
    let mut st = after.storage();
    if rng.gen_bool(0.5) {
        disk.crash();
        st.append(&disk.bytes()).expect("memory");
    } else {
        let cut = rng.gen_range(0..=written_bytes.len());
        st.append(&written_bytes[..cut]).expect("memory");
    }
    st.sync().expect("memory");
    let parsed = parse_records(&after.bytes());
    let mut t = KillTrial {
        kind,
        seed,
        written: entries.len() as u64,
        survived: parsed.entries.len() as u64,
        torn_tail: parsed.tail != FileTail::Clean,
        prefix_ok: parsed.entries.iter().zip(&entries).all(|(a, b)| a == b) && parsed.entries.len() <= entries.len(),
        replay_ok: false,
        live_ok: None,
        error: None,
    };
    let recovered = match recover(kind, seed, &after) {
        Ok(s) => s,
        Err(e) => {
            t.error = Some(e);
            return t;
        }
    };
    let oracle = match kind {
        TrialKind::Identity => fold(&parsed.entries, &IdentityReducer, |s| s.encode_state()),
        TrialKind::Resource => fold(&parsed.entries, &ResourceReducer(ManagerId::from("cash")), |s| s.encode_state()),
        TrialKind::Contract => fold(&parsed.entries, &ContractReducer(ManagerId::from("cm")), |s| s.encode_state()),
        TrialKind::Trade => fold(&parsed.entries, &TradeReducer(ManagerId::from("tm")), |s| s.encode_state()),
    };
    t.replay_ok = oracle.as_ref() == Some(&recovered);
    t.live_ok = snaps.get(&t.survived).map(|s| *s == recovered);
    t
}

fn fold<R: Reducer>(entries: &[EventEnvelope], r: &R, enc: impl Fn(&R::State) -> Vec<u8>) -> Option<Vec<u8>> {
    replay(entries.iter(), r).ok().map(|s| enc(&s))
}

/// Restarts a manager of `kind` from `disk` and returns its state encoding.
fn recover(kind: TrialKind, seed: u64, disk: &MemDisk) -> Result<Vec<u8>, String> {
    if kind == TrialKind::Identity {
        let m = IdentityManager::recover(disk.storage(), KeyPair::derive(seed, "operator")).map_err(|e| e.to_string())?;
        return Ok(m.state_encoding());
    }
    let cast = Cast::new(seed, MemDisk::new().storage());
    let op = |n: &str| cast.s[n].clone();
    Ok(match kind {
        TrialKind::Resource => ResourceManager::recover(ManagerId::from("cash"), disk.storage(), cast.dir(), op("cash"))
            .map_err(|e| e.to_string())?
            .state()
            .encode_state(),
        TrialKind::Contract => ContractManager::recover(ManagerId::from("cm"), disk.storage(), cast.dir(), op("cm"))
            .map_err(|e| e.to_string())?
            .state()
            .encode_state(),
        TrialKind::Trade => TradeManager::recover(ManagerId::from("tm"), disk.storage(), cast.dir(), op("tm"))
            .map_err(|e| e.to_string())?
            .state()
            .encode_state(),
        TrialKind::Identity => unreachable!("handled above"),
    })
}

fn snap(snaps: &mut Snapshots, ledger: &Ledger, state: Vec<u8>) {
    snaps.insert(ledger.len(), state);
}

fn identity_workload(rng: &mut ChaCha8Rng, seed: u64, disk: &MemDisk, d: Durability, ops: u32) -> (Vec<EventEnvelope>, Snapshots) {
    let mut ids = IdentityManager::bootstrap(disk.storage(), "operator", KeyPair::derive(seed, "operator")).expect("fresh");
    ids.ledger_mut().set_durability(d);
    let mut snaps = Snapshots::new();
    snap(&mut snaps, ids.ledger(), ids.state_encoding());
    let mut keys: Vec<(PartyId, KeyPair)> = Vec::new();
    for i in 0..ops {
        if keys.is_empty() || rng.gen_bool(0.6) {
            let key = KeyPair::derive(seed ^ 0x5eed, &format!("p{i}"));
            let role = Role::ALL[rng.gen_range(0..Role::ALL.len())];
            let id = ids.register_party(&format!("p{i}"), &[role], key.public().as_bytes()).expect("registers");
            keys.push((id, key));
        } else {
            let k = rng.gen_range(0..keys.len());
            let new = KeyPair::derive(seed ^ 0xface, &format!("r{i}"));
            let old = PartySigner::new(keys[k].0.clone(), keys[k].1.clone());
            if ids.rotate_key(&keys[k].0, new.public().as_bytes(), &old).is_ok() {
                keys[k].1 = new;
            }
        }
        snap(&mut snaps, ids.ledger(), ids.state_encoding());
    }
    (ids.ledger().entries().iter().map(|e| (**e).clone()).collect(), snaps)
}

fn resource_workload(rng: &mut ChaCha8Rng, seed: u64, disk: &MemDisk, d: Durability, ops: u32) -> (Vec<EventEnvelope>, Snapshots) {
    let cast = Cast::new(seed, MemDisk::new().storage());
    let mut m = ResourceManager::new(ManagerId::from("cash"), disk.storage(), cast.dir(), cast.s["cash"].clone());
    m.ledger_mut().set_durability(d);
    let eur = ResourceId::from("EUR");
    let mut snaps = Snapshots::new();
    snap(&mut snaps, m.ledger(), m.state().encode_state());
    m.define_resource(eur.clone(), 2, Some(cast.id("bank"))).expect("defines");
    snap(&mut snaps, m.ledger(), m.state().encode_state());
    let mut held: Vec<String> = Vec::new();
    for _ in 0..ops {
        let a = INVESTORS[rng.gen_range(0..3)];
        let b = INVESTORS[rng.gen_range(0..3)];
        let _ = match rng.gen_range(0..10) {
            0..=2 => m.issue_units(eur.clone(), cast.id(a), rng.gen_range(1..1_000), &cast.s["bank"]).map(|_| ()),
            3 => m.open_account(cast.id(a), eur.clone(), -rng.gen_range(0..500)),
            4 => m.reserve(cast.id(a), eur.clone(), rng.gen_range(1..300), &cast.s[a]).map(|id| held.push(id)),
            5 if !held.is_empty() => {
                let id = held.swap_remove(rng.gen_range(0..held.len()));
                let d = if rng.gen_bool(0.5) { SettleDecision::Commit(cast.id(b)) } else { SettleDecision::Abort };
                m.settle_reservation(&id, d, &cast.s["cash"]).map(|_| ())
            }
            _ => {
                let instr = TransferInstruction { from: cast.id(a), to: cast.id(b), resource: eur.clone(), amount: rng.gen_range(1..400), reference: None };
                m.transfer(instr, &cast.s[a]).map(|_| ())
            }
        };
        snap(&mut snaps, m.ledger(), m.state().encode_state());
    }
    (m.ledger().entries().iter().map(|e| (**e).clone()).collect(), snaps)
}

fn contract_workload(rng: &mut ChaCha8Rng, seed: u64, disk: &MemDisk, d: Durability, ops: u32) -> (Vec<EventEnvelope>, Snapshots) {
    let cast = Cast::new(seed, MemDisk::new().storage());
    let mut m = ContractManager::new(ManagerId::from("cm"), disk.storage(), cast.dir(), cast.s["cm"].clone());
    m.ledger_mut().set_durability(d);
    let mut snaps = Snapshots::new();
    snap(&mut snaps, m.ledger(), m.state().encode_state());
    let mut isins: Vec<Isin> = Vec::new();
    for _ in 0..ops {
        let r = rng.gen_range(0..10);
        if isins.is_empty() || r == 0 {
            let terms = GreenBondTerms {
                principal: rng.gen_range(1..100) * 10_000,
                currency: ResourceId::from("EUR"),
                n_coupons: rng.gen_range(1..4),
                co2_threshold: rng.gen_range(0..10),
                coupon_dates: Vec::new(),
                maturity: 0,
                verifier: cast.id("verifier"),
                calculator: cast.id("calc"),
            };
            let dates: Vec<u64> = (0..terms.n_coupons as u64).map(|k| 10 + 10 * k).collect();
            let terms = GreenBondTerms { maturity: dates.last().map_or(10, |x| x + 10), coupon_dates: dates, ..terms };
            let spec = make_green_bond(&terms).expect("valid terms");
            if let Ok(i) = m.issue_instrument(&spec, b"terms".to_vec(), &cast.s["issuer"]) {
                isins.push(i);
            }
        } else {
            let isin = isins[rng.gen_range(0..isins.len())].clone();
            let n = rng.gen_range(1..4);
            let _ = match r {
                1..=3 => {
                    let kind = LifecycleKind::ObservationMade { key: format!("co2_tons_{n}"), value: rng.gen_range(0..20), record: Vec::new() };
                    m.apply_event(&LifecycleEvent { isin, kind }, &cast.s["verifier"]).map(|_| ())
                }
                4..=5 => {
                    let kind = LifecycleKind::ObservationMade { key: format!("yield_{n}"), value: rng.gen_range(0..500), record: Vec::new() };
                    m.apply_event(&LifecycleEvent { isin, kind }, &cast.s["calc"]).map(|_| ())
                }
                6..=7 => {
                    let d = m.mark_draft(&isin, rng.gen_range(1..200), &cast.s["calc"]);
                    m.submit(d).map(|_| ())
                }
                _ => m.advance_time(rng.gen_range(0..60)).map(|_| ()),
            };
        }
        snap(&mut snaps, m.ledger(), m.state().encode_state());
    }
    (m.ledger().entries().iter().map(|e| (**e).clone()).collect(), snaps)
}

/// Synchronous delivery to the two funding managers of a trade manager.
struct Pair<'a> {
    cash: &'a mut ResourceManager,
    sec: &'a mut ResourceManager,
}

impl Transport for Pair<'_> {
    fn call(&mut self, _from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Result<TxnMessage, TransportError> {
        let host: &mut dyn TxnHost = match to.as_str() {
            "cash" => self.cash,
            "sec" => self.sec,
            _ => return Err(TransportError::Unreachable(to.clone())),
        };
        participant_handle(host, &msg).ok_or(TransportError::Timeout)
    }
}

fn trade_workload(rng: &mut ChaCha8Rng, seed: u64, disk: &MemDisk, d: Durability, ops: u32) -> (Vec<EventEnvelope>, Snapshots) {
    let cast = Cast::new(seed, MemDisk::new().storage());
    let dir = cast.dir();
    let isin = Isin::from("XS0000000018");
    let eur = ResourceId::from("EUR");
    let mut cash = ResourceManager::new(ManagerId::from("cash"), MemDisk::new().storage(), dir.clone(), cast.s["cash"].clone());
    let mut sec = ResourceManager::new(ManagerId::from("sec"), MemDisk::new().storage(), dir.clone(), cast.s["sec"].clone());
    cash.define_resource(eur.clone(), 2, Some(cast.id("bank"))).expect("defines");
    sec.define_resource(isin.resource(), 0, Some(cast.id("issuer"))).expect("defines");
    for who in INVESTORS {
        cash.issue_units(eur.clone(), cast.id(who), 50_000, &cast.s["bank"]).expect("funds");
        sec.issue_units(isin.resource(), cast.id(who), 300, &cast.s["issuer"]).expect("funds");
    }
    let coord = Coordinator::new(ManagerId::from("coord"), cast.s["coord"].clone(), dir.clone());
    let mut tm = TradeManager::new(ManagerId::from("tm"), disk.storage(), dir.clone(), cast.s["tm"].clone());
    tm.ledger_mut().set_durability(d);
    let mut snaps = Snapshots::new();
    snap(&mut snaps, tm.ledger(), tm.state().encode_state());
    let listing = Listing {
        isin: isin.clone(),
        state_version: 0,
        status: InstanceStatus::Live,
        security_manager: ManagerId::from("sec"),
        currency: eur,
        currency_manager: ManagerId::from("cash"),
        contract_manager: None,
    };
    let mut net = Pair { cash: &mut cash, sec: &mut sec };
    tm.sync_instrument(listing, &mut Coordinated { coordinator: &coord, net: &mut net }).expect("lists");
    snap(&mut snaps, tm.ledger(), tm.state().encode_state());
    let mut live: Vec<(String, &str)> = Vec::new();
    for _ in 0..ops {
        let who = INVESTORS[rng.gen_range(0..3)];
        let mut s = Coordinated { coordinator: &coord, net: &mut net };
        if !live.is_empty() && rng.gen_bool(0.2) {
            let (id, owner) = live.swap_remove(rng.gen_range(0..live.len()));
            let _ = tm.cancel_order(tm.cancel_draft(&id, &cast.s[owner]), &mut s);
        } else {
            let side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
            let req = OrderRequest { side, isin: isin.clone(), pinned_version: 0, qty: rng.gen_range(1..30), limit_price: rng.gen_range(95..=105) };
            if let Ok(id) = tm.submit_order(tm.order_draft(&req, &cast.s[who]), &mut s) {
                live.push((id, who));
            }
        }
        snap(&mut snaps, tm.ledger(), tm.state().encode_state());
    }
    (tm.ledger().entries().iter().map(|e| (**e).clone()).collect(), snaps)
}
