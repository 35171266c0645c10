//! Scenario execution over a simulated deployment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::faults::FaultPlan;
use super::net::{lock, Fabric, Host, HostKind, Node};
use super::scenario::{Outcome, Scenario, Step};
use super::topology::{ManagerKind, Topology, TransportMode};
use super::HarnessError;
use crate::contract::{make_green_bond, ContractEffect, GreenBondTerms, InstanceStatus, LifecycleEvent, LifecycleKind};
use crate::crypto::{Digest, KeyPair, PartySigner};
use crate::identity::{IdentityHandle, IdentityManager, Role};
use crate::ids::{Isin, ManagerId, PartyId, ResourceId, TxnId};
use crate::ledger::{write_ledger_file, EventEnvelope, KeyDirectory, MemDisk};
use crate::monitor::{evaluate_stream, Alert, Evaluator, Mode, RuleSet};
use crate::resource::{ResourceEffect, TransferInstruction};
use crate::trading::{
    order_id_at, Coordinated, Listing, OrderRequest, Settlement, TradeError, TradeManager, TradeReducer,
};
use crate::txn::{recover_participant, AtomicTxn, Coordinator, Decision, Effect, LocalStatus, Resolution, TxnAction, TxnLogEvent, TxnOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub step: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerSummary {
    pub entries: u64,
    pub head: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ScenarioReport {
    pub topology: String,
    pub scenario: String,
    pub fault_seed: u64,
    pub assertions: Vec<AssertionResult>,
    /// Failed actions without an expected outcome, in runs with faults.
    pub action_errors: Vec<String>,
    /// End-of-run invariant violations.
    pub violations: Vec<String>,
    /// Operator alerts from participants that could not resolve a
    /// transaction on their own.
    pub in_doubt: Vec<String>,
    pub faults_fired: Vec<String>,
    pub alerts: Vec<Alert>,
    pub ledgers: BTreeMap<String, LedgerSummary>,
    pub committed_txns: usize,
    pub aborted_txns: usize,
    pub trades: usize,
    pub messages: u64,
    /// Logical clock after each step.
    pub step_ticks: Vec<u64>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.assertions.iter().all(|a| a.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        let failed = self.assertions.iter().filter(|a| !a.passed).map(|a| format!("step {} {}: {}", a.step, a.name, a.detail));
        failed.chain(self.violations.iter().cloned()).collect()
    }
}

/// A finished run: its report plus the final ledgers.
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub ledgers: Vec<(String, Vec<Arc<EventEnvelope>>)>,
}

impl ScenarioRun {
    /// Writes `report.json`, `alerts.jsonl` and one `<id>.ledger` per
    /// manager, each with a `.head` sidecar recording its length and head.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let mut written = Vec::new();
        for (id, entries) in &self.ledgers {
            let path = dir.join(format!("{id}.ledger"));
            write_ledger_file(&path, entries).map_err(|e| HarnessError::io(&path, e))?;
            let head = self.report.ledgers.get(id).cloned().unwrap_or(LedgerSummary { entries: 0, head: String::new() });
            let side = dir.join(format!("{id}.ledger.head"));
            let json = serde_json::to_string_pretty(&head).expect("serializable");
            std::fs::write(&side, json).map_err(|e| HarnessError::io(&side, e))?;
            written.push(path);
        }
        let report = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self.report).expect("serializable");
        std::fs::write(&report, json).map_err(|e| HarnessError::io(&report, e))?;
        let alerts = dir.join("alerts.jsonl");
        let lines: String = self.report.alerts.iter().map(|a| a.to_json_line() + "\n").collect();
        std::fs::write(&alerts, lines).map_err(|e| HarnessError::io(&alerts, e))?;
        written.push(report);
        written.push(alerts);
        Ok(written)
    }
}

/// Runs `scenario` on a fresh deployment of `topo` under `plan`.
pub fn run_scenario(topo: &Topology, scenario: &Scenario, plan: &FaultPlan) -> Result<ScenarioRun, HarnessError> {
    topo.validate()?;
    if topo.transport.mode == TransportMode::Tcp && !plan.is_empty() {
        return Err(HarnessError::Config("fault plans need the in-process transport".into()));
    }
    let mut w = World::new(topo, plan)?;
    w.report.scenario = scenario.name.clone();
    if topo.transport.mode == TransportMode::Tcp {
        w.fabric.start_tcp().map_err(|e| HarnessError::Setup(format!("tcp transport: {e}")))?;
    }
    for (i, step) in scenario.steps.iter().enumerate() {
        w.step(i, step);
        w.settle(i);
        w.report.step_ticks.push(w.fabric.clock);
    }
    w.heal();
    w.final_checks();
    w.fabric.stop_tcp();
    Ok(w.finish())
}

struct TradeNode {
    tm: Option<TradeManager>,
    disk: MemDisk,
    operator: PartySigner,
    monitor: Evaluator,
    fed: u64,
}

#[derive(Debug, Clone)]
struct Bond {
    isin: Isin,
    issuer: PartyId,
    cm: ManagerId,
    sec: ManagerId,
    tm: Option<ManagerId>,
    currency: ResourceId,
    cash: ManagerId,
}

type Coord = Arc<Coordinator<IdentityHandle>>;

struct World {
    topo: Topology,
    ids: IdentityManager,
    id_disk: MemDisk,
    id_key: KeyPair,
    dir: IdentityHandle,
    fabric: Fabric,
    traders: BTreeMap<ManagerId, TradeNode>,
    signers: BTreeMap<String, PartySigner>,
    bonds: BTreeMap<String, Bond>,
    orders: BTreeMap<String, (ManagerId, String)>,
    /// Seq and digest of every commit decision seen, per manager.
    finality: BTreeMap<(ManagerId, TxnId), (u64, Digest)>,
    scanned: BTreeMap<ManagerId, u64>,
    rules: RuleSet,
    alerts: Vec<Alert>,
    report: ScenarioReport,
    strict: bool,
    driver_txns: u64,
}

impl World {
    fn new(topo: &Topology, plan: &FaultPlan) -> Result<Self, HarnessError> {
        let seed = topo.key_seed;
        let id_disk = MemDisk::new();
        let id_key = KeyPair::derive(seed, "operator");
        let mut ids = IdentityManager::bootstrap(id_disk.storage(), "operator", id_key.clone())?;
        let mut signers = BTreeMap::new();
        let mut register = |ids: &mut IdentityManager, name: &str, roles: &[Role]| -> Result<(), HarnessError> {
            let key = KeyPair::derive(seed, name);
            let pid = ids.register_party(name, roles, key.public().as_bytes())?;
            signers.insert(name.to_owned(), PartySigner::new(pid, key));
            Ok(())
        };
        for p in &topo.parties {
            register(&mut ids, &p.name, &p.roles)?;
        }
        for m in topo.managers.iter().filter(|m| m.kind != ManagerKind::Identity) {
            register(&mut ids, &m.id, &[Role::MarketOperator])?;
        }
        for c in topo.coordinator_ids() {
            register(&mut ids, c.as_str(), &[Role::MarketOperator])?;
        }
        let dir = ids.handle();
        let coords: Vec<Coord> = topo
            .coordinator_ids()
            .into_iter()
            .map(|c| Arc::new(Coordinator::new(c.clone(), signers[c.as_str()].clone(), dir.clone())))
            .collect();
        let mut fabric = Fabric::new(coords, topo.timeouts.t_prep, plan);
        let mut traders = BTreeMap::new();
        let rules = RuleSet::standard();
        for m in &topo.managers {
            let id = ManagerId(m.id.clone());
            let Some(op) = signers.get(&m.id).cloned() else { continue };
            match m.kind {
                ManagerKind::Resource => {
                    fabric.nodes.insert(id.clone(), Arc::new(std::sync::Mutex::new(Node::new(id, HostKind::Resource, op, dir.clone()))));
                }
                ManagerKind::Contract => {
                    fabric.nodes.insert(id.clone(), Arc::new(std::sync::Mutex::new(Node::new(id, HostKind::Contract, op, dir.clone()))));
                }
                ManagerKind::Trade => {
                    let disk = MemDisk::new();
                    let tm = TradeManager::new(id.clone(), disk.storage(), dir.clone(), op.clone());
                    let monitor = Evaluator::new(&rules, Mode::RealTime);
                    traders.insert(id, TradeNode { tm: Some(tm), disk, operator: op, monitor, fed: 0 });
                }
                ManagerKind::Identity => {}
            }
        }
        let mut w = World {
            topo: topo.clone(),
            ids,
            id_disk,
            id_key,
            dir,
            fabric,
            traders,
            signers,
            bonds: BTreeMap::new(),
            orders: BTreeMap::new(),
            finality: BTreeMap::new(),
            scanned: BTreeMap::new(),
            rules,
            alerts: Vec::new(),
            report: ScenarioReport { topology: topo.name.clone(), fault_seed: plan.seed, ..ScenarioReport::default() },
            strict: plan.is_empty(),
            driver_txns: 0,
        };
        w.fund().map_err(HarnessError::Setup)?;
        Ok(w)
    }

    /// Defines currencies, opens credit lines and issues opening balances.
    fn fund(&mut self) -> Result<(), String> {
        for c in self.topo.currencies.clone() {
            let res = ResourceId(c.id.clone());
            let issuer = self.signer(&c.issuer)?;
            let holders: Vec<(PartyId, i64, u64)> = self
                .topo
                .parties
                .iter()
                .filter(|p| p.balances.contains_key(&c.id) || p.credit.contains_key(&c.id))
                .map(|p| {
                    let pid = self.signers[&p.name].party.clone();
                    (pid, p.credit.get(&c.id).copied().unwrap_or(0), p.balances.get(&c.id).copied().unwrap_or(0))
                })
                .collect();
            self.with_host(&ManagerId(c.manager.clone()), |h| {
                let m = h.resource().ok_or("not a resource manager")?;
                m.define_resource(res.clone(), c.decimals, Some(issuer.party.clone())).map_err(|e| e.to_string())?;
                for (pid, credit, balance) in &holders {
                    if *credit != 0 {
                        m.open_account(pid.clone(), res.clone(), *credit).map_err(|e| e.to_string())?;
                    }
                    if *balance > 0 {
                        m.issue_units(res.clone(), pid.clone(), *balance, &issuer).map_err(|e| e.to_string())?;
                    }
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    fn signer(&self, name: &str) -> Result<PartySigner, String> {
        self.signers.get(name).cloned().ok_or_else(|| format!("unknown party `{name}`"))
    }

    fn bond(&self, alias: &str) -> Result<Bond, String> {
        self.bonds.get(alias).cloned().ok_or_else(|| format!("unknown bond `{alias}`"))
    }

    /// Where `asset` (a bond alias or currency id) is held.
    fn asset(&self, asset: &str) -> Result<(ManagerId, ResourceId), String> {
        if let Some(b) = self.bonds.get(asset) {
            return Ok((b.sec.clone(), b.isin.resource()));
        }
        let c = self.topo.currency(asset).ok_or_else(|| format!("unknown asset `{asset}`"))?;
        Ok((ManagerId(c.manager.clone()), ResourceId(c.id.clone())))
    }

    fn with_host<R>(&mut self, id: &ManagerId, f: impl FnOnce(&mut Host) -> Result<R, String>) -> Result<R, String> {
        let node = self.fabric.node(id).ok_or_else(|| format!("unknown manager `{id}`"))?;
        let mut g = lock(&node);
        self.fabric.apply_pending(&mut g);
        let host = g.host.as_mut().ok_or_else(|| format!("{id} is down"))?;
        f(host)
    }

    fn with_tm<R>(
        &mut self,
        id: &ManagerId,
        f: impl FnOnce(&mut TradeManager, &mut dyn Settlement) -> Result<R, TradeError>,
    ) -> Result<R, String> {
        let coord = self.fabric.pick_coordinator().ok_or("no coordinator available")?;
        let node = self.traders.get_mut(id).ok_or_else(|| format!("unknown trade manager `{id}`"))?;
        let tm = node.tm.as_mut().ok_or_else(|| format!("{id} is down"))?;
        let mut s = Coordinated { coordinator: &*coord, net: &mut self.fabric };
        let r = f(tm, &mut s);
        self.reap_trade_managers();
        r.map_err(|e| e.to_string())
    }

    /// Drops trade managers that crashed at a checkpoint.
    fn reap_trade_managers(&mut self) {
        for id in std::mem::take(&mut self.fabric.trade_crashed) {
            if let Some(n) = self.traders.get_mut(&id) {
                n.tm = None;
                n.disk.crash();
            }
        }
    }

    fn execute(&mut self, actions: Vec<TxnAction>, initiator: &PartySigner) -> Result<(), String> {
        let coord = self.fabric.pick_coordinator().ok_or("no coordinator available")?;
        self.driver_txns += 1;
        let id = TxnId(format!("driver-X{}", self.driver_txns));
        let txn = AtomicTxn::new(id.clone(), actions, initiator, self.dir.epoch());
        match coord.execute_atomic(txn, &mut self.fabric) {
            TxnOutcome::Committed { .. } => Ok(()),
            TxnOutcome::Aborted { reason } => Err(format!("{id} aborted: {reason}")),
            TxnOutcome::InDoubt { reason } => Err(format!("{id} in doubt: {reason}")),
        }
    }

    fn record(&mut self, step: usize, name: &str, expect: Option<Outcome>, res: Result<String, String>) {
        let passed_as = |passed: bool, detail: String| AssertionResult { step, name: name.to_owned(), passed, detail };
        match (expect, res) {
            (Some(Outcome::Ok), Ok(d)) => self.report.assertions.push(passed_as(true, d)),
            (Some(Outcome::Ok), Err(e)) => self.report.assertions.push(passed_as(false, format!("expected success: {e}"))),
            (Some(Outcome::Rejected), Err(e)) => self.report.assertions.push(passed_as(true, format!("rejected: {e}"))),
            (Some(Outcome::Rejected), Ok(d)) => {
                self.report.assertions.push(passed_as(false, format!("expected rejection, got {d}")))
            }
            (None, Ok(_)) => {}
            (None, Err(e)) if self.strict => self.report.assertions.push(passed_as(false, e)),
            (None, Err(e)) => self.report.action_errors.push(format!("step {step} {name}: {e}")),
        }
    }

    fn check(&mut self, step: usize, name: &str, res: Result<String, String>) {
        let (passed, detail) = match res {
            Ok(d) => (true, d),
            Err(e) => (false, e),
        };
        self.report.assertions.push(AssertionResult { step, name: name.to_owned(), passed, detail });
    }

    fn step(&mut self, i: usize, step: &Step) {
        self.fabric.tick();
        match step {
            Step::IssueBond { .. } => {
                let r = self.issue_bond(step);
                self.record(i, step.name(), None, r);
            }
            Step::Transfer { from, to, asset, amount, expect } => {
                let r = self.transfer(from, to, asset, *amount);
                self.record(i, step.name(), *expect, r);
            }
            Step::Order { party, bond, side, qty, price, label, pinned_version, expect } => {
                let r = self.order(party, bond, (*side).into(), *qty, *price, label.as_deref(), *pinned_version);
                self.record(i, step.name(), *expect, r);
            }
            Step::Cancel { party, order, expect } => {
                let r = self.cancel(party, order);
                self.record(i, step.name(), *expect, r);
            }
            Step::Observe { agent, bond, key, value, record_date, expect } => {
                let r = self.observe(agent, bond, key, *value, *record_date);
                self.record(i, step.name(), *expect, r);
            }
            Step::PayCoupon { bond, expect } => {
                let r = self.pay(bond);
                self.record(i, step.name(), *expect, r);
            }
            Step::Mark { agent, bond, price } => {
                let r = self.mark(agent, bond, *price);
                self.record(i, step.name(), None, r);
            }
            Step::AdvanceTime { to } => {
                let r = self.advance_time(*to);
                self.record(i, step.name(), None, r);
            }
            _ => {
                // Assertions see the state after pending work has settled.
                self.settle(i);
                let r = self.assertion(step);
                self.check(i, step.name(), r);
            }
        }
    }

    fn issue_bond(&mut self, step: &Step) -> Result<String, String> {
        let Step::IssueBond {
            bond,
            manager,
            issuer,
            principal,
            currency,
            coupons,
            co2_threshold,
            verifier,
            calculator,
            first_coupon,
            period,
            units,
            docs,
        } = step
        else {
            unreachable!("dispatched on IssueBond")
        };
        if self.bonds.contains_key(bond) {
            return Err(format!("bond alias `{bond}` is taken"));
        }
        let cm = ManagerId(manager.clone());
        let spec_m = self.topo.manager(manager).filter(|m| m.kind == ManagerKind::Contract);
        let sec = spec_m.and_then(|m| m.security_manager.clone()).ok_or_else(|| format!("`{manager}` is not a contract manager"))?;
        let cur = self.topo.currency(currency).ok_or_else(|| format!("unknown currency `{currency}`"))?.clone();
        let issuer = self.signer(issuer)?;
        let coupon_dates: Vec<u64> = (0..*coupons as u64).map(|k| first_coupon + k * period).collect();
        let maturity = coupon_dates.last().map_or(*first_coupon, |d| d + period);
        let terms = GreenBondTerms {
            principal: *principal,
            currency: ResourceId(cur.id.clone()),
            n_coupons: *coupons,
            co2_threshold: *co2_threshold,
            coupon_dates,
            maturity,
            verifier: self.signer(verifier)?.party,
            calculator: self.signer(calculator)?.party,
        };
        let spec = make_green_bond(&terms).map_err(|e| e.to_string())?;
        let pid = issuer.party.clone();
        let (isin, eff) = self.with_host(&cm, |h| {
            let m = h.contract().ok_or("not a contract manager")?;
            Ok(m.issue_effect(&spec, docs.as_bytes().to_vec(), &pid))
        })?;
        let sec = ManagerId(sec);
        let actions = vec![
            TxnAction { manager: cm.clone(), effect: Effect::Contract(eff) },
            TxnAction {
                manager: sec.clone(),
                effect: Effect::Resource(ResourceEffect::Define { resource: isin.resource(), decimals: 0, issuer: Some(pid.clone()) }),
            },
        ];
        self.execute(actions, &issuer)?;
        self.bonds.insert(
            bond.clone(),
            Bond {
                isin: isin.clone(),
                issuer: pid.clone(),
                cm: cm.clone(),
                sec: sec.clone(),
                tm: self.topo.trade_manager_for(manager).map(|t| ManagerId(t.id.clone())),
                currency: ResourceId(cur.id.clone()),
                cash: ManagerId(cur.manager.clone()),
            },
        );
        let units = units.unwrap_or(*principal);
        self.with_host(&sec, |h| {
            let m = h.resource().ok_or("not a resource manager")?;
            m.issue_units(isin.resource(), pid, units, &issuer).map_err(|e| e.to_string())
        })?;
        Ok(format!("{bond} issued as {isin}"))
    }

    fn transfer(&mut self, from: &str, to: &str, asset: &str, amount: u64) -> Result<String, String> {
        let (mgr, resource) = self.asset(asset)?;
        let s = self.signer(from)?;
        let to = self.signer(to)?.party;
        let instr = TransferInstruction { from: s.party.clone(), to, resource, amount, reference: None };
        self.with_host(&mgr, |h| {
            let m = h.resource().ok_or("not a resource manager")?;
            m.transfer(instr, &s).map(|e| format!("seq {}", e.seq)).map_err(|e| e.to_string())
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn order(
        &mut self,
        party: &str,
        bond: &str,
        side: crate::trading::Side,
        qty: u64,
        price: u64,
        label: Option<&str>,
        pinned: Option<u64>,
    ) -> Result<String, String> {
        let b = self.bond(bond)?;
        let tm = b.tm.clone().ok_or_else(|| format!("`{bond}` is not listed"))?;
        let s = self.signer(party)?;
        let node = self.traders.get(&tm).ok_or("unknown trade manager")?;
        let m = node.tm.as_ref().ok_or_else(|| format!("{tm} is down"))?;
        let version = match pinned {
            Some(v) => v,
            None => m.state().listing(&b.isin).map(|l| l.state_version).ok_or_else(|| format!("{} is not listed", b.isin))?,
        };
        let req = OrderRequest { side, isin: b.isin.clone(), pinned_version: version, qty, limit_price: price };
        let draft = m.order_draft(&req, &s);
        let expected = order_id_at(&tm, m.ledger().len());
        if let Some(l) = label {
            self.orders.insert(l.to_owned(), (tm.clone(), expected.clone()));
        }
        self.with_tm(&tm, |m, st| m.submit_order(draft, st))
    }

    fn cancel(&mut self, party: &str, label: &str) -> Result<String, String> {
        let (tm, order_id) = self.orders.get(label).cloned().ok_or_else(|| format!("unknown order `{label}`"))?;
        let s = self.signer(party)?;
        let node = self.traders.get(&tm).ok_or("unknown trade manager")?;
        let draft = node.tm.as_ref().ok_or_else(|| format!("{tm} is down"))?.cancel_draft(&order_id, &s);
        self.with_tm(&tm, |m, st| m.cancel_order(draft, st)).map(|()| format!("{order_id} cancelled"))
    }

    fn observe(&mut self, agent: &str, bond: &str, key: &str, value: i64, record_date: bool) -> Result<String, String> {
        let b = self.bond(bond)?;
        let s = self.signer(agent)?;
        if !record_date {
            let ev = LifecycleEvent { isin: b.isin.clone(), kind: LifecycleKind::ObservationMade { key: key.into(), value, record: Vec::new() } };
            return self.with_host(&b.cm, |h| {
                let m = h.contract().ok_or("not a contract manager")?;
                m.apply_event(&ev, &s).map(|v| format!("version {v}")).map_err(|e| e.to_string())
            });
        }
        let res = b.isin.resource();
        let issuer = b.issuer.clone();
        let record = self.with_host(&b.sec, |h| Ok(h.resource().ok_or("not a resource manager")?.state().holdings(&res, Some(&issuer))))?;
        let ev = LifecycleEvent { isin: b.isin.clone(), kind: LifecycleKind::ObservationMade { key: key.into(), value, record: record.clone() } };
        let actions = vec![
            TxnAction {
                manager: b.sec.clone(),
                effect: Effect::Resource(ResourceEffect::AssertHoldings { resource: res, holdings: record.clone(), excluding: Some(issuer) }),
            },
            TxnAction { manager: b.cm.clone(), effect: Effect::Contract(ContractEffect::Apply(ev)) },
        ];
        self.execute(actions, &s)?;
        Ok(format!("recorded {} holders", record.len()))
    }

    fn pay(&mut self, bond: &str) -> Result<String, String> {
        let b = self.bond(bond)?;
        let isin = b.isin.clone();
        let due = self.with_host(&b.cm, |h| {
            let m = h.contract().ok_or("not a contract manager")?;
            let inst = m.state().instance(&isin).ok_or("unknown instrument")?;
            Ok(inst.due_payments())
        })?;
        let transfers = due.into_iter().next().ok_or_else(|| format!("no payment due on `{bond}`"))?;
        let payer = transfers.first().map(|t| t.from.clone()).ok_or("payment has no transfers")?;
        let s = self.signers.values().find(|s| s.party == payer).cloned().ok_or("payer has no key here")?;
        let mut actions = Vec::new();
        for t in &transfers {
            let mgr = if t.resource == b.currency { b.cash.clone() } else { self.asset(t.resource.as_str())?.0 };
            actions.push(TxnAction {
                manager: mgr,
                effect: Effect::Resource(ResourceEffect::Transfer {
                    from: t.from.clone(),
                    to: t.to.clone(),
                    resource: t.resource.clone(),
                    amount: t.amount,
                }),
            });
        }
        let total: u64 = transfers.iter().map(|t| t.amount).sum();
        let n = transfers.len();
        let ev = LifecycleEvent { isin, kind: LifecycleKind::PaymentSettled { transfers } };
        actions.push(TxnAction { manager: b.cm.clone(), effect: Effect::Contract(ContractEffect::Apply(ev)) });
        self.execute(actions, &s)?;
        Ok(format!("paid {total} to {n} holders"))
    }

    fn mark(&mut self, agent: &str, bond: &str, price: i64) -> Result<String, String> {
        let b = self.bond(bond)?;
        let s = self.signer(agent)?;
        self.with_host(&b.cm, |h| {
            let m = h.contract().ok_or("not a contract manager")?;
            let d = m.mark_draft(&b.isin, price, &s);
            m.submit(d).map(|v| format!("marked at version {v}")).map_err(|e| e.to_string())
        })
    }

    fn advance_time(&mut self, to: u64) -> Result<String, String> {
        let cms: Vec<ManagerId> = self.topo.managers_of(ManagerKind::Contract).map(|m| ManagerId(m.id.clone())).collect();
        let mut moved = 0;
        for cm in cms {
            moved += self.with_host(&cm, |h| {
                let m = h.contract().ok_or("not a contract manager")?;
                m.advance_time(to).map(|v| v.len()).map_err(|e| e.to_string())
            })?;
        }
        Ok(format!("{moved} instruments at {to}"))
    }

    fn assertion(&mut self, step: &Step) -> Result<String, String> {
        match step {
            Step::AssertBalance { party, asset, expect, reserved } => {
                let (mgr, res) = self.asset(asset)?;
                let pid = self.signer(party)?.party;
                let (avail, held) = self.with_host(&mgr, |h| {
                    let st = h.resource().ok_or("not a resource manager")?.state();
                    Ok((st.available(&pid, &res), st.reserved(&pid, &res)))
                })?;
                if avail != *expect {
                    return Err(format!("{party} holds {avail} {asset}, expected {expect}"));
                }
                if let Some(r) = reserved {
                    if held != *r {
                        return Err(format!("{party} has {held} {asset} reserved, expected {r}"));
                    }
                }
                Ok(format!("{party}: {avail} available, {held} reserved"))
            }
            Step::AssertVersion { bond, expect } => {
                let b = self.bond(bond)?;
                let v = self.with_host(&b.cm, |h| {
                    let st = h.contract().ok_or("not a contract manager")?.state();
                    Ok(st.instance(&b.isin).ok_or("unknown instrument")?.state_version)
                })?;
                if v == *expect {
                    Ok(format!("version {v}"))
                } else {
                    Err(format!("version {v}, expected {expect}"))
                }
            }
            Step::AssertStatus { bond, expect } => {
                let b = self.bond(bond)?;
                let s = self.with_host(&b.cm, |h| {
                    let st = h.contract().ok_or("not a contract manager")?.state();
                    Ok(st.instance(&b.isin).ok_or("unknown instrument")?.status())
                })?;
                let name = match s {
                    InstanceStatus::Live => "live",
                    InstanceStatus::Matured => "matured",
                    InstanceStatus::Default => "default",
                };
                if name == expect {
                    Ok(name.to_owned())
                } else {
                    Err(format!("status {name}, expected {expect}"))
                }
            }
            Step::AssertTrades { bond, count, volume } => {
                let b = self.bond(bond)?;
                let tm = b.tm.ok_or_else(|| format!("`{bond}` is not listed"))?;
                let m = self.traders.get(&tm).and_then(|n| n.tm.as_ref()).ok_or_else(|| format!("{tm} is down"))?;
                let trades: Vec<_> = m.state().settled_trades().into_iter().filter(|t| t.isin == b.isin).collect();
                let vol: u64 = trades.iter().map(|t| t.qty).sum();
                if count.is_some_and(|c| c != trades.len()) || volume.is_some_and(|v| v != vol) {
                    return Err(format!("{} trades for {vol} units, expected {count:?} for {volume:?}", trades.len()));
                }
                Ok(format!("{} trades for {vol} units", trades.len()))
            }
            Step::AssertAlerts { rule, count } => {
                let n = self.alerts.iter().filter(|a| rule.as_ref().map_or(true, |r| &a.rule_id == r)).count();
                if n == *count {
                    Ok(format!("{n} alerts"))
                } else {
                    Err(format!("{n} alerts, expected {count}"))
                }
            }
            Step::AssertConservation => {
                let v = self.conservation();
                if v.is_empty() {
                    Ok("every resource conserved".into())
                } else {
                    Err(v.join("; "))
                }
            }
            Step::AssertLedgersVerify => {
                let v = self.verify_all();
                if v.is_empty() {
                    Ok("every ledger verifies".into())
                } else {
                    Err(v.join("; "))
                }
            }
            _ => unreachable!("actions are dispatched elsewhere"),
        }
    }

    // -----------------------------------------------------------------------
    // Between steps

    /// Delivers late messages, restarts what is due, resolves in-doubt
    /// transactions, refreshes listings and feeds the monitor.
    fn settle(&mut self, step: usize) {
        self.fabric.tick();
        self.fabric.apply_pending_all();
        self.fabric.flush_late();
        for id in std::mem::take(&mut self.fabric.trade_restart) {
            self.restart_tm(&id);
        }
        self.recover_hosts();
        let tms: Vec<ManagerId> = self.traders.keys().cloned().collect();
        for tm in &tms {
            if self.traders[tm].tm.is_some() {
                if let Err(e) = self.with_tm(tm, |m, s| m.resolve_pending(s)) {
                    self.record(step, "settle", None, Err(format!("{tm}: {e}")));
                }
            }
        }
        self.sync_listings(step);
        self.scan_decisions();
        self.feed_monitors();
    }

    fn restart_tm(&mut self, id: &ManagerId) {
        let dir = self.dir.clone();
        if let Some(n) = self.traders.get_mut(id) {
            if n.tm.is_none() {
                match TradeManager::recover(id.clone(), n.disk.storage(), dir, n.operator.clone()) {
                    Ok(tm) => n.tm = Some(tm),
                    Err(e) => self.report.violations.push(format!("{id} cannot recover: {e}")),
                }
            }
        }
    }

    fn recover_hosts(&mut self) {
        let nodes: Vec<_> = self.fabric.nodes.values().cloned().collect();
        for n in nodes {
            let mut g = lock(&n);
            self.fabric.apply_pending(&mut g);
            let recovering = g.recovering;
            let Some(h) = g.host.as_mut() else { continue };
            if !recovering && h.txn().in_doubt().is_empty() {
                continue;
            }
            let out = recover_participant(h.txn(), &mut self.fabric);
            let mut blocked = false;
            for r in out {
                if let Resolution::Blocked { alert, .. } = r {
                    blocked = true;
                    if !self.report.in_doubt.contains(&alert) {
                        self.report.in_doubt.push(alert);
                    }
                }
            }
            g.recovering = blocked;
        }
    }

    fn sync_listings(&mut self, step: usize) {
        for b in self.bonds.values().cloned().collect::<Vec<_>>() {
            let Some(tm) = b.tm.clone() else { continue };
            if self.traders.get(&tm).map_or(true, |n| n.tm.is_none()) {
                continue;
            }
            let isin = b.isin.clone();
            let Ok(Some((version, status))) = self.with_host(&b.cm, |h| {
                let st = h.contract().ok_or("not a contract manager")?.state();
                Ok(st.instance(&isin).map(|i| (i.state_version, i.status())))
            }) else {
                continue;
            };
            let listing = Listing {
                isin,
                state_version: version,
                status,
                security_manager: b.sec.clone(),
                currency: b.currency.clone(),
                currency_manager: b.cash.clone(),
                contract_manager: Some(b.cm.clone()),
            };
            if let Err(e) = self.with_tm(&tm, |m, s| m.sync_instrument(listing, s)) {
                self.record(step, "sync_listing", None, Err(format!("{tm}: {e}")));
            }
        }
    }

    /// Remembers where every commit decision landed.
    fn scan_decisions(&mut self) {
        for (id, n) in &self.fabric.nodes {
            let g = lock(n);
            let Some(h) = g.host.as_ref() else { continue };
            let from = self.scanned.get(id).copied().unwrap_or(0);
            let entries = h.ledger().entries();
            for e in entries.iter().skip(from as usize) {
                if e.payload_kind != "txn.decided" {
                    continue;
                }
                if let Ok(TxnLogEvent::Decided { txn_id, decision: Decision::Commit }) = TxnLogEvent::decode(&e.payload_kind, &e.payload) {
                    self.finality.entry((id.clone(), txn_id)).or_insert((e.seq, e.digest()));
                }
            }
            self.scanned.insert(id.clone(), entries.len() as u64);
        }
    }

    fn feed_monitors(&mut self) {
        for n in self.traders.values_mut() {
            let Some(tm) = n.tm.as_ref() else { continue };
            let entries = tm.ledger().entries();
            for e in entries.iter().skip(n.fed as usize) {
                self.alerts.extend(n.monitor.push(e));
            }
            n.fed = n.fed.max(entries.len() as u64);
        }
    }

    /// Cancels outstanding faults, restarts everything and lets recovery
    /// finish.
    fn heal(&mut self) {
        self.fabric.heal();
        let tms: Vec<ManagerId> = self.traders.keys().cloned().collect();
        for _ in 0..3 {
            for tm in &tms {
                self.restart_tm(tm);
            }
            let before = self.report.step_ticks.len();
            self.settle(before);
            let open_intents = self.traders.values().filter_map(|n| n.tm.as_ref()).any(|m| m.state().intents().next().is_some());
            let in_doubt = self.fabric.nodes.values().any(|n| lock(n).host.as_mut().is_some_and(|h| !h.txn().in_doubt().is_empty()));
            if !open_intents && !in_doubt {
                break;
            }
        }
        for n in self.traders.values_mut() {
            self.alerts.extend(n.monitor.finish());
        }
        self.report.faults_fired = std::mem::take(&mut self.fabric.fired);
    }

    // -----------------------------------------------------------------------
    // End-of-run checks

    fn conservation(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, n) in &self.fabric.nodes {
            let mut g = lock(n);
            let Some(m) = g.host.as_mut().and_then(Host::resource) else { continue };
            for (res, _) in m.state().resources() {
                let (total, supply) = (m.state().total(res), m.state().supply(res));
                if total != supply {
                    out.push(format!("{id}: {res} totals {total} against supply {supply}"));
                }
            }
        }
        out
    }

    fn verify_all(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        let (outcome, _) = crate::identity::verify_identity_chain(self.ids.ledger().entries().iter().map(|e| e.as_ref()));
        if let crate::ledger::VerifyOutcome::Corrupt { seq, reason } = outcome {
            out.push(format!("identity: entry {seq}: {reason}"));
        }
        for (id, n) in &self.fabric.nodes {
            let g = lock(n);
            match g.host.as_ref() {
                Some(h) => {
                    if let crate::ledger::VerifyOutcome::Corrupt { seq, reason } = h.ledger().verify(&self.dir) {
                        out.push(format!("{id}: entry {seq}: {reason}"));
                    }
                }
                None => out.push(format!("{id} is down")),
            }
        }
        for (id, n) in &self.traders {
            match n.tm.as_ref() {
                Some(tm) => {
                    if let crate::ledger::VerifyOutcome::Corrupt { seq, reason } = tm.ledger().verify(&self.dir) {
                        out.push(format!("{id}: entry {seq}: {reason}"));
                    }
                }
                None => out.push(format!("{id} is down")),
            }
        }
        out
    }

    fn final_checks(&mut self) {
        let mut v = Vec::new();
        v.extend(self.verify_all());
        v.extend(self.conservation());

        // Atomicity: every participant of a transaction ends in the same state.
        let mut statuses: BTreeMap<TxnId, (AtomicTxn, BTreeMap<ManagerId, LocalStatus>)> = BTreeMap::new();
        for (id, n) in &self.fabric.nodes {
            let g = lock(n);
            let Some(h) = g.host.as_ref() else { continue };
            for r in h.book().records() {
                let e = statuses.entry(r.txn.txn_id.clone()).or_insert_with(|| (r.txn.clone(), BTreeMap::new()));
                e.1.insert(id.clone(), r.status);
            }
        }
        let mut committed = BTreeSet::new();
        let mut aborted = 0;
        for (txn_id, (txn, seen)) in &statuses {
            let all: Vec<LocalStatus> =
                txn.participants().iter().map(|p| seen.get(p).copied().unwrap_or(LocalStatus::Unknown)).collect();
            if all.contains(&LocalStatus::Prepared) {
                v.push(format!("{txn_id} still prepared after recovery: {all:?}"));
            }
            if all.contains(&LocalStatus::Committed) {
                if all.iter().any(|s| *s != LocalStatus::Committed) {
                    v.push(format!("{txn_id} committed at some participants only: {all:?}"));
                }
                committed.insert(txn_id.clone());
            } else {
                aborted += 1;
            }
        }
        self.report.committed_txns = committed.len();
        self.report.aborted_txns = aborted;

        // Finality: commit decisions never move or change.
        for ((mgr, txn), (seq, digest)) in &self.finality {
            let Some(n) = self.fabric.nodes.get(mgr) else { continue };
            let g = lock(n);
            let same = g.host.as_ref().and_then(|h| h.ledger().get(*seq)).is_some_and(|e| e.digest() == *digest);
            if !same {
                v.push(format!("{mgr}: commit of {txn} at seq {seq} was lost or rewritten"));
            }
        }

        // Live state equals the fold of the ledger and a restart from disk.
        for (id, n) in &self.fabric.nodes {
            let g = lock(n);
            let Some(h) = g.host.as_ref() else { continue };
            let live = h.encode_state();
            match h.replayed_state() {
                Ok(s) if s == live => {}
                Ok(_) => v.push(format!("{id}: live state differs from replay")),
                Err(e) => v.push(format!("{id}: replay failed: {e}")),
            }
            let mut fresh = clone_shell(&g);
            match fresh.restart() {
                Ok(()) if fresh.host.as_ref().map(Host::encode_state) == Some(live) => {}
                Ok(()) => v.push(format!("{id}: state recovered from disk differs")),
                Err(e) => v.push(format!("{id}: recovery failed: {e}")),
            }
        }
        match IdentityManager::recover(self.id_disk.storage(), self.id_key.clone()) {
            Ok(r) if r.state_encoding() == self.ids.state_encoding() => {}
            Ok(_) => v.push("identity: state recovered from disk differs".into()),
            Err(e) => v.push(format!("identity: recovery failed: {e}")),
        }

        // Trade managers agree with the participants and hold nothing naked.
        let mut trades = 0;
        for (id, n) in &self.traders {
            let Some(tm) = n.tm.as_ref() else { continue };
            let entries = tm.ledger().entries();
            match crate::ledger::replay(entries.iter().map(|e| e.as_ref()), &TradeReducer(id.clone())) {
                Ok(s) if s.encode_state() == tm.state().encode_state() => {}
                Ok(_) => v.push(format!("{id}: live state differs from replay")),
                Err(e) => v.push(format!("{id}: replay failed: {e}")),
            }
            for (txn, _) in tm.state().intents() {
                v.push(format!("{id}: intent {txn} never resolved"));
            }
            for t in tm.state().settled_trades() {
                trades += 1;
                if !committed.contains(&t.txn_id) {
                    v.push(format!("{id}: trade {} settled but {} is not committed", t.trade_id, t.txn_id));
                }
            }
            for (txn_id, (txn, _)) in &statuses {
                if !txn_id.as_str().starts_with(&format!("{id}-X")) || !committed.contains(txn_id) {
                    continue;
                }
                let is_settlement = txn.actions.iter().any(|a| matches!(a.effect, Effect::Resource(ResourceEffect::Draw { .. })));
                if is_settlement && !tm.state().settled_trades().iter().any(|t| &t.txn_id == txn_id) {
                    v.push(format!("{id}: {txn_id} committed but its trade is not settled"));
                }
            }
            let held = |o: &crate::trading::Order| {
                let l = tm.state().listing(&o.isin)?;
                let mgr = match o.side {
                    crate::trading::Side::Buy => &l.currency_manager,
                    crate::trading::Side::Sell => &l.security_manager,
                };
                let node = self.fabric.nodes.get(mgr)?;
                let mut g = lock(node);
                let m = g.host.as_mut()?.resource()?;
                m.state().reservation(&o.reservation_id).map(|r| r.amount)
            };
            for o in tm.state().naked_orders(held) {
                v.push(format!("{id}: order {o} is not fully funded"));
            }
            let pending = tm.state().orders().filter(|o| o.status == crate::trading::OrderStatus::Pending).count();
            if pending > 0 {
                v.push(format!("{id}: {pending} orders still pending"));
            }

            // Real-time and ex-post surveillance agree.
            let expost = evaluate_stream(entries.iter().map(|e| e.as_ref()), &self.rules, Mode::ExPost);
            let mut a: Vec<_> = expost.iter().map(Alert::key).collect();
            let mut b: Vec<_> = self.alerts.iter().filter(|al| tm.state().listing(&al.isin).is_some()).map(Alert::key).collect();
            a.sort();
            b.sort();
            if a != b {
                v.push(format!("{id}: {} real-time alerts against {} ex-post", b.len(), a.len()));
            }
        }
        self.report.trades = trades;
        self.report.violations.extend(v);
    }

    fn finish(mut self) -> ScenarioRun {
        let mut ledgers = vec![("identity".to_owned(), self.ids.ledger().entries())];
        for (id, n) in &self.fabric.nodes {
            if let Some(h) = lock(n).host.as_ref() {
                ledgers.push((id.to_string(), h.ledger().entries()));
            }
        }
        for (id, n) in &self.traders {
            if let Some(tm) = n.tm.as_ref() {
                ledgers.push((id.to_string(), tm.ledger().entries()));
            }
        }
        for (id, entries) in &ledgers {
            let head = entries.last().map(|e| hex::encode(e.digest())).unwrap_or_default();
            self.report.ledgers.insert(id.clone(), LedgerSummary { entries: entries.len() as u64, head });
        }
        self.report.alerts = std::mem::take(&mut self.alerts);
        self.report.messages = self.fabric.messages;
        ScenarioRun { report: self.report, ledgers }
    }
}

fn clone_shell(n: &Node) -> Node {
    Node {
        id: n.id.clone(),
        kind: n.kind,
        host: None,
        disk: n.disk.clone(),
        operator: n.operator.clone(),
        dir: n.dir.clone(),
        recovering: false,
    }
}
