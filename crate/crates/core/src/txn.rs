//! Stateless two-phase-commit coordination across state managers.
//!
//! The coordinator keeps state only while a transaction runs. Decision
//! durability lives with the participants: a transaction is committed iff
//! any participant logged `Commit`. A participant that restarts with an
//! in-doubt transaction asks its peers; a peer that never saw the
//! transaction tombstones it as aborted before answering, so a late
//! `Prepare` can no longer succeed. If every peer is reachable and none
//! committed, the coordinator cannot commit either and the participant
//! aborts; if a peer is unreachable it stays blocked and raises an alert.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::contract::ContractEffect;
use crate::crypto::{PartySigner, Signer};
use crate::ids::{ManagerId, PartyId, TxnId};
use crate::ledger::{KeyDirectory, LedgerError};
use crate::resource::ResourceEffect;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Resource(ResourceEffect),
    Contract(ContractEffect),
}

impl Canonical for Effect {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Effect::Resource(r) => enc.str("resource").item(r),
            Effect::Contract(c) => enc.str("contract").item(c),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.str()?.as_str() {
            "resource" => Ok(Effect::Resource(dec.item()?)),
            "contract" => Ok(Effect::Contract(dec.item()?)),
            t => Err(CodecError::BadTag(t.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnAction {
    pub manager: ManagerId,
    pub effect: Effect,
}

impl Canonical for TxnAction {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.manager).item(&self.effect);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(TxnAction { manager: dec.item()?, effect: dec.item()? })
    }
}

/// A signed request to apply a set of effects atomically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomicTxn {
    pub txn_id: TxnId,
    pub actions: Vec<TxnAction>,
    pub initiator: PartyId,
    pub key_epoch: u64,
    pub signature: Vec<u8>,
}

fn txn_signing_bytes(txn_id: &TxnId, actions: &[TxnAction], initiator: &PartyId, key_epoch: u64) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str("atomic-txn").item(txn_id).list(actions).item(initiator).u64(key_epoch);
    e.finish()
}

impl AtomicTxn {
    pub fn new(txn_id: TxnId, actions: Vec<TxnAction>, initiator: &dyn Signer, key_epoch: u64) -> Self {
        let signature = initiator.sign(&txn_signing_bytes(&txn_id, &actions, initiator.party(), key_epoch));
        AtomicTxn { txn_id, actions, initiator: initiator.party().clone(), key_epoch, signature }
    }

    pub fn verify(&self, dir: &dyn KeyDirectory) -> bool {
        let msg = txn_signing_bytes(&self.txn_id, &self.actions, &self.initiator, self.key_epoch);
        self.key_epoch <= dir.epoch()
            && dir.key_at(&self.initiator, self.key_epoch).is_some_and(|k| k.verify(&msg, &self.signature))
    }

    /// Distinct target managers in order of first appearance.
    pub fn participants(&self) -> Vec<ManagerId> {
        let mut seen = BTreeSet::new();
        self.actions.iter().filter(|a| seen.insert(&a.manager)).map(|a| a.manager.clone()).collect()
    }

    pub fn effects_for<'a>(&'a self, manager: &ManagerId) -> impl Iterator<Item = &'a Effect> + 'a {
        let manager = manager.clone();
        self.actions.iter().filter(move |a| a.manager == manager).map(|a| &a.effect)
    }
}

impl Canonical for AtomicTxn {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.txn_id).list(&self.actions).item(&self.initiator).u64(self.key_epoch).bytes(&self.signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(AtomicTxn {
            txn_id: dec.item()?,
            actions: dec.list()?,
            initiator: dec.item()?,
            key_epoch: dec.u64()?,
            signature: dec.bytes()?.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Commit,
    Abort,
}

impl Decision {
    fn tag(self) -> &'static str {
        match self {
            Decision::Commit => "commit",
            Decision::Abort => "abort",
        }
    }
    fn from_tag(s: &str) -> Result<Self, CodecError> {
        match s {
            "commit" => Ok(Decision::Commit),
            "abort" => Ok(Decision::Abort),
            t => Err(CodecError::BadTag(t.to_owned())),
        }
    }
}

/// What one participant knows about a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalStatus {
    Unknown,
    Prepared,
    Committed,
    Aborted,
}

impl LocalStatus {
    fn tag(self) -> &'static str {
        match self {
            LocalStatus::Unknown => "unknown",
            LocalStatus::Prepared => "prepared",
            LocalStatus::Committed => "committed",
            LocalStatus::Aborted => "aborted",
        }
    }
    fn from_tag(s: &str) -> Result<Self, CodecError> {
        Ok(match s {
            "unknown" => LocalStatus::Unknown,
            "prepared" => LocalStatus::Prepared,
            "committed" => LocalStatus::Committed,
            "aborted" => LocalStatus::Aborted,
            t => return Err(CodecError::BadTag(t.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vote {
    Yes,
    No(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Prepare(AtomicTxn),
    VoteYes,
    VoteNo(String),
    Commit,
    Abort,
    Ack { seq: u64 },
    DecisionQuery,
    DecisionReply(LocalStatus),
    Error(String),
}

impl Canonical for Body {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Body::Prepare(t) => enc.str("prepare").item(t),
            Body::VoteYes => enc.str("vote_yes"),
            Body::VoteNo(r) => enc.str("vote_no").str(r),
            Body::Commit => enc.str("commit"),
            Body::Abort => enc.str("abort"),
            Body::Ack { seq } => enc.str("ack").u64(*seq),
            Body::DecisionQuery => enc.str("decision_query"),
            Body::DecisionReply(s) => enc.str("decision_reply").str(s.tag()),
            Body::Error(e) => enc.str("error").str(e),
        };
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match dec.str()?.as_str() {
            "prepare" => Body::Prepare(dec.item()?),
            "vote_yes" => Body::VoteYes,
            "vote_no" => Body::VoteNo(dec.str()?),
            "commit" => Body::Commit,
            "abort" => Body::Abort,
            "ack" => Body::Ack { seq: dec.u64()? },
            "decision_query" => Body::DecisionQuery,
            "decision_reply" => Body::DecisionReply(LocalStatus::from_tag(&dec.str()?)?),
            "error" => Body::Error(dec.str()?),
            t => return Err(CodecError::BadTag(t.to_owned())),
        })
    }
}

/// A signed protocol message. The wire form is its canonical encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnMessage {
    pub txn_id: TxnId,
    pub body: Body,
    pub sender: PartyId,
    pub key_epoch: u64,
    pub signature: Vec<u8>,
}

fn msg_signing_bytes(txn_id: &TxnId, body: &Body, sender: &PartyId, key_epoch: u64) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str("txn-message").item(txn_id).item(body).item(sender).u64(key_epoch);
    e.finish()
}

impl TxnMessage {
    pub fn new(txn_id: TxnId, body: Body, signer: &dyn Signer, key_epoch: u64) -> Self {
        let signature = signer.sign(&msg_signing_bytes(&txn_id, &body, signer.party(), key_epoch));
        TxnMessage { txn_id, body, sender: signer.party().clone(), key_epoch, signature }
    }

    /// Signature check plus the requirement that protocol traffic comes
    /// from node operators.
    pub fn verify(&self, dir: &dyn KeyDirectory) -> bool {
        let msg = msg_signing_bytes(&self.txn_id, &self.body, &self.sender, self.key_epoch);
        self.key_epoch <= dir.epoch()
            && dir.may_author(&self.sender, "txn.message")
            && dir.key_at(&self.sender, self.key_epoch).is_some_and(|k| k.verify(&msg, &self.signature))
    }
}

impl Canonical for TxnMessage {
    fn encode(&self, enc: &mut Encoder) {
        enc.item(&self.txn_id).item(&self.body).item(&self.sender).u64(self.key_epoch).bytes(&self.signature);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(TxnMessage {
            txn_id: dec.item()?,
            body: dec.item()?,
            sender: dec.item()?,
            key_epoch: dec.u64()?,
            signature: dec.bytes()?.to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// Participant bookkeeping shared by every participating manager.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnLogEvent {
    Prepared(AtomicTxn),
    Decided { txn_id: TxnId, decision: Decision },
    Tombstone { txn_id: TxnId },
}

impl TxnLogEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TxnLogEvent::Prepared(_) => "txn.prepared",
            TxnLogEvent::Decided { .. } => "txn.decided",
            TxnLogEvent::Tombstone { .. } => "txn.tombstone",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            TxnLogEvent::Prepared(t) => e.item(t),
            TxnLogEvent::Decided { txn_id, decision } => e.item(txn_id).str(decision.tag()),
            TxnLogEvent::Tombstone { txn_id } => e.item(txn_id),
        };
        e.finish()
    }

    pub fn decode(kind: &str, payload: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(payload);
        let ev = match kind {
            "txn.prepared" => TxnLogEvent::Prepared(d.item()?),
            "txn.decided" => TxnLogEvent::Decided { txn_id: d.item()?, decision: Decision::from_tag(&d.str()?)? },
            "txn.tombstone" => TxnLogEvent::Tombstone { txn_id: d.item()? },
            t => return Err(CodecError::BadTag(t.to_owned())),
        };
        d.finish()?;
        Ok(ev)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnRecord {
    pub txn: AtomicTxn,
    pub status: LocalStatus,
}

/// Per-participant transaction records, rebuilt from `txn.*` ledger entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxnBook {
    records: BTreeMap<TxnId, TxnRecord>,
    tombstones: BTreeSet<TxnId>,
}

impl TxnBook {
    pub fn status(&self, id: &TxnId) -> LocalStatus {
        if let Some(r) = self.records.get(id) {
            r.status
        } else if self.tombstones.contains(id) {
            LocalStatus::Aborted
        } else {
            LocalStatus::Unknown
        }
    }

    pub fn get(&self, id: &TxnId) -> Option<&TxnRecord> {
        self.records.get(id)
    }

    pub fn insert_prepared(&mut self, txn: AtomicTxn) {
        self.records.insert(txn.txn_id.clone(), TxnRecord { txn, status: LocalStatus::Prepared });
    }

    pub fn set_decided(&mut self, id: &TxnId, d: Decision) {
        if let Some(r) = self.records.get_mut(id) {
            r.status = match d {
                Decision::Commit => LocalStatus::Committed,
                Decision::Abort => LocalStatus::Aborted,
            };
        }
    }

    pub fn tombstone(&mut self, id: &TxnId) {
        self.tombstones.insert(id.clone());
    }

    /// Every transaction this participant prepared, in id order.
    pub fn records(&self) -> impl Iterator<Item = &TxnRecord> {
        self.records.values()
    }

    pub fn in_doubt(&self) -> Vec<AtomicTxn> {
        self.records.values().filter(|r| r.status == LocalStatus::Prepared).map(|r| r.txn.clone()).collect()
    }

    pub fn encode_into(&self, e: &mut Encoder) {
        e.u64(self.records.len() as u64);
        for (id, r) in &self.records {
            e.item(id).str(r.status.tag()).item(&r.txn);
        }
        let t: Vec<TxnId> = self.tombstones.iter().cloned().collect();
        e.list(&t);
    }
}

#[derive(Debug, Error)]
pub enum TxnError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("transaction {txn} already decided {existing:?}")]
    AlreadyDecided { txn: TxnId, existing: LocalStatus },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// A state manager that can take part in atomic transactions.
pub trait TxnHost {
    fn host_id(&self) -> &ManagerId;
    fn directory(&self) -> &dyn KeyDirectory;
    fn operator(&self) -> &PartySigner;
    fn txn_status(&self, id: &TxnId) -> LocalStatus;
    /// Validates this manager's effects; on success takes holds and durably
    /// logs `Prepared`. A `No` vote leaves state untouched.
    fn prepare(&mut self, txn: &AtomicTxn) -> Vote;
    /// Applies or releases prepared effects and logs the decision. Returns
    /// the ledger seq of the decision entry.
    fn decide(&mut self, id: &TxnId, d: Decision) -> Result<u64, TxnError>;
    fn tombstone(&mut self, id: &TxnId) -> Result<(), TxnError>;
    fn in_doubt(&self) -> Vec<AtomicTxn>;
}

/// Participant side of the protocol. Returns `None` for messages that fail
/// authentication (they are treated as never received).
pub fn participant_handle<H: TxnHost + ?Sized>(host: &mut H, msg: &TxnMessage) -> Option<TxnMessage> {
    if !msg.verify(host.directory()) {
        return None;
    }
    let id = msg.txn_id.clone();
    let status = host.txn_status(&id);
    let body = match &msg.body {
        Body::Prepare(txn) => {
            if txn.txn_id != id {
                Body::VoteNo("txn id mismatch".into())
            } else {
                match status {
                    LocalStatus::Prepared | LocalStatus::Committed => Body::VoteYes,
                    LocalStatus::Aborted => Body::VoteNo("already aborted".into()),
                    LocalStatus::Unknown if !txn.verify(host.directory()) => {
                        Body::VoteNo("bad initiator signature".into())
                    }
                    LocalStatus::Unknown => match host.prepare(txn) {
                        Vote::Yes => Body::VoteYes,
                        Vote::No(r) => Body::VoteNo(r),
                    },
                }
            }
        }
        Body::Commit => match status {
            LocalStatus::Unknown => Body::Error(TxnError::UnknownTxn(id.clone()).to_string()),
            LocalStatus::Aborted => Body::Error(format!("{id} already aborted")),
            LocalStatus::Prepared | LocalStatus::Committed => match host.decide(&id, Decision::Commit) {
                Ok(seq) => Body::Ack { seq },
                Err(e) => Body::Error(e.to_string()),
            },
        },
        Body::Abort => match status {
            LocalStatus::Unknown => match host.tombstone(&id) {
                Ok(()) => Body::Ack { seq: 0 },
                Err(e) => Body::Error(e.to_string()),
            },
            LocalStatus::Committed => Body::Error(format!("{id} already committed")),
            LocalStatus::Prepared | LocalStatus::Aborted => match host.decide(&id, Decision::Abort) {
                Ok(seq) => Body::Ack { seq },
                Err(e) => Body::Error(e.to_string()),
            },
        },
        Body::DecisionQuery => {
            if status == LocalStatus::Unknown {
                // Presumed abort: never prepare this transaction afterwards.
                if host.tombstone(&id).is_err() {
                    return None;
                }
                Body::DecisionReply(LocalStatus::Aborted)
            } else {
                Body::DecisionReply(status)
            }
        }
        _ => return None,
    };
    let epoch = host.directory().epoch();
    Some(TxnMessage::new(id, body, host.operator(), epoch))
}

/// Shared `decide` logic: idempotent on the same decision, an error on a
/// conflicting one.
pub fn check_decision(book: &TxnBook, id: &TxnId, d: Decision) -> Result<Option<u64>, TxnError> {
    match (book.status(id), d) {
        (LocalStatus::Unknown, _) => Err(TxnError::UnknownTxn(id.clone())),
        (LocalStatus::Committed, Decision::Commit) | (LocalStatus::Aborted, Decision::Abort) => Ok(Some(0)),
        (LocalStatus::Prepared, _) => Ok(None),
        (existing, _) => Err(TxnError::AlreadyDecided { txn: id.clone(), existing }),
    }
}

// ---------------------------------------------------------------------------
// Transport

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("{0} unreachable")]
    Unreachable(ManagerId),
}

/// Points at which the fault injector may crash a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Checkpoint {
    BeforePrepare,
    AfterPrepare,
    BeforeDecision,
    MidDecision,
    AfterIntent,
    BeforeResult,
}

impl Checkpoint {
    pub fn name(self) -> &'static str {
        match self {
            Checkpoint::BeforePrepare => "before_prepare",
            Checkpoint::AfterPrepare => "after_prepare",
            Checkpoint::BeforeDecision => "before_decision",
            Checkpoint::MidDecision => "mid_decision",
            Checkpoint::AfterIntent => "after_intent",
            Checkpoint::BeforeResult => "before_result",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use Checkpoint::*;
        [BeforePrepare, AfterPrepare, BeforeDecision, MidDecision, AfterIntent, BeforeResult]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crashed;

pub trait Transport {
    /// Request/response exchange with a manager or coordinator.
    fn call(&mut self, from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Result<TxnMessage, TransportError>;

    /// Crash hook; returns `Err` if `who` must stop here.
    fn checkpoint(&mut self, _who: &ManagerId, _at: Checkpoint) -> Result<(), Crashed> {
        Ok(())
    }

    /// Coordinators that in-doubt participants may query.
    fn coordinators(&self) -> Vec<ManagerId> {
        Vec::new()
    }
}

// ---------------------------------------------------------------------------
// Coordinator

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxnOutcome {
    /// Decision seq per participant that acknowledged the commit.
    Committed { acks: BTreeMap<ManagerId, u64> },
    Aborted { reason: String },
    /// The coordinator stopped before the decision became durable anywhere;
    /// participants resolve it on their own.
    InDoubt { reason: String },
}

impl TxnOutcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, TxnOutcome::Committed { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoordinatorConfig {
    /// Rounds of commit redelivery before giving up on unacknowledged
    /// participants (they recover the decision from their peers).
    pub commit_rounds: u32,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig { commit_rounds: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Collecting,
    Committing,
    Aborting,
}

pub struct Coordinator<D: KeyDirectory> {
    id: ManagerId,
    signer: PartySigner,
    dir: D,
    config: CoordinatorConfig,
    in_flight: Mutex<BTreeMap<TxnId, Phase>>,
}

impl<D: KeyDirectory> Coordinator<D> {
    pub fn new(id: ManagerId, signer: PartySigner, dir: D) -> Self {
        Coordinator { id, signer, dir, config: CoordinatorConfig::default(), in_flight: Mutex::default() }
    }

    pub fn with_config(mut self, config: CoordinatorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn id(&self) -> &ManagerId {
        &self.id
    }

    /// Number of transactions currently held in local state.
    pub fn in_flight(&self) -> usize {
        self.lock().len()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<TxnId, Phase>> {
        self.in_flight.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn msg(&self, id: &TxnId, body: Body) -> TxnMessage {
        TxnMessage::new(id.clone(), body, &self.signer, self.dir.epoch())
    }

    /// Answers a participant's decision query from local state only.
    pub fn handle_query(&self, msg: &TxnMessage) -> Option<TxnMessage> {
        if !msg.verify(&self.dir) || msg.body != Body::DecisionQuery {
            return None;
        }
        let status = match self.lock().get(&msg.txn_id) {
            Some(Phase::Committing) => LocalStatus::Committed,
            Some(Phase::Aborting) => LocalStatus::Aborted,
            Some(Phase::Collecting) => LocalStatus::Prepared,
            None => LocalStatus::Unknown,
        };
        Some(self.msg(&msg.txn_id, Body::DecisionReply(status)))
    }

    pub fn execute_atomic(&self, txn: AtomicTxn, net: &mut dyn Transport) -> TxnOutcome {
        if txn.actions.is_empty() {
            return TxnOutcome::Aborted { reason: "no actions".into() };
        }
        if !txn.verify(&self.dir) {
            return TxnOutcome::Aborted { reason: "bad initiator signature".into() };
        }
        let id = txn.txn_id.clone();
        self.lock().insert(id.clone(), Phase::Collecting);
        let out = self.run(txn, net);
        self.lock().remove(&id);
        out
    }

    fn reply_ok(&self, reply: &TxnMessage, id: &TxnId) -> bool {
        &reply.txn_id == id && reply.verify(&self.dir)
    }

    fn run(&self, txn: AtomicTxn, net: &mut dyn Transport) -> TxnOutcome {
        let id = txn.txn_id.clone();
        let crashed = |at: &str| TxnOutcome::InDoubt { reason: format!("coordinator crashed {at}") };
        if net.checkpoint(&self.id, Checkpoint::BeforePrepare).is_err() {
            return crashed("before prepare");
        }
        let participants = txn.participants();
        let mut contacted = Vec::new();
        let mut refusal = None;
        for p in &participants {
            contacted.push(p.clone());
            let vote = net.call(&self.id, p, self.msg(&id, Body::Prepare(txn.clone())));
            match vote {
                Ok(r) if self.reply_ok(&r, &id) && r.body == Body::VoteYes => {}
                Ok(r) if self.reply_ok(&r, &id) => {
                    refusal = Some(match r.body {
                        Body::VoteNo(reason) => format!("{p}: {reason}"),
                        other => format!("{p}: unexpected {other:?}"),
                    });
                }
                Ok(_) => refusal = Some(format!("{p}: unauthenticated vote")),
                Err(e) => refusal = Some(format!("{p}: {e}")),
            }
            if refusal.is_some() {
                break;
            }
            if net.checkpoint(&self.id, Checkpoint::AfterPrepare).is_err() {
                return crashed("after prepare");
            }
        }
        if net.checkpoint(&self.id, Checkpoint::BeforeDecision).is_err() {
            return crashed("before decision");
        }
        if let Some(reason) = refusal {
            self.lock().insert(id.clone(), Phase::Aborting);
            for p in &contacted {
                // Best effort; unreached participants resolve by presumed abort.
                let _ = net.call(&self.id, p, self.msg(&id, Body::Abort));
            }
            return TxnOutcome::Aborted { reason };
        }
        self.lock().insert(id.clone(), Phase::Committing);
        let mut acks = BTreeMap::new();
        for _ in 0..self.config.commit_rounds {
            for p in &participants {
                if acks.contains_key(p) {
                    continue;
                }
                if net.checkpoint(&self.id, Checkpoint::MidDecision).is_err() {
                    return if acks.is_empty() {
                        crashed("during commit broadcast")
                    } else {
                        TxnOutcome::Committed { acks }
                    };
                }
                if let Ok(r) = net.call(&self.id, p, self.msg(&id, Body::Commit)) {
                    if let (true, Body::Ack { seq }) = (self.reply_ok(&r, &id), &r.body) {
                        acks.insert(p.clone(), *seq);
                    }
                }
            }
            if acks.len() == participants.len() {
                break;
            }
        }
        if acks.is_empty() {
            TxnOutcome::InDoubt { reason: "no participant acknowledged commit".into() }
        } else {
            TxnOutcome::Committed { acks }
        }
    }
}

// ---------------------------------------------------------------------------
// Recovery

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Committed(TxnId),
    Aborted(TxnId),
    /// Cannot decide safely; operator alert.
    Blocked { txn: TxnId, alert: String },
}

/// Resolves every in-doubt transaction of `host` by asking peers and
/// coordinators.
pub fn recover_participant<H: TxnHost + ?Sized>(host: &mut H, net: &mut dyn Transport) -> Vec<Resolution> {
    let me = host.host_id().clone();
    let mut out = Vec::new();
    for txn in host.in_doubt() {
        let id = txn.txn_id.clone();
        let mut committed = false;
        let mut aborted = false;
        let mut unreachable = Vec::new();
        let ask = |net: &mut dyn Transport, host: &H, to: &ManagerId| {
            let q = TxnMessage::new(id.clone(), Body::DecisionQuery, host.operator(), host.directory().epoch());
            match net.call(&me, to, q) {
                Ok(r) if r.txn_id == id && r.verify(host.directory()) => match r.body {
                    Body::DecisionReply(s) => Some(s),
                    _ => None,
                },
                _ => None,
            }
        };
        for peer in txn.participants().iter().filter(|p| **p != me) {
            match ask(net, host, peer) {
                Some(LocalStatus::Committed) => committed = true,
                Some(LocalStatus::Aborted | LocalStatus::Unknown) => aborted = true,
                Some(LocalStatus::Prepared) => {}
                None => unreachable.push(peer.clone()),
            }
        }
        let mut coordinator_running = false;
        if !committed && !aborted {
            for c in net.coordinators() {
                match ask(net, host, &c) {
                    Some(LocalStatus::Committed) => committed = true,
                    Some(LocalStatus::Aborted) => aborted = true,
                    Some(LocalStatus::Prepared) => coordinator_running = true,
                    // A silent or restarted coordinator holds nothing.
                    Some(LocalStatus::Unknown) | None => {}
                }
            }
        }
        let decision = if committed {
            Some(Decision::Commit)
        } else if aborted || (unreachable.is_empty() && !coordinator_running) {
            Some(Decision::Abort)
        } else {
            None
        };
        match decision {
            Some(d) => match host.decide(&id, d) {
                Ok(_) => out.push(match d {
                    Decision::Commit => Resolution::Committed(id),
                    Decision::Abort => Resolution::Aborted(id),
                }),
                Err(e) => out.push(Resolution::Blocked { txn: id, alert: e.to_string() }),
            },
            None => {
                let alert = if coordinator_running {
                    format!("{me}: {id} still in flight at its coordinator")
                } else {
                    let names: Vec<String> = unreachable.iter().map(|m| m.to_string()).collect();
                    format!("{me}: {id} in doubt; cannot reach {}", names.join(", "))
                };
                out.push(Resolution::Blocked { txn: id, alert });
            }
        }
    }
    out
}

/// Status of a transaction as reconstructed from its participants:
/// committed iff any logged commit.
pub fn reconstructed_status(statuses: &[LocalStatus]) -> LocalStatus {
    if statuses.contains(&LocalStatus::Committed) {
        LocalStatus::Committed
    } else if statuses.iter().any(|s| *s == LocalStatus::Prepared) {
        LocalStatus::Prepared
    } else if statuses.iter().all(|s| *s == LocalStatus::Unknown) {
        LocalStatus::Unknown
    } else {
        LocalStatus::Aborted
    }
}
