//! Resource manager: balances of one or more resource types (instrument
//! units, currency) with credit floors, reservations and two-phase-commit
//! holds.
//!
//! Amounts are integers in minor units. Accounts are keyed by
//! `(resource, owner)`; crediting an unknown account opens it with a zero
//! credit limit. Holds taken by a prepared transaction count towards
//! `reserved` until the decision arrives.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{PartySigner, Signer};
use crate::identity::IdentityHandle;
use crate::ids::{ManagerId, PartyId, ResourceId, TxnId};
use crate::ledger::{Draft, EventEnvelope, KeyDirectory, Ledger, LedgerError, Reducer, Storage};
use crate::txn::{
    check_decision, AtomicTxn, Decision, Effect, LocalStatus, TxnBook, TxnError, TxnHost, TxnLogEvent, Vote,
};

/// An effect a transaction asks a resource manager to apply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceEffect {
    Define { resource: ResourceId, decimals: u32, issuer: Option<PartyId> },
    Transfer { from: PartyId, to: PartyId, resource: ResourceId, amount: u64 },
    /// Creates a reservation that outlives the transaction.
    Reserve { reservation_id: String, owner: PartyId, resource: ResourceId, amount: u64 },
    /// Moves part of a reservation to `to`.
    Draw { reservation_id: String, amount: u64, to: PartyId },
    /// Returns part of a reservation to its owner.
    Release { reservation_id: String, amount: u64 },
    /// Votes yes only if the positive holdings of `resource`, excluding
    /// `excluding`, are exactly `holdings`. Locks the resource until decided.
    AssertHoldings { resource: ResourceId, holdings: Vec<(PartyId, u64)>, excluding: Option<PartyId> },
}

impl Canonical for ResourceEffect {
    fn encode(&self, e: &mut Encoder) {
        match self {
            ResourceEffect::Define { resource, decimals, issuer } => {
                e.str("define").item(resource).u64(*decimals as u64).option(issuer.as_ref())
            }
            ResourceEffect::Transfer { from, to, resource, amount } => {
                e.str("transfer").item(from).item(to).item(resource).u64(*amount)
            }
            ResourceEffect::Reserve { reservation_id, owner, resource, amount } => {
                e.str("reserve").str(reservation_id).item(owner).item(resource).u64(*amount)
            }
            ResourceEffect::Draw { reservation_id, amount, to } => {
                e.str("draw").str(reservation_id).u64(*amount).item(to)
            }
            ResourceEffect::Release { reservation_id, amount } => e.str("release").str(reservation_id).u64(*amount),
            ResourceEffect::AssertHoldings { resource, holdings, excluding } => {
                e.str("assert_holdings").item(resource).list(holdings).option(excluding.as_ref())
            }
        };
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(match d.str()?.as_str() {
            "define" => ResourceEffect::Define {
                resource: d.item()?,
                decimals: u32::try_from(d.u64()?).map_err(|_| CodecError::Invalid("decimals".into()))?,
                issuer: d.option()?,
            },
            "transfer" => {
                ResourceEffect::Transfer { from: d.item()?, to: d.item()?, resource: d.item()?, amount: d.u64()? }
            }
            "reserve" => ResourceEffect::Reserve {
                reservation_id: d.str()?,
                owner: d.item()?,
                resource: d.item()?,
                amount: d.u64()?,
            },
            "draw" => ResourceEffect::Draw { reservation_id: d.str()?, amount: d.u64()?, to: d.item()? },
            "release" => ResourceEffect::Release { reservation_id: d.str()?, amount: d.u64()? },
            "assert_holdings" => {
                ResourceEffect::AssertHoldings { resource: d.item()?, holdings: d.list()?, excluding: d.option()? }
            }
            t => return Err(CodecError::BadTag(t.to_owned())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferInstruction {
    pub from: PartyId,
    pub to: PartyId,
    pub resource: ResourceId,
    pub amount: u64,
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservationStatus {
    Held,
    Committed,
    Returned,
}

impl ReservationStatus {
    fn tag(self) -> &'static str {
        match self {
            ReservationStatus::Held => "held",
            ReservationStatus::Committed => "committed",
            ReservationStatus::Returned => "returned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SettleDecision {
    Commit(PartyId),
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub reservation_id: String,
    pub owner: PartyId,
    pub resource: ResourceId,
    /// Amount still held.
    pub amount: i64,
    /// Portion of `amount` pinned by prepared transactions.
    pub pinned: i64,
    /// Total moved to other parties so far.
    pub drawn: i64,
    pub beneficiary: Option<PartyId>,
    pub status: ReservationStatus,
    pub created_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Account {
    pub available: i64,
    pub reserved: i64,
    /// Floor for `available`; zero or negative.
    pub credit_limit: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceType {
    pub decimals: u32,
    pub issuer: Option<PartyId>,
    pub supply: i64,
    /// Prepared transaction effects touching this resource.
    pending: u32,
    locked_by: Option<TxnId>,
}

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("insufficient balance: {party} has {available} {resource}, needs {needed} (floor {floor})")]
    InsufficientBalance { party: PartyId, resource: ResourceId, available: i64, needed: i64, floor: i64 },
    #[error("{0}")]
    Unauthorized(String),
    #[error("unknown account {1} for {0}")]
    UnknownAccount(ResourceId, PartyId),
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("resource {0} already defined")]
    DuplicateResource(ResourceId),
    #[error("unknown reservation {0}")]
    UnknownReservation(String),
    #[error("reservation {0} already exists")]
    DuplicateReservation(String),
    #[error("reservation {id} already {status:?}")]
    AlreadyTerminal { id: String, status: ReservationStatus },
    #[error("reservation {0} is pinned by a transaction in progress")]
    ReservationBusy(String),
    #[error("reservation {id} holds {held} unpinned, requested {requested}")]
    ReservationShort { id: String, held: i64, requested: i64 },
    #[error("resource {0} is locked by a transaction in progress")]
    Locked(ResourceId),
    #[error("holdings of {0} differ from the asserted snapshot")]
    HoldingsMismatch(ResourceId),
    #[error("amount must be positive and fit in i64")]
    InvalidAmount,
    #[error("sender and receiver are the same party")]
    SelfTransfer,
    #[error("reservation {0} has not reached its expiry")]
    NotExpired(String),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl ResourceError {
    /// Stable reason code carried in a `No` vote.
    pub fn code(&self) -> &'static str {
        match self {
            ResourceError::InsufficientBalance { .. } => "InsufficientBalance",
            ResourceError::Unauthorized(_) => "Unauthorized",
            ResourceError::UnknownAccount(..) => "UnknownAccount",
            ResourceError::UnknownResource(_) => "UnknownResource",
            ResourceError::DuplicateResource(_) => "DuplicateResource",
            ResourceError::UnknownReservation(_) => "UnknownReservation",
            ResourceError::DuplicateReservation(_) => "DuplicateReservation",
            ResourceError::AlreadyTerminal { .. } => "AlreadyTerminal",
            ResourceError::ReservationBusy(_) => "ReservationBusy",
            ResourceError::ReservationShort { .. } => "ReservationShort",
            ResourceError::Locked(_) => "Locked",
            ResourceError::HoldingsMismatch(_) => "HoldingsMismatch",
            ResourceError::InvalidAmount => "InvalidAmount",
            ResourceError::SelfTransfer => "SelfTransfer",
            ResourceError::NotExpired(_) => "NotExpired",
            ResourceError::Malformed(_) => "Malformed",
            ResourceError::Ledger(_) => "Ledger",
        }
    }
}

fn amount_i64(a: u64) -> Result<i64, ResourceError> {
    i64::try_from(a).ok().filter(|v| *v > 0).ok_or(ResourceError::InvalidAmount)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ResourceEvent {
    Define { resource: ResourceId, decimals: u32, issuer: Option<PartyId> },
    Open { resource: ResourceId, owner: PartyId, credit_limit: i64 },
    Issue { resource: ResourceId, to: PartyId, amount: u64 },
    Transfer(TransferInstruction),
    Reserve { reservation_id: String, owner: PartyId, resource: ResourceId, amount: u64, beneficiary: Option<PartyId> },
    Settle { reservation_id: String, decision: SettleDecision },
    Expire { reservation_id: String },
}

impl ResourceEvent {
    fn kind(&self) -> &'static str {
        match self {
            ResourceEvent::Define { .. } => "resource.define",
            ResourceEvent::Open { .. } => "resource.open",
            ResourceEvent::Issue { .. } => "resource.issue",
            ResourceEvent::Transfer(_) => "resource.transfer",
            ResourceEvent::Reserve { .. } => "resource.reserve",
            ResourceEvent::Settle { .. } => "resource.settle",
            ResourceEvent::Expire { .. } => "resource.expire",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            ResourceEvent::Define { resource, decimals, issuer } => {
                e.item(resource).u64(*decimals as u64).option(issuer.as_ref());
            }
            ResourceEvent::Open { resource, owner, credit_limit } => {
                e.item(resource).item(owner).i64(*credit_limit);
            }
            ResourceEvent::Issue { resource, to, amount } => {
                e.item(resource).item(to).u64(*amount);
            }
            ResourceEvent::Transfer(t) => {
                e.item(&t.from).item(&t.to).item(&t.resource).u64(t.amount).option(t.reference.as_ref());
            }
            ResourceEvent::Reserve { reservation_id, owner, resource, amount, beneficiary } => {
                e.str(reservation_id).item(owner).item(resource).u64(*amount).option(beneficiary.as_ref());
            }
            ResourceEvent::Settle { reservation_id, decision } => {
                e.str(reservation_id);
                match decision {
                    SettleDecision::Commit(b) => e.str("commit").item(b),
                    SettleDecision::Abort => e.str("abort"),
                };
            }
            ResourceEvent::Expire { reservation_id } => {
                e.str(reservation_id);
            }
        }
        e.finish()
    }

    fn decode(kind: &str, payload: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(payload);
        let ev = match kind {
            "resource.define" => ResourceEvent::Define {
                resource: d.item()?,
                decimals: u32::try_from(d.u64()?).map_err(|_| CodecError::Invalid("decimals".into()))?,
                issuer: d.option()?,
            },
            "resource.open" => ResourceEvent::Open { resource: d.item()?, owner: d.item()?, credit_limit: d.i64()? },
            "resource.issue" => ResourceEvent::Issue { resource: d.item()?, to: d.item()?, amount: d.u64()? },
            "resource.transfer" => ResourceEvent::Transfer(TransferInstruction {
                from: d.item()?,
                to: d.item()?,
                resource: d.item()?,
                amount: d.u64()?,
                reference: d.option()?,
            }),
            "resource.reserve" => ResourceEvent::Reserve {
                reservation_id: d.str()?,
                owner: d.item()?,
                resource: d.item()?,
                amount: d.u64()?,
                beneficiary: d.option()?,
            },
            "resource.settle" => {
                let reservation_id = d.str()?;
                let decision = match d.str()?.as_str() {
                    "commit" => SettleDecision::Commit(d.item()?),
                    "abort" => SettleDecision::Abort,
                    t => return Err(CodecError::BadTag(t.to_owned())),
                };
                ResourceEvent::Settle { reservation_id, decision }
            }
            "resource.expire" => ResourceEvent::Expire { reservation_id: d.str()? },
            t => return Err(CodecError::BadTag(t.to_owned())),
        };
        d.finish()?;
        Ok(ev)
    }
}

/// Balances and reservations; a pure fold of one resource ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceState {
    manager: ManagerId,
    resources: BTreeMap<ResourceId, ResourceType>,
    accounts: BTreeMap<(ResourceId, PartyId), Account>,
    reservations: BTreeMap<String, Reservation>,
    pending_ids: BTreeSet<String>,
    book: TxnBook,
}

impl ResourceState {
    pub fn new(manager: ManagerId) -> Self {
        ResourceState {
            manager,
            resources: BTreeMap::new(),
            accounts: BTreeMap::new(),
            reservations: BTreeMap::new(),
            pending_ids: BTreeSet::new(),
            book: TxnBook::default(),
        }
    }

    pub fn account(&self, party: &PartyId, resource: &ResourceId) -> Option<&Account> {
        self.accounts.get(&(resource.clone(), party.clone()))
    }

    pub fn available(&self, party: &PartyId, resource: &ResourceId) -> i64 {
        self.account(party, resource).map_or(0, |a| a.available)
    }

    pub fn reserved(&self, party: &PartyId, resource: &ResourceId) -> i64 {
        self.account(party, resource).map_or(0, |a| a.reserved)
    }

    /// `available + reserved`.
    pub fn holding(&self, party: &PartyId, resource: &ResourceId) -> i64 {
        self.account(party, resource).map_or(0, |a| a.available + a.reserved)
    }

    pub fn resource(&self, id: &ResourceId) -> Option<&ResourceType> {
        self.resources.get(id)
    }

    pub fn resources(&self) -> impl Iterator<Item = (&ResourceId, &ResourceType)> {
        self.resources.iter()
    }

    pub fn reservation(&self, id: &str) -> Option<&Reservation> {
        self.reservations.get(id)
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&(ResourceId, PartyId), &Account)> {
        self.accounts.iter()
    }

    /// Sum of `available + reserved` over all accounts of `resource`.
    pub fn total(&self, resource: &ResourceId) -> i64 {
        self.accounts.iter().filter(|((r, _), _)| r == resource).map(|(_, a)| a.available + a.reserved).sum()
    }

    pub fn supply(&self, resource: &ResourceId) -> i64 {
        self.resources.get(resource).map_or(0, |r| r.supply)
    }

    /// Positive holdings of `resource` sorted by party id.
    pub fn holdings(&self, resource: &ResourceId, excluding: Option<&PartyId>) -> Vec<(PartyId, u64)> {
        self.accounts
            .iter()
            .filter(|((r, p), a)| r == resource && Some(p) != excluding && a.available + a.reserved > 0)
            .map(|((_, p), a)| (p.clone(), (a.available + a.reserved) as u64))
            .collect()
    }

    pub fn txn_book(&self) -> &TxnBook {
        &self.book
    }

    fn acct(&mut self, resource: &ResourceId, party: &PartyId) -> &mut Account {
        self.accounts.entry((resource.clone(), party.clone())).or_default()
    }

    fn require_unlocked(&self, resource: &ResourceId) -> Result<&ResourceType, ResourceError> {
        let r = self.resources.get(resource).ok_or_else(|| ResourceError::UnknownResource(resource.clone()))?;
        if r.locked_by.is_some() {
            return Err(ResourceError::Locked(resource.clone()));
        }
        Ok(r)
    }

    fn check_debit(&self, party: &PartyId, resource: &ResourceId, amount: i64) -> Result<(), ResourceError> {
        let a = self.account(party, resource).copied().unwrap_or_default();
        if a.available.checked_sub(amount).map_or(true, |left| left < a.credit_limit) {
            return Err(ResourceError::InsufficientBalance {
                party: party.clone(),
                resource: resource.clone(),
                available: a.available,
                needed: amount,
                floor: a.credit_limit,
            });
        }
        Ok(())
    }

    fn held_reservation(&self, id: &str) -> Result<&Reservation, ResourceError> {
        let r = self.reservations.get(id).ok_or_else(|| ResourceError::UnknownReservation(id.to_owned()))?;
        if r.status != ReservationStatus::Held {
            return Err(ResourceError::AlreadyTerminal { id: id.to_owned(), status: r.status });
        }
        Ok(r)
    }

    /// Validates this manager's share of `txn` without changing state.
    fn check_prepare(&self, txn: &AtomicTxn, dir: &dyn KeyDirectory) -> Result<(), ResourceError> {
        let who = &txn.initiator;
        let agent = dir.may_author(who, "txn.message");
        let unauthorized = |what: &str| ResourceError::Unauthorized(format!("{who} may not {what}"));
        let mut debits: BTreeMap<(ResourceId, PartyId), i64> = BTreeMap::new();
        let mut pins: BTreeMap<&str, i64> = BTreeMap::new();
        let mut defines = BTreeSet::new();
        let mut new_ids = BTreeSet::new();
        for eff in txn.effects_for(&self.manager) {
            let Effect::Resource(eff) = eff else {
                return Err(ResourceError::Malformed("non-resource effect".into()));
            };
            match eff {
                ResourceEffect::Define { resource, issuer, .. } => {
                    if !(agent || (dir.may_author(who, "resource.issue") && issuer.as_ref() == Some(who))) {
                        return Err(unauthorized("define resources"));
                    }
                    if self.resources.contains_key(resource) || !defines.insert(resource.clone()) {
                        return Err(ResourceError::DuplicateResource(resource.clone()));
                    }
                }
                ResourceEffect::Transfer { from, to, resource, amount } => {
                    let amount = amount_i64(*amount)?;
                    if from == to {
                        return Err(ResourceError::SelfTransfer);
                    }
                    if who != from && !agent {
                        return Err(unauthorized("debit another party"));
                    }
                    self.require_unlocked(resource)?;
                    *debits.entry((resource.clone(), from.clone())).or_default() += amount;
                }
                ResourceEffect::Reserve { reservation_id, owner, resource, amount } => {
                    let amount = amount_i64(*amount)?;
                    if who != owner && !agent {
                        return Err(unauthorized("reserve another party's funds"));
                    }
                    if self.reservations.contains_key(reservation_id)
                        || self.pending_ids.contains(reservation_id)
                        || !new_ids.insert(reservation_id.as_str())
                    {
                        return Err(ResourceError::DuplicateReservation(reservation_id.clone()));
                    }
                    self.require_unlocked(resource)?;
                    *debits.entry((resource.clone(), owner.clone())).or_default() += amount;
                }
                ResourceEffect::Draw { reservation_id, amount, .. }
                | ResourceEffect::Release { reservation_id, amount } => {
                    let amount = amount_i64(*amount)?;
                    let r = self.held_reservation(reservation_id)?;
                    if who != &r.owner && !agent {
                        return Err(unauthorized("settle another party's reservation"));
                    }
                    self.require_unlocked(&r.resource)?;
                    *pins.entry(reservation_id.as_str()).or_default() += amount;
                }
                ResourceEffect::AssertHoldings { resource, holdings, excluding } => {
                    let r = self.require_unlocked(resource)?;
                    if r.pending > 0 || self.holdings(resource, excluding.as_ref()) != *holdings {
                        return Err(ResourceError::HoldingsMismatch(resource.clone()));
                    }
                }
            }
        }
        for ((resource, party), amount) in debits {
            self.check_debit(&party, &resource, amount)?;
        }
        for (id, amount) in pins {
            let r = &self.reservations[id];
            if r.amount - r.pinned < amount {
                return Err(ResourceError::ReservationShort {
                    id: id.to_owned(),
                    held: r.amount - r.pinned,
                    requested: amount,
                });
            }
        }
        Ok(())
    }

    fn apply_prepare(&mut self, txn: &AtomicTxn) {
        let me = self.manager.clone();
        for eff in txn.effects_for(&me) {
            let Effect::Resource(eff) = eff else { continue };
            match eff {
                ResourceEffect::Define { resource, .. } => {
                    self.pending_ids.insert(format!("define:{resource}"));
                }
                ResourceEffect::Transfer { from, resource, amount, .. } => {
                    self.hold(resource, from, *amount as i64);
                }
                ResourceEffect::Reserve { reservation_id, owner, resource, amount } => {
                    self.pending_ids.insert(reservation_id.clone());
                    self.hold(resource, owner, *amount as i64);
                }
                ResourceEffect::Draw { reservation_id, amount, .. }
                | ResourceEffect::Release { reservation_id, amount } => {
                    if let Some(r) = self.reservations.get_mut(reservation_id) {
                        r.pinned += *amount as i64;
                        let res = r.resource.clone();
                        self.bump_pending(&res, 1);
                    }
                }
                ResourceEffect::AssertHoldings { resource, .. } => {
                    if let Some(r) = self.resources.get_mut(resource) {
                        r.locked_by = Some(txn.txn_id.clone());
                    }
                }
            }
        }
        self.book.insert_prepared(txn.clone());
    }

    fn hold(&mut self, resource: &ResourceId, party: &PartyId, amount: i64) {
        let a = self.acct(resource, party);
        a.available -= amount;
        a.reserved += amount;
        self.bump_pending(resource, 1);
    }

    fn bump_pending(&mut self, resource: &ResourceId, delta: i32) {
        if let Some(r) = self.resources.get_mut(resource) {
            r.pending = r.pending.saturating_add_signed(delta);
        }
    }

    fn apply_decision(&mut self, id: &TxnId, decision: Decision, seq: u64) {
        let Some(rec) = self.book.get(id).filter(|r| r.status == LocalStatus::Prepared).cloned() else {
            return;
        };
        let commit = decision == Decision::Commit;
        let me = self.manager.clone();
        for eff in rec.txn.effects_for(&me) {
            let Effect::Resource(eff) = eff else { continue };
            match eff {
                ResourceEffect::Define { resource, decimals, issuer } => {
                    self.pending_ids.remove(&format!("define:{resource}"));
                    if commit {
                        self.define(resource, *decimals, issuer.clone());
                    }
                }
                ResourceEffect::Transfer { from, to, resource, amount } => {
                    let amount = *amount as i64;
                    self.acct(resource, from).reserved -= amount;
                    let dest = if commit { to } else { from };
                    self.acct(resource, dest).available += amount;
                    self.bump_pending(resource, -1);
                }
                ResourceEffect::Reserve { reservation_id, owner, resource, amount } => {
                    self.pending_ids.remove(reservation_id);
                    self.bump_pending(resource, -1);
                    if commit {
                        self.reservations.insert(
                            reservation_id.clone(),
                            Reservation {
                                reservation_id: reservation_id.clone(),
                                owner: owner.clone(),
                                resource: resource.clone(),
                                amount: *amount as i64,
                                pinned: 0,
                                drawn: 0,
                                beneficiary: None,
                                status: ReservationStatus::Held,
                                created_at: seq,
                            },
                        );
                    } else {
                        let a = self.acct(resource, owner);
                        a.reserved -= *amount as i64;
                        a.available += *amount as i64;
                    }
                }
                ResourceEffect::Draw { reservation_id, amount, to } => {
                    self.settle_part(reservation_id, *amount as i64, commit.then_some(to));
                }
                ResourceEffect::Release { reservation_id, amount } => {
                    if commit {
                        let owner = self.reservations.get(reservation_id).map(|r| r.owner.clone());
                        if let Some(owner) = owner {
                            self.settle_part(reservation_id, *amount as i64, Some(&owner));
                        }
                    } else {
                        self.settle_part(reservation_id, *amount as i64, None);
                    }
                }
                ResourceEffect::AssertHoldings { resource, .. } => {
                    if let Some(r) = self.resources.get_mut(resource) {
                        if r.locked_by.as_ref() == Some(id) {
                            r.locked_by = None;
                        }
                    }
                }
            }
        }
        self.book.set_decided(id, decision);
    }

    /// Unpins `amount` of a reservation and, when `to` is given, moves it
    /// there.
    fn settle_part(&mut self, id: &str, amount: i64, to: Option<&PartyId>) {
        let Some(r) = self.reservations.get_mut(id) else { return };
        r.pinned -= amount;
        let resource = r.resource.clone();
        let owner = r.owner.clone();
        if let Some(to) = to {
            r.amount -= amount;
            if to != &owner {
                r.drawn += amount;
                r.beneficiary = Some(to.clone());
            }
            if r.amount == 0 {
                r.status = if r.drawn > 0 { ReservationStatus::Committed } else { ReservationStatus::Returned };
            }
            self.acct(&resource, &owner).reserved -= amount;
            self.acct(&resource, to).available += amount;
        }
        self.bump_pending(&resource, -1);
    }

    fn define(&mut self, resource: &ResourceId, decimals: u32, issuer: Option<PartyId>) {
        self.resources.insert(
            resource.clone(),
            ResourceType { decimals, issuer, supply: 0, pending: 0, locked_by: None },
        );
    }

    pub fn apply(&mut self, env: &EventEnvelope) -> Result<(), CodecError> {
        if env.payload_kind.starts_with("txn.") {
            match TxnLogEvent::decode(&env.payload_kind, &env.payload)? {
                TxnLogEvent::Prepared(txn) => self.apply_prepare(&txn),
                TxnLogEvent::Decided { txn_id, decision } => self.apply_decision(&txn_id, decision, env.seq),
                TxnLogEvent::Tombstone { txn_id } => self.book.tombstone(&txn_id),
            }
            return Ok(());
        }
        match ResourceEvent::decode(&env.payload_kind, &env.payload)? {
            ResourceEvent::Define { resource, decimals, issuer } => self.define(&resource, decimals, issuer),
            ResourceEvent::Open { resource, owner, credit_limit } => {
                self.acct(&resource, &owner).credit_limit = credit_limit;
            }
            ResourceEvent::Issue { resource, to, amount } => {
                self.acct(&resource, &to).available += amount as i64;
                if let Some(r) = self.resources.get_mut(&resource) {
                    r.supply += amount as i64;
                }
            }
            ResourceEvent::Transfer(t) => {
                self.acct(&t.resource, &t.from).available -= t.amount as i64;
                self.acct(&t.resource, &t.to).available += t.amount as i64;
            }
            ResourceEvent::Reserve { reservation_id, owner, resource, amount, beneficiary } => {
                let a = self.acct(&resource, &owner);
                a.available -= amount as i64;
                a.reserved += amount as i64;
                self.reservations.insert(
                    reservation_id.clone(),
                    Reservation {
                        reservation_id,
                        owner,
                        resource,
                        amount: amount as i64,
                        pinned: 0,
                        drawn: 0,
                        beneficiary,
                        status: ReservationStatus::Held,
                        created_at: env.seq,
                    },
                );
            }
            ResourceEvent::Settle { reservation_id, decision } => {
                let Some(r) = self.reservations.get(&reservation_id) else { return Ok(()) };
                let (owner, resource, amount) = (r.owner.clone(), r.resource.clone(), r.amount);
                let (to, status) = match decision {
                    SettleDecision::Commit(b) => (b, ReservationStatus::Committed),
                    SettleDecision::Abort => (owner.clone(), ReservationStatus::Returned),
                };
                self.acct(&resource, &owner).reserved -= amount;
                self.acct(&resource, &to).available += amount;
                let r = self.reservations.get_mut(&reservation_id).expect("checked above");
                if status == ReservationStatus::Committed {
                    r.drawn += amount;
                    r.beneficiary = Some(to);
                }
                r.amount = 0;
                r.status = status;
            }
            ResourceEvent::Expire { reservation_id } => {
                let Some(r) = self.reservations.get_mut(&reservation_id) else { return Ok(()) };
                let (owner, resource, amount) = (r.owner.clone(), r.resource.clone(), r.amount);
                r.amount = 0;
                r.status = if r.drawn > 0 { ReservationStatus::Committed } else { ReservationStatus::Returned };
                let a = self.acct(&resource, &owner);
                a.reserved -= amount;
                a.available += amount;
            }
        }
        Ok(())
    }

    /// Canonical encoding of the full state, for replay comparisons.
    pub fn encode_state(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.item(&self.manager).u64(self.resources.len() as u64);
        for (id, r) in &self.resources {
            e.item(id).u64(r.decimals as u64).option(r.issuer.as_ref()).i64(r.supply).u64(r.pending as u64);
            e.option(r.locked_by.as_ref());
        }
        e.u64(self.accounts.len() as u64);
        for ((res, p), a) in &self.accounts {
            e.item(res).item(p).i64(a.available).i64(a.reserved).i64(a.credit_limit);
        }
        e.u64(self.reservations.len() as u64);
        for r in self.reservations.values() {
            e.str(&r.reservation_id).item(&r.owner).item(&r.resource).i64(r.amount).i64(r.pinned).i64(r.drawn);
            e.option(r.beneficiary.as_ref()).str(r.status.tag()).u64(r.created_at);
        }
        let ids: Vec<String> = self.pending_ids.iter().cloned().collect();
        e.list(&ids);
        self.book.encode_into(&mut e);
        e.finish()
    }
}

pub struct ResourceReducer(pub ManagerId);

impl Reducer for ResourceReducer {
    type State = ResourceState;
    fn init(&self) -> ResourceState {
        ResourceState::new(self.0.clone())
    }
    fn step(&self, s: &mut ResourceState, env: &EventEnvelope) -> Result<(), CodecError> {
        s.apply(env)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ResourceConfig {
    /// Age in ledger entries after which a held reservation may be swept
    /// back to its owner. `None` disables expiry.
    pub reservation_ttl: Option<u64>,
}

/// A single-writer resource manager over its own ledger.
pub struct ResourceManager {
    id: ManagerId,
    ledger: Ledger,
    state: ResourceState,
    dir: IdentityHandle,
    operator: PartySigner,
    config: ResourceConfig,
}

impl std::fmt::Debug for ResourceManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ResourceManager").field("id", &self.id).field("len", &self.ledger.len()).finish()
    }
}

impl ResourceManager {
    pub fn new(id: ManagerId, storage: Box<dyn Storage>, dir: IdentityHandle, operator: PartySigner) -> Self {
        ResourceManager {
            ledger: Ledger::with_storage(id.as_str(), storage),
            state: ResourceState::new(id.clone()),
            id,
            dir,
            operator,
            config: ResourceConfig::default(),
        }
    }

    /// Restarts from persisted storage by replaying the ledger.
    pub fn recover(
        id: ManagerId,
        storage: Box<dyn Storage>,
        dir: IdentityHandle,
        operator: PartySigner,
    ) -> Result<Self, LedgerError> {
        let (ledger, _) = Ledger::open(id.as_str(), storage)?;
        let entries = ledger.entries();
        let state = crate::ledger::replay(entries.iter().map(|e| e.as_ref()), &ResourceReducer(id.clone()))?;
        Ok(ResourceManager { id, ledger, state, dir, operator, config: ResourceConfig::default() })
    }

    pub fn with_config(mut self, config: ResourceConfig) -> Self {
        self.config = config;
        self
    }

    pub fn id(&self) -> &ManagerId {
        &self.id
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn state(&self) -> &ResourceState {
        &self.state
    }

    pub fn operator_signer(&self) -> &PartySigner {
        &self.operator
    }

    fn is_agent(&self, party: &PartyId) -> bool {
        self.dir.may_author(party, "txn.message")
    }

    /// Signs `ev` for the next slot with `signer` and submits it.
    fn submit_event(&mut self, ev: &ResourceEvent, signer: &dyn Signer) -> Result<Arc<EventEnvelope>, ResourceError> {
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), signer, self.dir.epoch());
        self.submit(draft)
    }

    /// Validates and appends a client-signed draft. Rejections leave state
    /// untouched.
    pub fn submit(&mut self, draft: Draft) -> Result<Arc<EventEnvelope>, ResourceError> {
        if draft.kind.starts_with("txn.") {
            return Err(ResourceError::Unauthorized("transaction records are written by the protocol only".into()));
        }
        let ev = ResourceEvent::decode(&draft.kind, &draft.payload).map_err(LedgerError::from)?;
        self.validate(&ev, &draft.author)?;
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env).map_err(LedgerError::from)?;
        Ok(env)
    }

    /// Submits a run of drafts signed for consecutive slots, checking all
    /// signatures with one batch verification. Stops at the first rejected
    /// draft; later drafts were signed for slots it would have taken.
    pub fn submit_batch(&mut self, drafts: Vec<Draft>) -> Result<usize, ResourceError> {
        let ok = self.ledger.verify_batch_drafts(&drafts, &self.dir);
        let total = drafts.len();
        for draft in drafts.into_iter().take(ok) {
            if draft.kind.starts_with("txn.") {
                return Err(ResourceError::Unauthorized("transaction records are written by the protocol only".into()));
            }
            let ev = ResourceEvent::decode(&draft.kind, &draft.payload).map_err(LedgerError::from)?;
            self.validate(&ev, &draft.author)?;
            let env = self.ledger.append_preverified(draft)?;
            self.state.apply(&env).map_err(LedgerError::from)?;
        }
        if ok < total {
            return Err(LedgerError::BadSignature.into());
        }
        Ok(total)
    }

    fn validate(&self, ev: &ResourceEvent, author: &PartyId) -> Result<(), ResourceError> {
        let s = &self.state;
        let unauthorized = |what: &str| Err(ResourceError::Unauthorized(format!("{author} may not {what}")));
        match ev {
            ResourceEvent::Define { resource, .. } => {
                if s.resources.contains_key(resource) || s.pending_ids.contains(&format!("define:{resource}")) {
                    return Err(ResourceError::DuplicateResource(resource.clone()));
                }
            }
            ResourceEvent::Open { resource, credit_limit, .. } => {
                s.require_unlocked(resource)?;
                if *credit_limit > 0 {
                    return Err(ResourceError::Malformed("credit limit must be zero or negative".into()));
                }
            }
            ResourceEvent::Issue { resource, amount, .. } => {
                let r = s.require_unlocked(resource)?;
                if r.issuer.as_ref() != Some(author) {
                    return unauthorized(&format!("issue {resource}"));
                }
                let a = amount_i64(*amount)?;
                if r.supply.checked_add(a).is_none() {
                    return Err(ResourceError::InvalidAmount);
                }
            }
            ResourceEvent::Transfer(t) => {
                let amount = amount_i64(t.amount)?;
                if t.from == t.to {
                    return Err(ResourceError::SelfTransfer);
                }
                if author != &t.from && !self.is_agent(author) {
                    return unauthorized(&format!("debit {}", t.from));
                }
                s.require_unlocked(&t.resource)?;
                if s.account(&t.from, &t.resource).is_none() {
                    return Err(ResourceError::UnknownAccount(t.resource.clone(), t.from.clone()));
                }
                s.check_debit(&t.from, &t.resource, amount)?;
            }
            ResourceEvent::Reserve { reservation_id, owner, resource, amount, .. } => {
                let amount = amount_i64(*amount)?;
                if author != owner && !self.is_agent(author) {
                    return unauthorized(&format!("reserve funds of {owner}"));
                }
                if s.reservations.contains_key(reservation_id) || s.pending_ids.contains(reservation_id) {
                    return Err(ResourceError::DuplicateReservation(reservation_id.clone()));
                }
                s.require_unlocked(resource)?;
                s.check_debit(owner, resource, amount)?;
            }
            ResourceEvent::Settle { reservation_id, .. } | ResourceEvent::Expire { reservation_id } => {
                let r = s.held_reservation(reservation_id)?;
                if author != &r.owner && !self.is_agent(author) {
                    return unauthorized(&format!("settle {reservation_id}"));
                }
                if r.pinned > 0 {
                    return Err(ResourceError::ReservationBusy(reservation_id.clone()));
                }
                s.require_unlocked(&r.resource)?;
                if let ResourceEvent::Expire { .. } = ev {
                    let ttl = self.config.reservation_ttl;
                    if ttl.map_or(true, |t| self.ledger.len() < r.created_at + t) {
                        return Err(ResourceError::NotExpired(reservation_id.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn define_resource(
        &mut self,
        resource: ResourceId,
        decimals: u32,
        issuer: Option<PartyId>,
    ) -> Result<(), ResourceError> {
        let op = self.operator.clone();
        self.submit_event(&ResourceEvent::Define { resource, decimals, issuer }, &op).map(|_| ())
    }

    /// Opens (or re-limits) an account. Operator only.
    pub fn open_account(&mut self, owner: PartyId, resource: ResourceId, credit_limit: i64) -> Result<(), ResourceError> {
        let op = self.operator.clone();
        self.submit_event(&ResourceEvent::Open { resource, owner, credit_limit }, &op).map(|_| ())
    }

    pub fn issue_units(
        &mut self,
        resource: ResourceId,
        to: PartyId,
        amount: u64,
        issuer: &dyn Signer,
    ) -> Result<Arc<EventEnvelope>, ResourceError> {
        self.submit_event(&ResourceEvent::Issue { resource, to, amount }, issuer)
    }

    pub fn transfer(&mut self, instr: TransferInstruction, author: &dyn Signer) -> Result<Arc<EventEnvelope>, ResourceError> {
        self.submit_event(&ResourceEvent::Transfer(instr), author)
    }

    /// Draft for a transfer signed by `author`, for callers that submit
    /// pre-signed streams.
    pub fn transfer_draft(&self, instr: TransferInstruction, author: &dyn Signer) -> Draft {
        let ev = ResourceEvent::Transfer(instr);
        self.ledger.sign_draft(ev.kind(), ev.encode(), author, self.dir.epoch())
    }

    pub fn reserve(
        &mut self,
        owner: PartyId,
        resource: ResourceId,
        amount: u64,
        author: &dyn Signer,
    ) -> Result<String, ResourceError> {
        let reservation_id = format!("{}-R{}", self.id, self.ledger.len());
        let ev = ResourceEvent::Reserve {
            reservation_id: reservation_id.clone(),
            owner,
            resource,
            amount,
            beneficiary: None,
        };
        self.submit_event(&ev, author)?;
        Ok(reservation_id)
    }

    /// Terminal transition of a reservation. Repeating the same decision is
    /// a no-op; a conflicting one is an error.
    pub fn settle_reservation(
        &mut self,
        reservation_id: &str,
        decision: SettleDecision,
        author: &dyn Signer,
    ) -> Result<ReservationStatus, ResourceError> {
        let r = self.state.reservation(reservation_id).ok_or_else(|| ResourceError::UnknownReservation(reservation_id.into()))?;
        match (r.status, &decision) {
            (ReservationStatus::Committed, SettleDecision::Commit(b)) if r.beneficiary.as_ref() == Some(b) => {
                return Ok(r.status)
            }
            (ReservationStatus::Returned, SettleDecision::Abort) => return Ok(r.status),
            (ReservationStatus::Held, _) => {}
            (status, _) => return Err(ResourceError::AlreadyTerminal { id: reservation_id.into(), status }),
        }
        self.submit_event(&ResourceEvent::Settle { reservation_id: reservation_id.into(), decision }, author)?;
        Ok(self.state.reservation(reservation_id).expect("just settled").status)
    }

    /// Returns every held, unpinned reservation older than the configured
    /// TTL to its owner.
    pub fn sweep_expired(&mut self) -> Result<Vec<String>, ResourceError> {
        let Some(ttl) = self.config.reservation_ttl else { return Ok(Vec::new()) };
        let now = self.ledger.len();
        let due: Vec<String> = self
            .state
            .reservations()
            .filter(|r| r.status == ReservationStatus::Held && r.pinned == 0 && now >= r.created_at + ttl)
            .map(|r| r.reservation_id.clone())
            .collect();
        let op = self.operator.clone();
        for id in &due {
            self.submit_event(&ResourceEvent::Expire { reservation_id: id.clone() }, &op)?;
        }
        Ok(due)
    }

    fn log_txn(&mut self, ev: TxnLogEvent) -> Result<Arc<EventEnvelope>, LedgerError> {
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), &self.operator, self.dir.epoch());
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env)?;
        Ok(env)
    }
}

impl TxnHost for ResourceManager {
    fn host_id(&self) -> &ManagerId {
        &self.id
    }

    fn directory(&self) -> &dyn KeyDirectory {
        &self.dir
    }

    fn operator(&self) -> &PartySigner {
        &self.operator
    }

    fn txn_status(&self, id: &TxnId) -> LocalStatus {
        self.state.book.status(id)
    }

    fn prepare(&mut self, txn: &AtomicTxn) -> Vote {
        if let Err(e) = self.state.check_prepare(txn, &self.dir) {
            return Vote::No(format!("{}: {e}", e.code()));
        }
        match self.log_txn(TxnLogEvent::Prepared(txn.clone())) {
            Ok(_) => Vote::Yes,
            Err(e) => Vote::No(format!("Ledger: {e}")),
        }
    }

    fn decide(&mut self, id: &TxnId, d: Decision) -> Result<u64, TxnError> {
        if let Some(seq) = check_decision(&self.state.book, id, d)? {
            return Ok(seq);
        }
        Ok(self.log_txn(TxnLogEvent::Decided { txn_id: id.clone(), decision: d })?.seq)
    }

    fn tombstone(&mut self, id: &TxnId) -> Result<(), TxnError> {
        if self.state.book.status(id) == LocalStatus::Unknown {
            self.log_txn(TxnLogEvent::Tombstone { txn_id: id.clone() })?;
        }
        Ok(())
    }

    fn in_doubt(&self) -> Vec<AtomicTxn> {
        self.state.book.in_doubt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{Bus, Parties};
    use crate::ledger::{replay, MemDisk};
    use crate::txn::{Coordinator, TxnAction, TxnOutcome};
    use proptest::prelude::*;

    const EUR: &str = "EUR";

    fn setup(p: &Parties) -> (ResourceManager, MemDisk) {
        let disk = MemDisk::new();
        let mut m = ResourceManager::new(ManagerId::from("cash"), disk.storage(), p.dir(), p.s("cash"));
        m.define_resource(ResourceId::from(EUR), 2, Some(p.id("bank"))).unwrap();
        (m, disk)
    }

    fn fund(m: &mut ResourceManager, p: &Parties, who: &str, amount: u64) {
        m.issue_units(ResourceId::from(EUR), p.id(who), amount, &p.s("bank")).unwrap();
    }

    fn xfer(p: &Parties, from: &str, to: &str, amount: u64) -> TransferInstruction {
        TransferInstruction { from: p.id(from), to: p.id(to), resource: ResourceId::from(EUR), amount, reference: None }
    }

    fn eur() -> ResourceId {
        ResourceId::from(EUR)
    }

    #[test]
    fn transfer_conserves_and_respects_floor() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 150);
        fund(&mut m, &p, "bob", 50);
        m.transfer(xfer(&p, "alice", "bob", 100), &p.s("alice")).unwrap();
        assert_eq!(m.state().available(&p.id("alice"), &eur()), 50);
        assert_eq!(m.state().available(&p.id("bob"), &eur()), 150);
        assert_eq!(m.state().total(&eur()), 200);

        let before = m.ledger().len();
        let err = m.transfer(xfer(&p, "alice", "bob", 100), &p.s("alice")).unwrap_err();
        assert!(matches!(err, ResourceError::InsufficientBalance { .. }));
        assert_eq!(m.ledger().len(), before);
        assert_eq!(m.state().available(&p.id("alice"), &eur()), 50);
    }

    #[test]
    fn credit_limit_allows_negative_available() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 50);
        m.open_account(p.id("alice"), eur(), -100).unwrap();
        m.transfer(xfer(&p, "alice", "bob", 100), &p.s("alice")).unwrap();
        let a = *m.state().account(&p.id("alice"), &eur()).unwrap();
        assert_eq!(a.available, -50);
        assert!(a.available >= a.credit_limit);
        assert_eq!(m.state().available(&p.id("bob"), &eur()), 100);
    }

    #[test]
    fn only_the_owner_or_an_operator_may_debit() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 100);
        let err = m.transfer(xfer(&p, "alice", "bob", 10), &p.s("bob")).unwrap_err();
        assert!(matches!(err, ResourceError::Unauthorized(_)));
        assert!(m.transfer(xfer(&p, "alice", "alice", 10), &p.s("alice")).is_err());
        assert!(m.transfer(xfer(&p, "alice", "bob", 0), &p.s("alice")).is_err());
    }

    #[test]
    fn reserve_abort_is_identity_and_commit_moves_funds() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 100);
        let before = *m.state().account(&p.id("alice"), &eur()).unwrap();
        let r = m.reserve(p.id("alice"), eur(), 30, &p.s("alice")).unwrap();
        let a = *m.state().account(&p.id("alice"), &eur()).unwrap();
        assert_eq!((a.available, a.reserved), (70, 30));
        assert_eq!(m.settle_reservation(&r, SettleDecision::Abort, &p.s("alice")).unwrap(), ReservationStatus::Returned);
        assert_eq!(*m.state().account(&p.id("alice"), &eur()).unwrap(), before);

        let r = m.reserve(p.id("alice"), eur(), 30, &p.s("alice")).unwrap();
        let commit = SettleDecision::Commit(p.id("bob"));
        assert_eq!(m.settle_reservation(&r, commit.clone(), &p.s("alice")).unwrap(), ReservationStatus::Committed);
        let len = m.ledger().len();
        assert_eq!(m.settle_reservation(&r, commit, &p.s("alice")).unwrap(), ReservationStatus::Committed);
        assert_eq!(m.ledger().len(), len, "repeated decision is a no-op");
        assert!(matches!(
            m.settle_reservation(&r, SettleDecision::Abort, &p.s("alice")),
            Err(ResourceError::AlreadyTerminal { .. })
        ));
        assert_eq!(m.state().holding(&p.id("alice"), &eur()), 70);
        assert_eq!(m.state().holding(&p.id("bob"), &eur()), 30);
        assert_eq!(m.state().total(&eur()), 100);
    }

    #[test]
    fn holds_are_cumulative() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 100);
        m.reserve(p.id("alice"), eur(), 60, &p.s("alice")).unwrap();
        assert!(matches!(
            m.reserve(p.id("alice"), eur(), 60, &p.s("alice")),
            Err(ResourceError::InsufficientBalance { .. })
        ));
        assert!(m.reserve(p.id("alice"), eur(), 200, &p.s("alice")).is_err());
    }

    #[test]
    fn issuance_is_issuer_only_and_tracks_supply() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        assert!(matches!(
            m.issue_units(eur(), p.id("alice"), 10, &p.s("alice")),
            Err(ResourceError::Unauthorized(_) | ResourceError::Ledger(LedgerError::Unauthorized { .. }))
        ));
        assert!(m.issue_units(eur(), p.id("alice"), 10, &p.s("issuer")).is_err());
        fund(&mut m, &p, "bank", 1_000);
        assert_eq!(m.state().supply(&eur()), 1_000);
        assert!(matches!(
            m.issue_units(ResourceId::from("USD"), p.id("bank"), 1, &p.s("bank")),
            Err(ResourceError::UnknownResource(_))
        ));
    }

    fn txn_of(p: &Parties, id: &str, effects: Vec<ResourceEffect>, by: &str) -> AtomicTxn {
        let actions = effects
            .into_iter()
            .map(|e| TxnAction { manager: ManagerId::from("cash"), effect: Effect::Resource(e) })
            .collect();
        AtomicTxn::new(TxnId::from(id), actions, &p.s(by), p.dir().epoch())
    }

    #[test]
    fn prepare_takes_holds_and_votes_no_without_change() {
        let p = Parties::new();
        let (mut m, disk) = setup(&p);
        fund(&mut m, &p, "alice", 150);
        let t = txn_of(
            &p,
            "t1",
            vec![ResourceEffect::Transfer { from: p.id("alice"), to: p.id("bob"), resource: eur(), amount: 100 }],
            "alice",
        );
        assert_eq!(m.prepare(&t), Vote::Yes);
        let a = *m.state().account(&p.id("alice"), &eur()).unwrap();
        assert_eq!((a.available, a.reserved), (50, 100));

        let t2 = txn_of(
            &p,
            "t2",
            vec![ResourceEffect::Transfer { from: p.id("alice"), to: p.id("bob"), resource: eur(), amount: 100 }],
            "alice",
        );
        let state = m.state().encode_state();
        assert!(matches!(m.prepare(&t2), Vote::No(r) if r.starts_with("InsufficientBalance")));
        assert_eq!(m.state().encode_state(), state);

        // Crash after prepare: replay restores the pinned hold.
        disk.crash();
        let m2 = ResourceManager::recover(ManagerId::from("cash"), disk.storage(), p.dir(), p.s("cash")).unwrap();
        assert_eq!(m2.state().encode_state(), m.state().encode_state());
        assert_eq!(m2.in_doubt().len(), 1);
    }

    #[test]
    fn draw_and_release_settle_a_reservation_in_parts() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 100);
        let reserve = txn_of(
            &p,
            "r",
            vec![ResourceEffect::Reserve { reservation_id: "o1".into(), owner: p.id("alice"), resource: eur(), amount: 80 }],
            "tm",
        );
        assert_eq!(m.prepare(&reserve), Vote::Yes);
        m.decide(&TxnId::from("r"), Decision::Commit).unwrap();
        assert_eq!(m.state().reservation("o1").unwrap().amount, 80);

        let fill = txn_of(
            &p,
            "f",
            vec![
                ResourceEffect::Draw { reservation_id: "o1".into(), amount: 50, to: p.id("bob") },
                ResourceEffect::Release { reservation_id: "o1".into(), amount: 10 },
            ],
            "tm",
        );
        assert_eq!(m.prepare(&fill), Vote::Yes);
        let over = txn_of(&p, "g", vec![ResourceEffect::Draw { reservation_id: "o1".into(), amount: 30, to: p.id("bob") }], "tm");
        assert!(matches!(m.prepare(&over), Vote::No(r) if r.starts_with("ReservationShort")));
        m.decide(&TxnId::from("f"), Decision::Commit).unwrap();
        let r = m.state().reservation("o1").unwrap();
        assert_eq!((r.amount, r.pinned, r.status), (20, 0, ReservationStatus::Held));
        assert_eq!(m.state().available(&p.id("bob"), &eur()), 50);
        let a = *m.state().account(&p.id("alice"), &eur()).unwrap();
        assert_eq!((a.available, a.reserved), (30, 20));
        assert_eq!(m.state().total(&eur()), 100);
    }

    #[test]
    fn asserted_holdings_lock_the_resource() {
        let p = Parties::new();
        let (mut m, _) = setup(&p);
        fund(&mut m, &p, "alice", 60);
        fund(&mut m, &p, "bob", 40);
        let snap = m.state().holdings(&eur(), Some(&p.id("bank")));
        let wrong = vec![(p.id("alice"), 61), (p.id("bob"), 39)];
        let bad = txn_of(&p, "h0", vec![ResourceEffect::AssertHoldings { resource: eur(), holdings: wrong, excluding: None }], "calc");
        assert!(matches!(m.prepare(&bad), Vote::No(r) if r.starts_with("HoldingsMismatch")));
        let t = txn_of(&p, "h", vec![ResourceEffect::AssertHoldings { resource: eur(), holdings: snap, excluding: Some(p.id("bank")) }], "calc");
        assert_eq!(m.prepare(&t), Vote::Yes);
        assert!(matches!(m.transfer(xfer(&p, "alice", "bob", 1), &p.s("alice")), Err(ResourceError::Locked(_))));
        m.decide(&TxnId::from("h"), Decision::Abort).unwrap();
        m.transfer(xfer(&p, "alice", "bob", 1), &p.s("alice")).unwrap();
    }

    #[test]
    fn dvp_commits_both_legs_or_neither() {
        let p = Parties::new();
        let sec_id = ManagerId::from("sec");
        let mut sec = ResourceManager::new(sec_id.clone(), MemDisk::new().storage(), p.dir(), p.s("sec"));
        let bond = ResourceId::from("XS0000000001");
        sec.define_resource(bond.clone(), 0, Some(p.id("issuer"))).unwrap();
        sec.issue_units(bond.clone(), p.id("alice"), 10, &p.s("issuer")).unwrap();
        let (mut cash, _) = setup(&p);
        fund(&mut cash, &p, "bob", 1_000);
        let coord = Coordinator::new(ManagerId::from("tx"), p.s("coord"), p.dir());
        let dvp = |id: &str, price: u64| {
            AtomicTxn::new(
                TxnId::from(id),
                vec![
                    TxnAction {
                        manager: sec_id.clone(),
                        effect: Effect::Resource(ResourceEffect::Transfer { from: p.id("alice"), to: p.id("bob"), resource: bond.clone(), amount: 10 }),
                    },
                    TxnAction {
                        manager: ManagerId::from("cash"),
                        effect: Effect::Resource(ResourceEffect::Transfer { from: p.id("bob"), to: p.id("alice"), resource: eur(), amount: price }),
                    },
                ],
                &p.s("tm"),
                p.dir().epoch(),
            )
        };
        let (sec_len, cash_len) = (sec.ledger().len(), cash.ledger().len());
        let out = {
            let mut bus = Bus::new(vec![&mut sec, &mut cash]);
            coord.execute_atomic(dvp("unfunded", 1_001), &mut bus)
        };
        assert!(matches!(out, TxnOutcome::Aborted { ref reason } if reason.contains("InsufficientBalance")));
        assert_eq!(sec.state().holding(&p.id("alice"), &bond), 10);
        assert_eq!(sec.state().available(&p.id("alice"), &bond), 10);
        assert!(sec.ledger().len() > sec_len, "prepared then aborted");
        assert_eq!(cash.ledger().len(), cash_len + 1, "cash leg voted no and was only tombstoned");

        let out = {
            let mut bus = Bus::new(vec![&mut sec, &mut cash]);
            coord.execute_atomic(dvp("ok", 1_000), &mut bus)
        };
        assert!(out.is_committed());
        assert_eq!(sec.state().holding(&p.id("bob"), &bond), 10);
        assert_eq!(cash.state().holding(&p.id("alice"), &eur()), 1_000);
        assert_eq!(coord.in_flight(), 0);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Transfer(usize, usize, u64),
        Reserve(usize, u64),
        Settle(usize, bool, usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0..3usize, 0..3usize, 1..80u64).prop_map(|(a, b, n)| Op::Transfer(a, b, n)),
            (0..3usize, 1..80u64).prop_map(|(a, n)| Op::Reserve(a, n)),
            (0..8usize, any::<bool>(), 0..3usize).prop_map(|(r, c, b)| Op::Settle(r, c, b)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_workloads_conserve_respect_floors_and_replay(ops in proptest::collection::vec(op(), 1..25)) {
            let p = Parties::new();
            let names = ["alice", "bob", "carol"];
            let (mut m, _) = setup(&p);
            for n in names {
                fund(&mut m, &p, n, 100);
            }
            m.open_account(p.id("carol"), eur(), -50).unwrap();
            let mut reservations = Vec::new();
            for o in ops {
                match o {
                    Op::Transfer(a, b, n) => { let _ = m.transfer(xfer(&p, names[a], names[b], n), &p.s(names[a])); }
                    Op::Reserve(a, n) => {
                        if let Ok(r) = m.reserve(p.id(names[a]), eur(), n, &p.s(names[a])) {
                            reservations.push((r, a));
                        }
                    }
                    Op::Settle(i, commit, b) => {
                        if let Some((r, owner)) = reservations.get(i % reservations.len().max(1)).cloned() {
                            let d = if commit { SettleDecision::Commit(p.id(names[b])) } else { SettleDecision::Abort };
                            let _ = m.settle_reservation(&r, d, &p.s(names[owner]));
                        }
                    }
                }
                prop_assert_eq!(m.state().total(&eur()), m.state().supply(&eur()));
                for ((_, _), a) in m.state().accounts() {
                    prop_assert!(a.available >= a.credit_limit);
                    prop_assert!(a.reserved >= 0);
                }
            }
            for ((res, owner), a) in m.state().accounts() {
                let held: i64 = m.state().reservations()
                    .filter(|r| &r.owner == owner && &r.resource == res && r.status == ReservationStatus::Held)
                    .map(|r| r.amount)
                    .sum();
                prop_assert_eq!(a.reserved, held);
            }
            let entries = m.ledger().entries();
            let replayed = replay(entries.iter().map(|e| e.as_ref()), &ResourceReducer(ManagerId::from("cash"))).unwrap();
            prop_assert_eq!(replayed.encode_state(), m.state().encode_state());
        }

        #[test]
        fn disjoint_batches_commute(x in 1..100u64, y in 1..100u64) {
            let p = Parties::new();
            let run = |first_ab: bool| {
                let (mut m, _) = setup(&p);
                for n in ["alice", "bob", "carol", "issuer"] {
                    fund(&mut m, &p, n, 100);
                }
                let ab = xfer(&p, "alice", "bob", x);
                let ci = xfer(&p, "carol", "issuer", y);
                let order = if first_ab { [(ab, "alice"), (ci, "carol")] } else { [(ci, "carol"), (ab, "alice")] };
                for (t, who) in order {
                    m.transfer(t, &p.s(who)).unwrap();
                }
                ["alice", "bob", "carol", "issuer"].map(|n| m.state().available(&p.id(n), &eur()))
            };
            prop_assert_eq!(run(true), run(false));
        }
    }
}
