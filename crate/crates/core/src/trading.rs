//! Trade manager: reservation-backed order entry, price-time matching and
//! immediate delivery-versus-payment settlement.
//!
//! The manager writes what it is about to do to its own ledger before it
//! does it. Funding, cancellation and settlement each run as an atomic
//! transaction opened by an intent entry (`order.reserving`,
//! `order.releasing`, `match.pending`) and closed by an outcome entry. A
//! restart replays the book; intents still open are resolved by asking the
//! participants, and the instrument stays frozen until they are.
//!
//! Client-signed payloads (canonical encoding, see [`crate::codec`]):
//!
//! | kind                   | fields                                                     |
//! |------------------------|------------------------------------------------------------|
//! | `order.submit`         | side (`buy`/`sell`), isin, pinned version, qty, limit price |
//! | `order.cancel_request` | order id                                                   |

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::contract::{ContractEffect, InstanceStatus};
use crate::crypto::{PartySigner, Signer};
use crate::identity::IdentityHandle;
use crate::ids::{Isin, ManagerId, PartyId, ResourceId, TxnId};
use crate::ledger::{replay, Draft, EventEnvelope, KeyDirectory, Ledger, LedgerError, Reducer, Storage, Subscription};
use crate::resource::ResourceEffect;
use crate::txn::{
    AtomicTxn, Body, Checkpoint, Coordinator, Crashed, Effect, LocalStatus, Transport, TxnAction, TxnMessage,
    TxnOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Buy,
    Sell,
}

impl Canonical for Side {
    fn encode(&self, e: &mut Encoder) {
        e.str(match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
        });
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match d.str()?.as_str() {
            "buy" => Ok(Side::Buy),
            "sell" => Ok(Side::Sell),
            t => Err(CodecError::BadTag(t.to_owned())),
        }
    }
}

/// The client-signed part of an order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderRequest {
    pub side: Side,
    pub isin: Isin,
    pub pinned_version: u64,
    pub qty: u64,
    pub limit_price: u64,
}

impl Canonical for OrderRequest {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.side).item(&self.isin).u64(self.pinned_version).u64(self.qty).u64(self.limit_price);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(OrderRequest {
            side: d.item()?,
            isin: d.item()?,
            pinned_version: d.u64()?,
            qty: d.u64()?,
            limit_price: d.u64()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderStatus {
    /// Logged, funding not yet confirmed.
    Pending,
    Open,
    PartiallyFilled,
    Filled,
    Cancelled,
    Rejected,
}

impl OrderStatus {
    pub fn is_live(self) -> bool {
        matches!(self, OrderStatus::Open | OrderStatus::PartiallyFilled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Order {
    pub order_id: String,
    pub party: PartyId,
    pub side: Side,
    pub isin: Isin,
    pub pinned_version: u64,
    pub qty: u64,
    pub limit_price: u64,
    /// Trade-ledger seq of the submission.
    pub entry_seq: u64,
    pub remaining: u64,
    pub filled: u64,
    /// Same id at the funding resource manager.
    pub reservation_id: String,
    /// Amount this manager believes is still held for the order.
    pub reserved: u64,
    pub status: OrderStatus,
    pub reason: Option<String>,
}

impl Order {
    /// What the remaining quantity can still cost the owner.
    pub fn exposure(&self) -> u64 {
        match self.side {
            Side::Buy => self.remaining * self.limit_price,
            Side::Sell => self.remaining,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trade {
    pub trade_id: String,
    pub isin: Isin,
    pub buy_order: String,
    pub sell_order: String,
    pub buyer: PartyId,
    pub seller: PartyId,
    pub qty: u64,
    pub price: u64,
    pub txn_id: TxnId,
}

impl Canonical for Trade {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.trade_id)
            .item(&self.isin)
            .str(&self.buy_order)
            .str(&self.sell_order)
            .item(&self.buyer)
            .item(&self.seller)
            .u64(self.qty)
            .u64(self.price)
            .item(&self.txn_id);
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Trade {
            trade_id: d.str()?,
            isin: d.item()?,
            buy_order: d.str()?,
            sell_order: d.str()?,
            buyer: d.item()?,
            seller: d.item()?,
            qty: d.u64()?,
            price: d.u64()?,
            txn_id: d.item()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TradeStatus {
    Pending,
    Settled,
    Failed(String),
}

/// Where an instrument trades and settles, and its current contract state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Listing {
    pub isin: Isin,
    pub state_version: u64,
    pub status: InstanceStatus,
    pub security_manager: ManagerId,
    pub currency: ResourceId,
    pub currency_manager: ManagerId,
    /// When set, every settlement also pins the contract at `state_version`.
    pub contract_manager: Option<ManagerId>,
}

fn status_tag(s: InstanceStatus) -> &'static str {
    match s {
        InstanceStatus::Live => "live",
        InstanceStatus::Matured => "matured",
        InstanceStatus::Default => "default",
    }
}

impl Canonical for Listing {
    fn encode(&self, e: &mut Encoder) {
        e.item(&self.isin)
            .u64(self.state_version)
            .str(status_tag(self.status))
            .item(&self.security_manager)
            .item(&self.currency)
            .item(&self.currency_manager)
            .option(self.contract_manager.as_ref());
    }
    fn decode(d: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Listing {
            isin: d.item()?,
            state_version: d.u64()?,
            status: match d.str()?.as_str() {
                "live" => InstanceStatus::Live,
                "matured" => InstanceStatus::Matured,
                "default" => InstanceStatus::Default,
                t => return Err(CodecError::BadTag(t.to_owned())),
            },
            security_manager: d.item()?,
            currency: d.item()?,
            currency_manager: d.item()?,
            contract_manager: d.option()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Ledger events

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TradeEvent {
    Submit(OrderRequest),
    CancelRequest { order_id: String },
    Listing(Listing),
    Reserving { order_id: String, txn: AtomicTxn },
    Accepted { order_id: String, txn_id: TxnId },
    Rejected { order_id: String, txn_id: Option<TxnId>, reason: String },
    Releasing { order_id: String, reason: String, txn: AtomicTxn },
    Cancelled { order_id: String, txn_id: Option<TxnId>, reason: String },
    ReleaseFailed { order_id: String, txn_id: TxnId, reason: String },
    MatchPending { trade: Trade, txn: AtomicTxn },
    Settled { trade: Trade },
    Failed { trade_id: String, txn_id: TxnId, reason: String },
}

impl TradeEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TradeEvent::Submit(_) => "order.submit",
            TradeEvent::CancelRequest { .. } => "order.cancel_request",
            TradeEvent::Listing(_) => "instrument.update",
            TradeEvent::Reserving { .. } => "order.reserving",
            TradeEvent::Accepted { .. } => "order.accepted",
            TradeEvent::Rejected { .. } => "order.rejected",
            TradeEvent::Releasing { .. } => "order.releasing",
            TradeEvent::Cancelled { .. } => "order.cancelled",
            TradeEvent::ReleaseFailed { .. } => "order.release_failed",
            TradeEvent::MatchPending { .. } => "match.pending",
            TradeEvent::Settled { .. } => "trade.settled",
            TradeEvent::Failed { .. } => "trade.failed",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            TradeEvent::Submit(r) => e.item(r),
            TradeEvent::CancelRequest { order_id } => e.str(order_id),
            TradeEvent::Listing(l) => e.item(l),
            TradeEvent::Reserving { order_id, txn } => e.str(order_id).item(txn),
            TradeEvent::Accepted { order_id, txn_id } => e.str(order_id).item(txn_id),
            TradeEvent::Rejected { order_id, txn_id, reason } => e.str(order_id).option(txn_id.as_ref()).str(reason),
            TradeEvent::Releasing { order_id, reason, txn } => e.str(order_id).str(reason).item(txn),
            TradeEvent::Cancelled { order_id, txn_id, reason } => e.str(order_id).option(txn_id.as_ref()).str(reason),
            TradeEvent::ReleaseFailed { order_id, txn_id, reason } => e.str(order_id).item(txn_id).str(reason),
            TradeEvent::MatchPending { trade, txn } => e.item(trade).item(txn),
            TradeEvent::Settled { trade } => e.item(trade),
            TradeEvent::Failed { trade_id, txn_id, reason } => e.str(trade_id).item(txn_id).str(reason),
        };
        e.finish()
    }

    pub fn decode(kind: &str, payload: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(payload);
        let ev = match kind {
            "order.submit" => TradeEvent::Submit(d.item()?),
            "order.cancel_request" => TradeEvent::CancelRequest { order_id: d.str()? },
            "instrument.update" => TradeEvent::Listing(d.item()?),
            "order.reserving" => TradeEvent::Reserving { order_id: d.str()?, txn: d.item()? },
            "order.accepted" => TradeEvent::Accepted { order_id: d.str()?, txn_id: d.item()? },
            "order.rejected" => TradeEvent::Rejected { order_id: d.str()?, txn_id: d.option()?, reason: d.str()? },
            "order.releasing" => TradeEvent::Releasing { order_id: d.str()?, reason: d.str()?, txn: d.item()? },
            "order.cancelled" => TradeEvent::Cancelled { order_id: d.str()?, txn_id: d.option()?, reason: d.str()? },
            "order.release_failed" => {
                TradeEvent::ReleaseFailed { order_id: d.str()?, txn_id: d.item()?, reason: d.str()? }
            }
            "match.pending" => TradeEvent::MatchPending { trade: d.item()?, txn: d.item()? },
            "trade.settled" => TradeEvent::Settled { trade: d.item()? },
            "trade.failed" => TradeEvent::Failed { trade_id: d.str()?, txn_id: d.item()?, reason: d.str()? },
            k => return Err(CodecError::BadTag(k.to_owned())),
        };
        d.finish()?;
        Ok(ev)
    }
}

/// Id the manager assigns to the order submitted at `seq`.
pub fn order_id_at(manager: &ManagerId, seq: u64) -> String {
    format!("{manager}-O{seq}")
}

// ---------------------------------------------------------------------------
// State

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Purpose {
    Reserve { order_id: String },
    Release { order_id: String, reason: String },
    Settle(Trade),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intent {
    pub isin: Isin,
    pub purpose: Purpose,
    pub txn: AtomicTxn,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Book {
    pub bids: BTreeSet<(Reverse<u64>, u64, String)>,
    pub asks: BTreeSet<(u64, u64, String)>,
}

impl Book {
    fn insert(&mut self, o: &Order) {
        match o.side {
            Side::Buy => self.bids.insert((Reverse(o.limit_price), o.entry_seq, o.order_id.clone())),
            Side::Sell => self.asks.insert((o.limit_price, o.entry_seq, o.order_id.clone())),
        };
    }

    fn remove(&mut self, o: &Order) {
        match o.side {
            Side::Buy => self.bids.remove(&(Reverse(o.limit_price), o.entry_seq, o.order_id.clone())),
            Side::Sell => self.asks.remove(&(o.limit_price, o.entry_seq, o.order_id.clone())),
        };
    }
}

/// Fold of a trade ledger. Also the reference consumer of the trade feed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradeState {
    manager: ManagerId,
    orders: BTreeMap<String, Order>,
    books: BTreeMap<Isin, Book>,
    trades: BTreeMap<String, (Trade, TradeStatus)>,
    listings: BTreeMap<Isin, Listing>,
    intents: BTreeMap<TxnId, Intent>,
}

impl TradeState {
    pub fn new(manager: ManagerId) -> Self {
        TradeState {
            manager,
            orders: BTreeMap::new(),
            books: BTreeMap::new(),
            trades: BTreeMap::new(),
            listings: BTreeMap::new(),
            intents: BTreeMap::new(),
        }
    }

    pub fn order(&self, id: &str) -> Option<&Order> {
        self.orders.get(id)
    }

    pub fn orders(&self) -> impl Iterator<Item = &Order> {
        self.orders.values()
    }

    pub fn book(&self, isin: &Isin) -> Option<&Book> {
        self.books.get(isin)
    }

    pub fn trade(&self, id: &str) -> Option<&(Trade, TradeStatus)> {
        self.trades.get(id)
    }

    /// Settled trades in ledger order.
    pub fn settled_trades(&self) -> Vec<&Trade> {
        let mut v: Vec<&Trade> =
            self.trades.values().filter(|(_, s)| *s == TradeStatus::Settled).map(|(t, _)| t).collect();
        v.sort_by_key(|t| trade_seq(&t.trade_id));
        v
    }

    pub fn listing(&self, isin: &Isin) -> Option<&Listing> {
        self.listings.get(isin)
    }

    pub fn intents(&self) -> impl Iterator<Item = (&TxnId, &Intent)> {
        self.intents.iter()
    }

    /// An instrument is frozen while any of its transactions is unresolved.
    pub fn is_frozen(&self, isin: &Isin) -> bool {
        self.intents.values().any(|i| &i.isin == isin)
    }

    pub fn best_bid(&self, isin: &Isin) -> Option<u64> {
        self.books.get(isin)?.bids.iter().next().map(|(Reverse(p), _, _)| *p)
    }

    pub fn best_ask(&self, isin: &Isin) -> Option<u64> {
        self.books.get(isin)?.asks.iter().next().map(|(p, _, _)| *p)
    }

    /// Live orders whose remaining exposure exceeds what their funding
    /// manager still holds, given a lookup of held reservation amounts.
    pub fn naked_orders(&self, held: impl Fn(&Order) -> Option<i64>) -> Vec<String> {
        self.orders
            .values()
            .filter(|o| o.status.is_live())
            .filter(|o| held(o).map_or(true, |h| h < o.exposure() as i64))
            .map(|o| o.order_id.clone())
            .collect()
    }

    fn unbook(&mut self, id: &str) {
        if let Some(o) = self.orders.get(id) {
            if let Some(b) = self.books.get_mut(&o.isin) {
                b.remove(o);
            }
        }
    }

    fn intent_isin(&self, purpose: &Purpose) -> Option<Isin> {
        match purpose {
            Purpose::Reserve { order_id } | Purpose::Release { order_id, .. } => {
                self.orders.get(order_id).map(|o| o.isin.clone())
            }
            Purpose::Settle(t) => Some(t.isin.clone()),
        }
    }

    fn open_intent(&mut self, purpose: Purpose, txn: AtomicTxn) {
        if let Some(isin) = self.intent_isin(&purpose) {
            self.intents.insert(txn.txn_id.clone(), Intent { isin, purpose, txn });
        }
    }

    pub fn apply(&mut self, env: &EventEnvelope) -> Result<(), CodecError> {
        match TradeEvent::decode(&env.payload_kind, &env.payload)? {
            TradeEvent::Submit(r) => {
                let order_id = order_id_at(&self.manager, env.seq);
                self.orders.insert(
                    order_id.clone(),
                    Order {
                        reservation_id: order_id.clone(),
                        order_id,
                        party: env.author.clone(),
                        side: r.side,
                        isin: r.isin,
                        pinned_version: r.pinned_version,
                        qty: r.qty,
                        limit_price: r.limit_price,
                        entry_seq: env.seq,
                        remaining: r.qty,
                        filled: 0,
                        reserved: 0,
                        status: OrderStatus::Pending,
                        reason: None,
                    },
                );
            }
            TradeEvent::CancelRequest { .. } => {}
            TradeEvent::Listing(l) => {
                self.listings.insert(l.isin.clone(), l);
            }
            TradeEvent::Reserving { order_id, txn } => self.open_intent(Purpose::Reserve { order_id }, txn),
            TradeEvent::Accepted { order_id, txn_id } => {
                self.intents.remove(&txn_id);
                if let Some(o) = self.orders.get_mut(&order_id) {
                    o.status = OrderStatus::Open;
                    o.reserved = o.exposure();
                    self.books.entry(o.isin.clone()).or_default().insert(o);
                }
            }
            TradeEvent::Rejected { order_id, txn_id, reason } => {
                if let Some(t) = txn_id {
                    self.intents.remove(&t);
                }
                self.unbook(&order_id);
                if let Some(o) = self.orders.get_mut(&order_id) {
                    o.status = OrderStatus::Rejected;
                    o.reason = Some(reason);
                }
            }
            TradeEvent::Releasing { order_id, reason, txn } => {
                self.open_intent(Purpose::Release { order_id, reason }, txn)
            }
            TradeEvent::Cancelled { order_id, txn_id, reason } => {
                if let Some(t) = txn_id {
                    self.intents.remove(&t);
                }
                self.unbook(&order_id);
                if let Some(o) = self.orders.get_mut(&order_id) {
                    o.reserved = 0;
                    if o.status.is_live() || o.status == OrderStatus::Pending {
                        o.status = OrderStatus::Cancelled;
                        o.reason = Some(reason);
                    }
                }
            }
            TradeEvent::ReleaseFailed { txn_id, .. } => {
                self.intents.remove(&txn_id);
            }
            TradeEvent::MatchPending { trade, txn } => {
                self.trades.insert(trade.trade_id.clone(), (trade.clone(), TradeStatus::Pending));
                self.open_intent(Purpose::Settle(trade), txn);
            }
            TradeEvent::Settled { trade } => {
                self.intents.remove(&trade.txn_id);
                for id in [&trade.buy_order, &trade.sell_order] {
                    let Some(o) = self.orders.get(id) else { continue };
                    let mut o = o.clone();
                    if let Some(b) = self.books.get_mut(&o.isin) {
                        b.remove(&o);
                    }
                    let used = match o.side {
                        Side::Buy => trade.qty * o.limit_price,
                        Side::Sell => trade.qty,
                    };
                    o.remaining -= trade.qty.min(o.remaining);
                    o.filled += trade.qty;
                    o.reserved = o.reserved.saturating_sub(used);
                    if o.remaining == 0 {
                        o.status = OrderStatus::Filled;
                    } else {
                        o.status = OrderStatus::PartiallyFilled;
                        self.books.entry(o.isin.clone()).or_default().insert(&o);
                    }
                    self.orders.insert(id.clone(), o);
                }
                self.trades.insert(trade.trade_id.clone(), (trade, TradeStatus::Settled));
            }
            TradeEvent::Failed { trade_id, txn_id, reason } => {
                self.intents.remove(&txn_id);
                if let Some(t) = self.trades.get_mut(&trade_id) {
                    t.1 = TradeStatus::Failed(reason);
                }
            }
        }
        Ok(())
    }

    /// Canonical encoding for replay-equality checks.
    pub fn encode_state(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        for o in self.orders.values() {
            e.str(&o.order_id)
                .item(&o.party)
                .u64(o.remaining)
                .u64(o.filled)
                .u64(o.reserved)
                .str(&format!("{:?}", o.status));
        }
        for (t, s) in self.trades.values() {
            e.item(t).str(&format!("{s:?}"));
        }
        for l in self.listings.values() {
            e.item(l);
        }
        for (id, i) in &self.intents {
            e.item(id).item(&i.isin);
        }
        for (isin, b) in &self.books {
            e.item(isin);
            for (_, _, id) in &b.bids {
                e.str(id);
            }
            for (_, _, id) in &b.asks {
                e.str(id);
            }
        }
        e.finish()
    }
}

fn trade_seq(trade_id: &str) -> u64 {
    trade_id.rsplit_once("-T").and_then(|(_, n)| n.parse().ok()).unwrap_or(0)
}

pub struct TradeReducer(pub ManagerId);

impl Reducer for TradeReducer {
    type State = TradeState;
    fn init(&self) -> TradeState {
        TradeState::new(self.0.clone())
    }
    fn step(&self, s: &mut TradeState, env: &EventEnvelope) -> Result<(), CodecError> {
        s.apply(env)
    }
}

// ---------------------------------------------------------------------------
// Errors

/// Why an order was turned away.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Reject {
    #[error("InsufficientBalance: {0}")]
    InsufficientBalance(String),
    #[error("UnknownInstrument: {0}")]
    UnknownInstrument(Isin),
    #[error("Suspended: {0} is not live")]
    Suspended(Isin),
    #[error("StaleStateVersion: pinned {pinned}, current {current}")]
    StaleStateVersion { pinned: u64, current: u64 },
    #[error("InvalidOrder: {0}")]
    InvalidOrder(String),
    #[error("InstrumentBusy: {0} has an unresolved settlement")]
    InstrumentBusy(Isin),
    #[error("Refused: {0}")]
    Refused(String),
}

#[derive(Debug, Error)]
pub enum TradeError {
    #[error("order {order_id} rejected: {reason}")]
    Rejected { order_id: String, reason: Reject },
    #[error("unknown order {0}")]
    UnknownOrder(String),
    #[error("{party} does not own {order_id}")]
    NotOwner { order_id: String, party: PartyId },
    #[error("order {0} is already terminal")]
    AlreadyTerminal(String),
    #[error("transaction {0} is in doubt")]
    InDoubt(TxnId),
    #[error("trade manager crashed at {0}")]
    Crashed(&'static str),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl From<CodecError> for TradeError {
    fn from(e: CodecError) -> Self {
        TradeError::Malformed(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Settlement access

/// How the trade manager reaches the transaction layer.
pub trait Settlement {
    fn execute(&mut self, txn: AtomicTxn) -> TxnOutcome;
    /// One request/response exchange with a participant.
    fn call(&mut self, from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Option<TxnMessage>;
    fn checkpoint(&mut self, _who: &ManagerId, _at: Checkpoint) -> Result<(), Crashed> {
        Ok(())
    }
}

/// Settlement through a coordinator over a transport.
pub struct Coordinated<'a, D: KeyDirectory> {
    pub coordinator: &'a Coordinator<D>,
    pub net: &'a mut dyn Transport,
}

impl<D: KeyDirectory> Settlement for Coordinated<'_, D> {
    fn execute(&mut self, txn: AtomicTxn) -> TxnOutcome {
        self.coordinator.execute_atomic(txn, self.net)
    }
    fn call(&mut self, from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Option<TxnMessage> {
        self.net.call(from, to, msg).ok()
    }
    fn checkpoint(&mut self, who: &ManagerId, at: Checkpoint) -> Result<(), Crashed> {
        self.net.checkpoint(who, at)
    }
}

// ---------------------------------------------------------------------------
// Manager

#[derive(Debug, Clone, Copy)]
pub struct TradeConfig {
    /// Reject orders whose pinned version is not current at entry. When
    /// off they are accepted but never match, and are cancelled at the next
    /// version change.
    pub reject_stale_at_entry: bool,
}

impl Default for TradeConfig {
    fn default() -> Self {
        TradeConfig { reject_stale_at_entry: true }
    }
}

pub struct TradeManager {
    id: ManagerId,
    ledger: Ledger,
    state: TradeState,
    dir: IdentityHandle,
    operator: PartySigner,
    config: TradeConfig,
}

impl std::fmt::Debug for TradeManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TradeManager").field("id", &self.id).field("len", &self.ledger.len()).finish()
    }
}

enum Resolved {
    Committed,
    Aborted(String),
    Open,
}

impl TradeManager {
    pub fn new(id: ManagerId, storage: Box<dyn Storage>, dir: IdentityHandle, operator: PartySigner) -> Self {
        TradeManager {
            ledger: Ledger::with_storage(id.as_str(), storage),
            state: TradeState::new(id.clone()),
            id,
            dir,
            operator,
            config: TradeConfig::default(),
        }
    }

    /// Restarts from persisted storage. Open intents stay open until
    /// [`TradeManager::resolve_pending`] runs.
    pub fn recover(
        id: ManagerId,
        storage: Box<dyn Storage>,
        dir: IdentityHandle,
        operator: PartySigner,
    ) -> Result<Self, LedgerError> {
        let (ledger, _) = Ledger::open(id.as_str(), storage)?;
        let entries = ledger.entries();
        let state = replay(entries.iter().map(|e| e.as_ref()), &TradeReducer(id.clone()))?;
        Ok(TradeManager { id, ledger, state, dir, operator, config: TradeConfig::default() })
    }

    pub fn with_config(mut self, config: TradeConfig) -> Self {
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

    pub fn state(&self) -> &TradeState {
        &self.state
    }

    /// Authenticated orders and settled trades in ledger order.
    pub fn trade_feed(&self, from_seq: u64) -> Result<Subscription, LedgerError> {
        self.ledger.subscribe(from_seq)
    }

    pub fn order_draft(&self, req: &OrderRequest, client: &dyn Signer) -> Draft {
        let ev = TradeEvent::Submit(req.clone());
        self.ledger.sign_draft(ev.kind(), ev.encode(), client, self.dir.epoch())
    }

    pub fn cancel_draft(&self, order_id: &str, client: &dyn Signer) -> Draft {
        let ev = TradeEvent::CancelRequest { order_id: order_id.to_owned() };
        self.ledger.sign_draft(ev.kind(), ev.encode(), client, self.dir.epoch())
    }

    fn log(&mut self, ev: TradeEvent) -> Result<Arc<EventEnvelope>, LedgerError> {
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), &self.operator, self.dir.epoch());
        self.append(draft)
    }

    fn append(&mut self, draft: Draft) -> Result<Arc<EventEnvelope>, LedgerError> {
        let env = self.ledger.append(draft, &self.dir)?;
        self.state.apply(&env)?;
        Ok(env)
    }

    fn next_txn_id(&self) -> TxnId {
        TxnId(format!("{}-X{}", self.id, self.ledger.len()))
    }

    fn txn(&self, actions: Vec<TxnAction>) -> AtomicTxn {
        AtomicTxn::new(self.next_txn_id(), actions, &self.operator, self.dir.epoch())
    }

    fn checkpoint(&self, s: &mut dyn Settlement, at: Checkpoint) -> Result<(), TradeError> {
        s.checkpoint(&self.id, at).map_err(|_| TradeError::Crashed(at.name()))
    }

    fn funding(&self, o: &Order) -> Option<(ManagerId, ResourceId)> {
        let l = self.state.listings.get(&o.isin)?;
        Some(match o.side {
            Side::Buy => (l.currency_manager.clone(), l.currency.clone()),
            Side::Sell => (l.security_manager.clone(), o.isin.resource()),
        })
    }

    /// Registers or updates an instrument. A version change cancels orders
    /// pinned to an older version; a suspended instrument loses its book.
    pub fn sync_instrument(&mut self, listing: Listing, s: &mut dyn Settlement) -> Result<Vec<Trade>, TradeError> {
        if self.state.listings.get(&listing.isin) == Some(&listing) {
            return Ok(Vec::new());
        }
        let isin = listing.isin.clone();
        self.log(TradeEvent::Listing(listing))?;
        self.sweep(&isin, s)
    }

    /// Entry point for a client-signed `order.submit` draft.
    pub fn submit_order(&mut self, draft: Draft, s: &mut dyn Settlement) -> Result<String, TradeError> {
        if draft.kind != "order.submit" {
            return Err(TradeError::Malformed(format!("expected order.submit, got {}", draft.kind)));
        }
        let req = match TradeEvent::decode(&draft.kind, &draft.payload)? {
            TradeEvent::Submit(r) => r,
            _ => unreachable!("kind checked"),
        };
        let env = self.append(draft)?;
        let order_id = order_id_at(&self.id, env.seq);
        if let Err(reason) = self.admit(&req) {
            self.log(TradeEvent::Rejected { order_id: order_id.clone(), txn_id: None, reason: reason.to_string() })?;
            return Err(TradeError::Rejected { order_id, reason });
        }
        let order = self.state.orders[&order_id].clone();
        let (manager, resource) = self.funding(&order).expect("admitted orders are listed");
        let txn = self.txn(vec![TxnAction {
            manager,
            effect: Effect::Resource(ResourceEffect::Reserve {
                reservation_id: order.reservation_id.clone(),
                owner: order.party.clone(),
                resource,
                amount: order.exposure(),
            }),
        }]);
        let txn_id = txn.txn_id.clone();
        self.log(TradeEvent::Reserving { order_id: order_id.clone(), txn: txn.clone() })?;
        self.checkpoint(s, Checkpoint::AfterIntent)?;
        let outcome = s.execute(txn);
        self.checkpoint(s, Checkpoint::BeforeResult)?;
        match outcome {
            TxnOutcome::Committed { .. } => {
                self.log(TradeEvent::Accepted { order_id: order_id.clone(), txn_id })?;
                self.match_isin(&req.isin, s)?;
                Ok(order_id)
            }
            TxnOutcome::Aborted { reason } => {
                self.log(TradeEvent::Rejected { order_id: order_id.clone(), txn_id: Some(txn_id), reason: reason.clone() })?;
                let reason = if reason.contains("InsufficientBalance") {
                    Reject::InsufficientBalance(reason)
                } else {
                    Reject::Refused(reason)
                };
                Err(TradeError::Rejected { order_id, reason })
            }
            TxnOutcome::InDoubt { .. } => Err(TradeError::InDoubt(txn_id)),
        }
    }

    fn admit(&self, req: &OrderRequest) -> Result<(), Reject> {
        let l = self.state.listings.get(&req.isin).ok_or_else(|| Reject::UnknownInstrument(req.isin.clone()))?;
        if l.status != InstanceStatus::Live {
            return Err(Reject::Suspended(req.isin.clone()));
        }
        if req.qty == 0 || req.limit_price == 0 {
            return Err(Reject::InvalidOrder("quantity and price must be positive".into()));
        }
        if req.qty.checked_mul(req.limit_price).map_or(true, |v| v > i64::MAX as u64) {
            return Err(Reject::InvalidOrder("notional overflows".into()));
        }
        if self.config.reject_stale_at_entry && req.pinned_version != l.state_version {
            return Err(Reject::StaleStateVersion { pinned: req.pinned_version, current: l.state_version });
        }
        if self.state.is_frozen(&req.isin) {
            return Err(Reject::InstrumentBusy(req.isin.clone()));
        }
        Ok(())
    }

    /// Entry point for a client-signed `order.cancel_request` draft.
    pub fn cancel_order(&mut self, draft: Draft, s: &mut dyn Settlement) -> Result<(), TradeError> {
        let order_id = match TradeEvent::decode(&draft.kind, &draft.payload)? {
            TradeEvent::CancelRequest { order_id } => order_id,
            _ => return Err(TradeError::Malformed(format!("expected order.cancel_request, got {}", draft.kind))),
        };
        let o = self.state.orders.get(&order_id).ok_or_else(|| TradeError::UnknownOrder(order_id.clone()))?;
        if o.party != draft.author {
            return Err(TradeError::NotOwner { order_id, party: draft.author });
        }
        if !o.status.is_live() {
            return Err(TradeError::AlreadyTerminal(order_id));
        }
        if self.state.is_frozen(&o.isin) {
            return Err(TradeError::Rejected { reason: Reject::InstrumentBusy(o.isin.clone()), order_id });
        }
        self.append(draft)?;
        self.release(&order_id, "cancelled by owner", s)
    }

    /// Returns whatever is still reserved for `order_id` and closes it.
    fn release(&mut self, order_id: &str, reason: &str, s: &mut dyn Settlement) -> Result<(), TradeError> {
        let o = self.state.orders[order_id].clone();
        if o.reserved == 0 {
            self.log(TradeEvent::Cancelled { order_id: order_id.into(), txn_id: None, reason: reason.into() })?;
            return Ok(());
        }
        let (manager, _) = self.funding(&o).expect("listed");
        let txn = self.txn(vec![TxnAction {
            manager,
            effect: Effect::Resource(ResourceEffect::Release { reservation_id: o.reservation_id.clone(), amount: o.reserved }),
        }]);
        let txn_id = txn.txn_id.clone();
        self.log(TradeEvent::Releasing { order_id: order_id.into(), reason: reason.into(), txn: txn.clone() })?;
        self.checkpoint(s, Checkpoint::AfterIntent)?;
        let outcome = s.execute(txn);
        self.checkpoint(s, Checkpoint::BeforeResult)?;
        match outcome {
            TxnOutcome::Committed { .. } => {
                self.log(TradeEvent::Cancelled { order_id: order_id.into(), txn_id: Some(txn_id), reason: reason.into() })?;
                Ok(())
            }
            TxnOutcome::Aborted { reason } => {
                self.log(TradeEvent::ReleaseFailed { order_id: order_id.into(), txn_id, reason })?;
                Ok(())
            }
            TxnOutcome::InDoubt { .. } => Err(TradeError::InDoubt(txn_id)),
        }
    }

    /// Cancels stale or suspended orders on `isin`, then matches.
    fn sweep(&mut self, isin: &Isin, s: &mut dyn Settlement) -> Result<Vec<Trade>, TradeError> {
        if self.state.is_frozen(isin) {
            return Ok(Vec::new());
        }
        let Some(l) = self.state.listings.get(isin).cloned() else { return Ok(Vec::new()) };
        let doomed: Vec<(String, &'static str)> = self
            .state
            .orders
            .values()
            .filter(|o| &o.isin == isin && o.status.is_live())
            .filter_map(|o| {
                if l.status != InstanceStatus::Live {
                    Some((o.order_id.clone(), "instrument suspended"))
                } else if o.pinned_version != l.state_version {
                    Some((o.order_id.clone(), "stale state version"))
                } else {
                    None
                }
            })
            .collect();
        for (id, why) in doomed {
            self.release(&id, why, s)?;
        }
        self.match_isin(isin, s)
    }

    /// The next executable pair: best bid and best ask at the current
    /// version, if they cross.
    fn next_match(&self, isin: &Isin) -> Option<(Order, Order)> {
        let l = self.state.listings.get(isin)?;
        if l.status != InstanceStatus::Live {
            return None;
        }
        let book = self.state.books.get(isin)?;
        let current = |id: &String| {
            let o = &self.state.orders[id];
            (o.pinned_version == l.state_version).then(|| o.clone())
        };
        let bid = book.bids.iter().find_map(|(_, _, id)| current(id))?;
        let ask = book.asks.iter().find_map(|(_, _, id)| current(id))?;
        (bid.limit_price >= ask.limit_price).then_some((bid, ask))
    }

    /// Matches and settles until the book for `isin` no longer crosses.
    pub fn match_isin(&mut self, isin: &Isin, s: &mut dyn Settlement) -> Result<Vec<Trade>, TradeError> {
        let mut trades = Vec::new();
        while !self.state.is_frozen(isin) {
            let Some((bid, ask)) = self.next_match(isin) else { break };
            let l = self.state.listings[isin].clone();
            let price = if bid.entry_seq < ask.entry_seq { bid.limit_price } else { ask.limit_price };
            let qty = bid.remaining.min(ask.remaining);
            let txn_id = self.next_txn_id();
            let trade = Trade {
                trade_id: format!("{}-T{}", self.id, self.ledger.len()),
                isin: isin.clone(),
                buy_order: bid.order_id.clone(),
                sell_order: ask.order_id.clone(),
                buyer: bid.party.clone(),
                seller: ask.party.clone(),
                qty,
                price,
                txn_id,
            };
            let mut actions = vec![
                TxnAction {
                    manager: l.security_manager.clone(),
                    effect: Effect::Resource(ResourceEffect::Draw {
                        reservation_id: ask.reservation_id.clone(),
                        amount: qty,
                        to: bid.party.clone(),
                    }),
                },
                TxnAction {
                    manager: l.currency_manager.clone(),
                    effect: Effect::Resource(ResourceEffect::Draw {
                        reservation_id: bid.reservation_id.clone(),
                        amount: qty * price,
                        to: ask.party.clone(),
                    }),
                },
            ];
            let improvement = qty * (bid.limit_price - price);
            if improvement > 0 {
                actions.push(TxnAction {
                    manager: l.currency_manager.clone(),
                    effect: Effect::Resource(ResourceEffect::Release {
                        reservation_id: bid.reservation_id.clone(),
                        amount: improvement,
                    }),
                });
            }
            if let Some(cm) = &l.contract_manager {
                actions.push(TxnAction {
                    manager: cm.clone(),
                    effect: Effect::Contract(ContractEffect::AssertVersion { isin: isin.clone(), version: l.state_version }),
                });
            }
            let txn = self.txn(actions);
            debug_assert_eq!(txn.txn_id, trade.txn_id);
            self.log(TradeEvent::MatchPending { trade: trade.clone(), txn: txn.clone() })?;
            self.checkpoint(s, Checkpoint::AfterIntent)?;
            let outcome = s.execute(txn);
            self.checkpoint(s, Checkpoint::BeforeResult)?;
            match outcome {
                TxnOutcome::Committed { .. } => {
                    self.log(TradeEvent::Settled { trade: trade.clone() })?;
                    trades.push(trade);
                }
                TxnOutcome::Aborted { reason } => self.fail_trade(&trade, reason, s)?,
                TxnOutcome::InDoubt { .. } => break,
            }
        }
        Ok(trades)
    }

    /// A settlement that aborted: both orders are rejected and whatever
    /// they still hold is returned.
    fn fail_trade(&mut self, trade: &Trade, reason: String, s: &mut dyn Settlement) -> Result<(), TradeError> {
        self.log(TradeEvent::Failed { trade_id: trade.trade_id.clone(), txn_id: trade.txn_id.clone(), reason: reason.clone() })?;
        for id in [&trade.buy_order, &trade.sell_order] {
            self.log(TradeEvent::Rejected { order_id: id.clone(), txn_id: None, reason: format!("settlement failed: {reason}") })?;
            self.release(id, "settlement failed", s)?;
        }
        Ok(())
    }

    fn query_participants(&self, txn: &AtomicTxn, s: &mut dyn Settlement) -> Resolved {
        let mut committed = false;
        let mut aborted = None;
        for p in txn.participants() {
            let q = TxnMessage::new(txn.txn_id.clone(), Body::DecisionQuery, &self.operator, self.dir.epoch());
            match s.call(&self.id, &p, q) {
                Some(r) if r.txn_id == txn.txn_id && r.verify(&self.dir) => match r.body {
                    Body::DecisionReply(LocalStatus::Committed) => committed = true,
                    Body::DecisionReply(LocalStatus::Aborted | LocalStatus::Unknown) => {
                        aborted = Some(format!("{p} aborted"))
                    }
                    _ => {}
                },
                _ => {}
            }
        }
        match (committed, aborted) {
            (true, _) => Resolved::Committed,
            (false, Some(r)) => Resolved::Aborted(r),
            (false, None) => Resolved::Open,
        }
    }

    /// Settles the outcome of every open intent by asking its participants.
    /// Returns the ids still unresolved.
    pub fn resolve_pending(&mut self, s: &mut dyn Settlement) -> Result<Vec<TxnId>, TradeError> {
        let open: Vec<(TxnId, Intent)> = self.state.intents.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut touched = BTreeSet::new();
        let mut left = Vec::new();
        for (txn_id, intent) in open {
            let verdict = self.query_participants(&intent.txn, s);
            touched.insert(intent.isin.clone());
            match (verdict, intent.purpose) {
                (Resolved::Open, _) => left.push(txn_id),
                (Resolved::Committed, Purpose::Reserve { order_id }) => {
                    self.log(TradeEvent::Accepted { order_id, txn_id })?;
                }
                (Resolved::Aborted(reason), Purpose::Reserve { order_id }) => {
                    self.log(TradeEvent::Rejected { order_id, txn_id: Some(txn_id), reason })?;
                }
                (Resolved::Committed, Purpose::Release { order_id, reason }) => {
                    self.log(TradeEvent::Cancelled { order_id, txn_id: Some(txn_id), reason })?;
                }
                (Resolved::Aborted(reason), Purpose::Release { order_id, .. }) => {
                    self.log(TradeEvent::ReleaseFailed { order_id, txn_id, reason })?;
                }
                (Resolved::Committed, Purpose::Settle(trade)) => {
                    self.log(TradeEvent::Settled { trade })?;
                }
                (Resolved::Aborted(reason), Purpose::Settle(trade)) => {
                    // Nothing moved; the orders may rest again.
                    self.log(TradeEvent::Failed { trade_id: trade.trade_id, txn_id, reason })?;
                }
            }
        }
        for isin in touched {
            self.sweep(&isin, s)?;
        }
        Ok(left)
    }
}
