//! Order and trade surveillance over the trade feed.
//!
//! The monitor keeps no state of its own beyond what it folds from the
//! feed, so real-time and ex-post analysis are the same [`Evaluator`] fed
//! live or from a ledger file. Logical time is the trade-ledger seq.
//!
//! Rule predicates, all per instrument:
//!
//! * `self_trade(window)`: a settled trade whose buyer and seller are the
//!   same party and whose two orders were entered at most `window` apart.
//!   Evidence: both order seqs and the settlement seq.
//! * `wash_trade(window, min_round_trips, price_tolerance_bp)`: a round
//!   trip is a party's trade followed by an opposite-side trade of equal
//!   quantity, at most `window` later, with prices within the tolerance
//!   (relative to the lower price). Round trips chain while each starts at
//!   most `window` after the previous one ended; a closed chain of at least
//!   `min_round_trips` raises one alert citing every settlement seq in it.
//!   Self trades are left to `self_trade`.
//! * `price_spike(window, threshold_bp)`: a trade whose price differs from
//!   the previous trade, settled at most `window` earlier, by more than
//!   `threshold_bp` of the earlier price.
//! * `volume_surge(window, multiple)`: at a trade with seq `s`, volume over
//!   `(s - window, s]` exceeds `multiple` times the non-zero volume over
//!   `(s - 2 window, s - window]`. Further surges are suppressed until a
//!   full window passes without one.
//!
//! Supervisor queries are conjunctions of clauses joined by `and`:
//! `field op value` with `op` one of `= != < <= > >=`, or `seq in a..b`
//! (half-open). Fields: `kind` (`order`/`trade`), `isin`, `party` (any
//! side), `buyer`, `seller`, `side`, `qty`, `price`, `seq`, `id`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::Signer;
use crate::ids::{Isin, PartyId};
use crate::ledger::{parse_records, verify_chain, EventEnvelope, FileTail, KeyDirectory, VerifyOutcome};
use crate::trading::{Side, Trade, TradeEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RuleKind {
    SelfTrade { window: u64 },
    WashTrade { window: u64, min_round_trips: u32, price_tolerance_bp: u64 },
    PriceSpike { window: u64, threshold_bp: u64 },
    VolumeSurge { window: u64, multiple: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: RuleKind,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default, rename = "rule")]
    pub rules: Vec<RuleSpec>,
}

impl RuleSet {
    pub fn from_toml(text: &str) -> Result<Self, MonitorError> {
        let set: RuleSet = toml::from_str(text).map_err(|e| MonitorError::BadRule(e.to_string()))?;
        for r in &set.rules {
            r.validate()?;
        }
        Ok(set)
    }

    /// One rule of each kind with moderate parameters.
    pub fn standard() -> Self {
        let r = |id: &str, kind| RuleSpec { id: id.into(), kind, enabled: true };
        RuleSet {
            rules: vec![
                r("self-trade", RuleKind::SelfTrade { window: 1_000 }),
                r("wash-trade", RuleKind::WashTrade { window: 200, min_round_trips: 2, price_tolerance_bp: 50 }),
                r("price-spike", RuleKind::PriceSpike { window: 200, threshold_bp: 1_000 }),
                r("volume-surge", RuleKind::VolumeSurge { window: 100, multiple: 5 }),
            ],
        }
    }
}

impl RuleSpec {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let bad = |m: &str| Err(MonitorError::BadRule(format!("{}: {m}", self.id)));
        match self.kind {
            RuleKind::SelfTrade { window } if window == 0 => bad("window must be positive"),
            RuleKind::WashTrade { window, min_round_trips, .. } if window == 0 || min_round_trips == 0 => {
                bad("window and min_round_trips must be positive")
            }
            RuleKind::PriceSpike { window, threshold_bp } if window == 0 || threshold_bp == 0 => {
                bad("window and threshold must be positive")
            }
            RuleKind::VolumeSurge { window, multiple } if window == 0 || multiple == 0 => {
                bad("window and multiple must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    RealTime,
    ExPost,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub rule_id: String,
    pub isin: Isin,
    pub parties: BTreeSet<PartyId>,
    /// Trade-ledger seqs, ascending.
    pub evidence: Vec<u64>,
    pub detected_at: u64,
    pub mode: Mode,
}

impl Alert {
    /// Everything but the mode, for comparing real-time and ex-post runs.
    pub fn key(&self) -> (String, Isin, BTreeSet<PartyId>, Vec<u64>, u64) {
        (self.rule_id.clone(), self.isin.clone(), self.parties.clone(), self.evidence.clone(), self.detected_at)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("alerts serialize")
    }
}

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("invalid rule: {0}")]
    BadRule(String),
    #[error("ledger corrupt at seq {seq}: {reason}")]
    CorruptLedger { seq: u64, reason: String },
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Seq of the submission an order id refers to.
fn order_seq(order_id: &str) -> Option<u64> {
    order_id.rsplit_once("-O").and_then(|(_, n)| n.parse().ok())
}

// ---------------------------------------------------------------------------
// Evaluator

#[derive(Debug, Clone)]
struct Leg {
    seq: u64,
    side: Side,
    qty: u64,
    price: u64,
}

#[derive(Debug, Clone, Default)]
struct WashTrack {
    open: VecDeque<Leg>,
    /// Current chain of round trips: (first seq, last seq) each.
    chain: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, Default)]
struct IsinTrack {
    last_trade: Option<(u64, u64)>,
    /// (seq, qty) of recent trades.
    recent: VecDeque<(u64, u64)>,
    surge_until: Option<u64>,
}

fn within_bp(a: u64, b: u64, bp: u64) -> bool {
    let (lo, hi) = (a.min(b) as u128, a.max(b) as u128);
    (hi - lo) * 10_000 <= bp as u128 * lo
}

/// Incremental rule evaluation over trade-feed envelopes.
#[derive(Debug, Clone)]
pub struct Evaluator {
    rules: Vec<RuleSpec>,
    mode: Mode,
    isins: Option<BTreeSet<Isin>>,
    wash: BTreeMap<(usize, Isin, PartyId), WashTrack>,
    tracks: BTreeMap<Isin, IsinTrack>,
    last_seq: u64,
    counter: u64,
}

impl Evaluator {
    pub fn new(rules: &RuleSet, mode: Mode) -> Self {
        Evaluator {
            rules: rules.rules.iter().filter(|r| r.enabled).cloned().collect(),
            mode,
            isins: None,
            wash: BTreeMap::new(),
            tracks: BTreeMap::new(),
            last_seq: 0,
            counter: 0,
        }
    }

    /// Restricts the evaluator to a set of instruments.
    pub fn with_isins(mut self, isins: BTreeSet<Isin>) -> Self {
        self.isins = Some(isins);
        self
    }

    fn alert(&mut self, rule: &str, isin: &Isin, parties: BTreeSet<PartyId>, mut evidence: Vec<u64>, at: u64) -> Alert {
        evidence.sort_unstable();
        evidence.dedup();
        self.counter += 1;
        Alert {
            alert_id: format!("{rule}/{isin}/{}", evidence.first().copied().unwrap_or(at)),
            rule_id: rule.to_owned(),
            isin: isin.clone(),
            parties,
            evidence,
            detected_at: at,
            mode: self.mode,
        }
    }

    /// Feeds one envelope; returns alerts that became final.
    pub fn push(&mut self, env: &EventEnvelope) -> Vec<Alert> {
        self.last_seq = env.seq;
        let mut out = self.close_chains(env.seq, false);
        if env.payload_kind != "trade.settled" {
            return out;
        }
        let Ok(TradeEvent::Settled { trade }) = TradeEvent::decode(&env.payload_kind, &env.payload) else {
            return out;
        };
        if self.isins.as_ref().is_some_and(|s| !s.contains(&trade.isin)) {
            return out;
        }
        for i in 0..self.rules.len() {
            let rule = self.rules[i].clone();
            match rule.kind {
                RuleKind::SelfTrade { window } => out.extend(self.self_trade(&rule.id, window, &trade, env.seq)),
                RuleKind::WashTrade { window, price_tolerance_bp, .. } => {
                    if trade.buyer != trade.seller {
                        for (party, side) in [(&trade.buyer, Side::Buy), (&trade.seller, Side::Sell)] {
                            self.wash_leg(i, window, price_tolerance_bp, &trade, party, side, env.seq);
                        }
                    }
                }
                RuleKind::PriceSpike { window, threshold_bp } => {
                    if let Some((seq, price)) = self.tracks.get(&trade.isin).and_then(|t| t.last_trade) {
                        if env.seq - seq <= window && !within_bp(price, trade.price, threshold_bp) {
                            let parties = [trade.buyer.clone(), trade.seller.clone()].into();
                            out.push(self.alert(&rule.id, &trade.isin, parties, vec![seq, env.seq], env.seq));
                        }
                    }
                }
                RuleKind::VolumeSurge { window, multiple } => {
                    out.extend(self.volume(&rule.id, window, multiple, &trade, env.seq));
                }
            }
        }
        let t = self.tracks.entry(trade.isin.clone()).or_default();
        t.last_trade = Some((env.seq, trade.price));
        t.recent.push_back((env.seq, trade.qty));
        let horizon = self.rules.iter().filter_map(|r| match r.kind {
            RuleKind::VolumeSurge { window, .. } => Some(2 * window),
            _ => None,
        });
        let keep = horizon.max().unwrap_or(0);
        while t.recent.front().is_some_and(|(s, _)| env.seq - s >= keep) {
            t.recent.pop_front();
        }
        out
    }

    /// Flushes alerts whose evidence set can no longer grow. Call at the end
    /// of a finite feed.
    pub fn finish(&mut self) -> Vec<Alert> {
        self.close_chains(self.last_seq, true)
    }

    fn self_trade(&mut self, rule: &str, window: u64, t: &Trade, seq: u64) -> Option<Alert> {
        if t.buyer != t.seller {
            return None;
        }
        let (b, s) = (order_seq(&t.buy_order)?, order_seq(&t.sell_order)?);
        (b.abs_diff(s) <= window).then(|| self.alert(rule, &t.isin, [t.buyer.clone()].into(), vec![b, s, seq], seq))
    }

    #[allow(clippy::too_many_arguments)]
    fn wash_leg(&mut self, rule: usize, window: u64, tol: u64, t: &Trade, party: &PartyId, side: Side, seq: u64) {
        let track = self.wash.entry((rule, t.isin.clone(), party.clone())).or_default();
        while track.open.front().is_some_and(|l| seq - l.seq > window) {
            track.open.pop_front();
        }
        let hit = track
            .open
            .iter()
            .position(|l| l.side != side && l.qty == t.qty && within_bp(l.price, t.price, tol));
        match hit {
            Some(i) => {
                let leg = track.open.remove(i).expect("index from position");
                track.chain.push((leg.seq, seq));
            }
            None => track.open.push_back(Leg { seq, side, qty: t.qty, price: t.price }),
        }
    }

    fn close_chains(&mut self, now: u64, all: bool) -> Vec<Alert> {
        let mut out = Vec::new();
        let keys: Vec<(usize, Isin, PartyId)> = self.wash.keys().cloned().collect();
        for key in keys {
            let RuleKind::WashTrade { window, min_round_trips, .. } = self.rules[key.0].kind else { continue };
            let track = self.wash.get_mut(&key).expect("key listed");
            // A chain is split where a round trip starts too late; it is
            // closed once no later round trip can join it.
            let mut closed: Vec<Vec<(u64, u64)>> = Vec::new();
            let mut cur: Vec<(u64, u64)> = Vec::new();
            for rt in track.chain.drain(..) {
                if cur.last().is_some_and(|last| rt.0 > last.1 + window) {
                    closed.push(std::mem::take(&mut cur));
                }
                cur.push(rt);
            }
            if !cur.is_empty() {
                let open_leg_may_join = track.open.iter().any(|l| l.seq + window >= now);
                let last_end = cur.last().expect("non-empty").1;
                if all || (now > last_end + window && !open_leg_may_join) {
                    closed.push(cur);
                } else {
                    track.chain = cur;
                }
            }
            for c in closed {
                if c.len() >= min_round_trips as usize {
                    let evidence = c.iter().flat_map(|&(a, b)| [a, b]).collect();
                    let rule = self.rules[key.0].id.clone();
                    out.push(self.alert(&rule, &key.1, [key.2.clone()].into(), evidence, now));
                }
            }
        }
        out
    }

    fn volume(&mut self, rule: &str, window: u64, multiple: u64, t: &Trade, seq: u64) -> Option<Alert> {
        let track = self.tracks.entry(t.isin.clone()).or_default();
        if track.surge_until.is_some_and(|u| seq <= u) {
            track.surge_until = Some(seq + window);
            return None;
        }
        let in_range = |lo: u64, hi: u64| -> Vec<(u64, u64)> {
            track.recent.iter().copied().filter(|(s, _)| *s > lo && *s <= hi).collect()
        };
        let lo = seq.saturating_sub(window);
        let mut cur = in_range(lo, seq);
        cur.push((seq, t.qty));
        let base = in_range(seq.saturating_sub(2 * window), lo);
        let (cv, bv): (u64, u64) = (cur.iter().map(|x| x.1).sum(), base.iter().map(|x| x.1).sum());
        if bv == 0 || cv <= multiple * bv {
            return None;
        }
        track.surge_until = Some(seq + window);
        let evidence = base.iter().chain(cur.iter()).map(|x| x.0).collect();
        Some(self.alert(rule, &t.isin, BTreeSet::new(), evidence, seq))
    }
}

/// Runs `rules` over a complete feed, flushing at the end.
pub fn evaluate_stream<'a>(feed: impl IntoIterator<Item = &'a EventEnvelope>, rules: &RuleSet, mode: Mode) -> Vec<Alert> {
    let mut ev = Evaluator::new(rules, mode);
    let mut out = Vec::new();
    for env in feed {
        out.extend(ev.push(env));
    }
    out.extend(ev.finish());
    out
}

/// Verifies a persisted trade ledger and scans it. A torn final record is
/// ignored; anything else that fails verification is reported.
pub fn expost_scan(path: &Path, dir: &dyn KeyDirectory, rules: &RuleSet) -> Result<Vec<Alert>, MonitorError> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_records(&bytes);
    if let FileTail::Malformed { record, error, .. } = &parsed.tail {
        return Err(MonitorError::CorruptLedger { seq: *record, reason: error.to_string() });
    }
    if let VerifyOutcome::Corrupt { seq, reason } = verify_chain(parsed.entries.iter(), dir) {
        return Err(MonitorError::CorruptLedger { seq, reason });
    }
    Ok(evaluate_stream(parsed.entries.iter(), rules, Mode::ExPost))
}

// ---------------------------------------------------------------------------
// Supervisor queries

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedQuery {
    pub query: String,
    pub party: PartyId,
    pub key_epoch: u64,
    pub signature: Vec<u8>,
}

fn query_bytes(query: &str, party: &PartyId, epoch: u64) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str("monitor.query").str(query).item(party).u64(epoch);
    e.finish()
}

impl SignedQuery {
    pub fn new(query: &str, signer: &dyn Signer, key_epoch: u64) -> Self {
        let signature = signer.sign(&query_bytes(query, signer.party(), key_epoch));
        SignedQuery { query: query.to_owned(), party: signer.party().clone(), key_epoch, signature }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Row {
    pub seq: u64,
    pub kind: &'static str,
    pub id: String,
    pub isin: Isin,
    pub side: Option<&'static str>,
    pub party: Option<PartyId>,
    pub buyer: Option<PartyId>,
    pub seller: Option<PartyId>,
    pub qty: u64,
    pub price: u64,
}

/// The queryable view of one trade-ledger entry.
pub fn row_of(env: &EventEnvelope) -> Option<Row> {
    let side_name = |s: Side| match s {
        Side::Buy => "buy",
        Side::Sell => "sell",
    };
    match TradeEvent::decode(&env.payload_kind, &env.payload).ok()? {
        TradeEvent::Submit(r) => Some(Row {
            seq: env.seq,
            kind: "order",
            id: format!("O{}", env.seq),
            isin: r.isin,
            side: Some(side_name(r.side)),
            party: Some(env.author.clone()),
            buyer: None,
            seller: None,
            qty: r.qty,
            price: r.limit_price,
        }),
        TradeEvent::Settled { trade } => Some(Row {
            seq: env.seq,
            kind: "trade",
            id: trade.trade_id,
            isin: trade.isin,
            side: None,
            party: None,
            buyer: Some(trade.buyer),
            seller: Some(trade.seller),
            qty: trade.qty,
            price: trade.price,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Clause {
    Cmp { field: String, op: Op, value: String },
    SeqRange(u64, u64),
}

const TEXT_FIELDS: [&str; 7] = ["kind", "isin", "party", "buyer", "seller", "side", "id"];
const NUM_FIELDS: [&str; 3] = ["qty", "price", "seq"];

/// A parsed conjunctive filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query(Vec<Clause>);

impl Query {
    pub fn parse(text: &str) -> Result<Self, MonitorError> {
        let bad = |m: String| MonitorError::MalformedQuery(m);
        let mut clauses = Vec::new();
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Ok(Query(clauses));
        }
        for part in words.split(|w| w.eq_ignore_ascii_case("and")) {
            match part {
                ["seq", "in", range] => {
                    let (a, b) = range.split_once("..").ok_or_else(|| bad(format!("bad range {range}")))?;
                    let n = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad number {s}")));
                    clauses.push(Clause::SeqRange(n(a)?, n(b)?));
                }
                [field, op, value] => {
                    let op = match *op {
                        "=" | "==" => Op::Eq,
                        "!=" => Op::Ne,
                        "<" => Op::Lt,
                        "<=" => Op::Le,
                        ">" => Op::Gt,
                        ">=" => Op::Ge,
                        o => return Err(bad(format!("unknown operator {o}"))),
                    };
                    if NUM_FIELDS.contains(field) {
                        value.parse::<u64>().map_err(|_| bad(format!("{field} needs a number")))?;
                    } else if !TEXT_FIELDS.contains(field) {
                        return Err(bad(format!("unknown field {field}")));
                    } else if !matches!(op, Op::Eq | Op::Ne) {
                        return Err(bad(format!("{field} supports = and != only")));
                    }
                    clauses.push(Clause::Cmp { field: field.to_string(), op, value: value.to_string() });
                }
                other => return Err(bad(format!("cannot parse clause `{}`", other.join(" ")))),
            }
        }
        Ok(Query(clauses))
    }

    pub fn matches(&self, row: &Row) -> bool {
        self.0.iter().all(|c| match c {
            Clause::SeqRange(a, b) => *a <= row.seq && row.seq < *b,
            Clause::Cmp { field, op, value } => {
                if let Some(n) = match field.as_str() {
                    "qty" => Some(row.qty),
                    "price" => Some(row.price),
                    "seq" => Some(row.seq),
                    _ => None,
                } {
                    let v: u64 = value.parse().expect("checked at parse");
                    return match op {
                        Op::Eq => n == v,
                        Op::Ne => n != v,
                        Op::Lt => n < v,
                        Op::Le => n <= v,
                        Op::Gt => n > v,
                        Op::Ge => n >= v,
                    };
                }
                let s = |p: &Option<PartyId>| p.as_ref().is_some_and(|p| p.as_str() == value);
                let hit = match field.as_str() {
                    "kind" => row.kind == value,
                    "isin" => row.isin.as_str() == value,
                    "party" => s(&row.party) || s(&row.buyer) || s(&row.seller),
                    "buyer" => s(&row.buyer),
                    "seller" => s(&row.seller),
                    "side" => row.side == Some(value.as_str()),
                    "id" => &row.id == value,
                    _ => false,
                };
                hit == (*op == Op::Eq)
            }
        })
    }
}

/// Read-only evaluation of a signed query over trade-ledger entries.
pub fn supervisor_query<'a>(
    entries: impl IntoIterator<Item = &'a EventEnvelope>,
    q: &SignedQuery,
    dir: &dyn KeyDirectory,
) -> Result<Vec<Row>, MonitorError> {
    let authentic = q.key_epoch <= dir.epoch()
        && dir.key_at(&q.party, q.key_epoch).is_some_and(|k| k.verify(&query_bytes(&q.query, &q.party, q.key_epoch), &q.signature));
    if !authentic {
        return Err(MonitorError::Unauthorized("query signature does not verify".into()));
    }
    if !dir.may_author(&q.party, "monitor.query") {
        return Err(MonitorError::Unauthorized(format!("{} lacks the supervisor role", q.party)));
    }
    let query = Query::parse(&q.query)?;
    Ok(entries.into_iter().filter_map(row_of).filter(|r| query.matches(r)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::fixture::Parties;
    use crate::ids::{ManagerId, TxnId};
    use crate::ledger::Ledger;
    use crate::trading::{order_id_at, OrderRequest};
    use proptest::prelude::*;

    const ISIN: &str = "XS0000000001";

    /// A synthetic trade ledger: orders and settlements written directly.
    struct Feed {
        p: Parties,
        ledger: Ledger,
        /// (seq, trade) of every settlement.
        trades: Vec<(u64, Trade)>,
    }

    impl Feed {
        fn new() -> Self {
            Feed { p: Parties::new(), ledger: Ledger::in_memory("tm"), trades: Vec::new() }
        }

        fn order(&mut self, who: &str, side: Side, qty: u64, price: u64) -> String {
            let ev = TradeEvent::Submit(OrderRequest { side, isin: Isin::from(ISIN), pinned_version: 1, qty, limit_price: price });
            let env = self.ledger.append_signed(ev.kind(), ev.encode(), &self.p.s(who), &self.p.dir()).unwrap();
            order_id_at(&ManagerId::from("tm"), env.seq)
        }

        /// Crosses a fresh buy order of `buyer` with a fresh sell of `seller`.
        fn trade(&mut self, buyer: &str, seller: &str, qty: u64, price: u64) -> u64 {
            let b = self.order(buyer, Side::Buy, qty, price);
            let s = self.order(seller, Side::Sell, qty, price);
            let seq = self.ledger.len();
            let trade = Trade {
                trade_id: format!("tm-T{seq}"),
                isin: Isin::from(ISIN),
                buy_order: b,
                sell_order: s,
                buyer: self.p.id(buyer),
                seller: self.p.id(seller),
                qty,
                price,
                txn_id: TxnId(format!("tm-X{seq}")),
            };
            let ev = TradeEvent::Settled { trade: trade.clone() };
            self.ledger.append_signed(ev.kind(), ev.encode(), &self.p.s("tm"), &self.p.dir()).unwrap();
            self.trades.push((seq, trade));
            seq
        }

        fn entries(&self) -> Vec<EventEnvelope> {
            self.ledger.entries().iter().map(|e| (**e).clone()).collect()
        }
    }

    fn rules(kind: RuleKind) -> RuleSet {
        RuleSet { rules: vec![RuleSpec { id: "r".into(), kind, enabled: true }] }
    }

    fn keys(a: &[Alert]) -> BTreeSet<(String, Isin, BTreeSet<PartyId>, Vec<u64>, u64)> {
        a.iter().map(Alert::key).collect()
    }

    fn realtime(entries: &[EventEnvelope], rules: &RuleSet) -> Vec<Alert> {
        let mut ev = Evaluator::new(rules, Mode::RealTime);
        let mut out: Vec<Alert> = entries.iter().flat_map(|e| ev.push(e)).collect();
        out.extend(ev.finish());
        out
    }

    /// Brute force: every settled trade, checked on its own.
    fn self_trade_oracle(f: &Feed, window: u64) -> Vec<Vec<u64>> {
        f.trades
            .iter()
            .filter(|(_, t)| t.buyer == t.seller)
            .filter_map(|(seq, t)| {
                let (b, s) = (order_seq(&t.buy_order)?, order_seq(&t.sell_order)?);
                (b.abs_diff(s) <= window).then(|| {
                    let mut v = vec![b, s, *seq];
                    v.sort();
                    v
                })
            })
            .collect()
    }

    #[test]
    fn empty_feed_raises_nothing() {
        assert!(evaluate_stream(std::iter::empty(), &RuleSet::standard(), Mode::ExPost).is_empty());
    }

    #[test]
    fn scripted_self_trade() {
        let mut f = Feed::new();
        f.trade("alice", "bob", 5, 100);
        let seq = f.trade("carol", "carol", 3, 100);
        f.trade("bob", "alice", 2, 101);
        let alerts = realtime(&f.entries(), &rules(RuleKind::SelfTrade { window: 10 }));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].evidence, vec![seq - 2, seq - 1, seq]);
        assert_eq!(alerts[0].parties, [f.p.id("carol")].into());
        assert_eq!(vec![alerts[0].evidence.clone()], self_trade_oracle(&f, 10));
    }

    /// Brute force: every ordered pair of a party's trades is a candidate
    /// round trip; pair greedily by earliest completion and chain.
    fn wash_oracle(f: &Feed, window: u64, min: usize, tol: u64) -> BTreeSet<(PartyId, Vec<u64>)> {
        let mut out = BTreeSet::new();
        let parties: BTreeSet<PartyId> = f.trades.iter().flat_map(|(_, t)| [t.buyer.clone(), t.seller.clone()]).collect();
        for p in parties {
            let legs: Vec<(u64, Side, u64, u64)> = f
                .trades
                .iter()
                .filter(|(_, t)| t.buyer != t.seller)
                .filter_map(|(s, t)| {
                    if t.buyer == p {
                        Some((*s, Side::Buy, t.qty, t.price))
                    } else if t.seller == p {
                        Some((*s, Side::Sell, t.qty, t.price))
                    } else {
                        None
                    }
                })
                .collect();
            let mut used = vec![false; legs.len()];
            let mut rts = Vec::new();
            for j in 0..legs.len() {
                let (sj, dj, qj, pj) = legs[j];
                for i in 0..j {
                    let (si, di, qi, pi) = legs[i];
                    if !used[i] && di != dj && qi == qj && sj - si <= window && within_bp(pi, pj, tol) {
                        used[i] = true;
                        used[j] = true;
                        rts.push((si, sj));
                        break;
                    }
                }
            }
            let mut chain: Vec<(u64, u64)> = Vec::new();
            for rt in rts.into_iter().chain([(u64::MAX, u64::MAX)]) {
                if chain.last().is_some_and(|l| rt.0 > l.1.saturating_add(window)) || rt.0 == u64::MAX {
                    if chain.len() >= min {
                        let mut ev: Vec<u64> = chain.iter().flat_map(|&(a, b)| [a, b]).collect();
                        ev.sort();
                        out.insert((p.clone(), ev));
                    }
                    chain.clear();
                }
                chain.push(rt);
            }
        }
        out
    }

    fn wash_alerts(alerts: &[Alert]) -> BTreeSet<(PartyId, Vec<u64>)> {
        alerts.iter().map(|a| (a.parties.iter().next().unwrap().clone(), a.evidence.clone())).collect()
    }

    #[test]
    fn scripted_wash_trade() {
        let mut f = Feed::new();
        let a = f.trade("alice", "bob", 10, 100);
        let b = f.trade("carol", "alice", 10, 100);
        let c = f.trade("alice", "bob", 10, 101);
        let d = f.trade("carol", "alice", 10, 100);
        let kind = RuleKind::WashTrade { window: 20, min_round_trips: 2, price_tolerance_bp: 200 };
        let alerts = realtime(&f.entries(), &rules(kind));
        let alice: Vec<&Alert> = alerts.iter().filter(|x| x.parties.contains(&f.p.id("alice"))).collect();
        assert_eq!(alice.len(), 1, "{alerts:?}");
        assert_eq!(alice[0].evidence, vec![a, b, c, d]);
        assert_eq!(wash_alerts(&alerts), wash_oracle(&f, 20, 2, 200));
    }

    #[test]
    fn single_round_trip_is_not_wash() {
        let mut f = Feed::new();
        f.trade("alice", "bob", 10, 100);
        f.trade("carol", "alice", 10, 100);
        let kind = RuleKind::WashTrade { window: 20, min_round_trips: 2, price_tolerance_bp: 200 };
        assert!(realtime(&f.entries(), &rules(kind)).is_empty());
    }

    #[test]
    fn price_spike_and_volume_surge() {
        let mut f = Feed::new();
        let a = f.trade("alice", "bob", 1, 100);
        let b = f.trade("alice", "bob", 1, 130);
        let alerts = realtime(&f.entries(), &rules(RuleKind::PriceSpike { window: 10, threshold_bp: 1_000 }));
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].evidence, vec![a, b]);
        let c = f.trade("carol", "bob", 50, 130);
        let alerts = realtime(&f.entries(), &rules(RuleKind::VolumeSurge { window: 4, multiple: 5 }));
        assert_eq!(alerts.len(), 1, "{alerts:?}");
        assert_eq!(alerts[0].evidence, vec![a, b, c]);
    }

    #[test]
    fn disabled_rules_and_bad_parameters() {
        let mut f = Feed::new();
        f.trade("carol", "carol", 3, 100);
        let mut set = rules(RuleKind::SelfTrade { window: 10 });
        set.rules[0].enabled = false;
        assert!(realtime(&f.entries(), &set).is_empty());
        let bad = RuleSpec { id: "x".into(), kind: RuleKind::PriceSpike { window: 0, threshold_bp: 5 }, enabled: true };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rules_load_from_toml() {
        let set = RuleSet::from_toml(
            "[[rule]]\nid = \"w\"\nkind = \"wash_trade\"\nwindow = 50\nmin_round_trips = 2\nprice_tolerance_bp = 25\n\n[[rule]]\nid = \"s\"\nkind = \"self_trade\"\nwindow = 9\nenabled = false\n",
        )
        .unwrap();
        assert_eq!(set.rules.len(), 2);
        assert_eq!(set.rules[0].kind, RuleKind::WashTrade { window: 50, min_round_trips: 2, price_tolerance_bp: 25 });
        assert!(!set.rules[1].enabled);
        assert!(RuleSet::from_toml("[[rule]]\nid = \"v\"\nkind = \"volume_surge\"\nwindow = 0\nmultiple = 2\n").is_err());
    }

    #[test]
    fn expost_scan_checks_the_file() {
        let mut f = Feed::new();
        f.trade("carol", "carol", 3, 100);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tm.ledger");
        crate::ledger::write_ledger_file(&path, &f.ledger.entries()).unwrap();
        let set = rules(RuleKind::SelfTrade { window: 10 });
        let post = expost_scan(&path, &f.p.dir(), &set).unwrap();
        assert_eq!(keys(&post), keys(&realtime(&f.entries(), &set)));
        assert!(post.iter().all(|a| a.mode == Mode::ExPost));
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0x10;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(expost_scan(&path, &f.p.dir(), &set), Err(MonitorError::CorruptLedger { .. })));
    }

    #[test]
    fn restart_then_expost_recovers_everything() {
        let mut f = Feed::new();
        for i in 0..6 {
            f.trade(["alice", "carol"][i % 2], ["bob", "alice"][i % 2], 10, 100);
        }
        f.trade("carol", "carol", 1, 100);
        let set = RuleSet::standard();
        let entries = f.entries();
        // A monitor that dies halfway loses its partial view; a rescan does not.
        let mut early = Evaluator::new(&set, Mode::RealTime);
        let _partial: Vec<Alert> = entries[..entries.len() / 2].iter().flat_map(|e| early.push(e)).collect();
        assert_eq!(keys(&evaluate_stream(entries.iter(), &set, Mode::ExPost)), keys(&realtime(&entries, &set)));
    }

    #[test]
    fn supervisor_queries() {
        let mut f = Feed::new();
        f.trade("alice", "bob", 5, 100);
        let t2 = f.trade("carol", "bob", 2, 99);
        let entries = f.entries();
        let q = SignedQuery::new(&format!("kind = trade and isin = {ISIN} and seq in 3..100"), &f.p.s("supervisor"), f.p.dir().epoch());
        let rows = supervisor_query(entries.iter(), &q, &f.p.dir()).unwrap();
        assert_eq!(rows.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![t2]);
        // Re-fetching by seq reproduces the row.
        assert_eq!(row_of(&entries[t2 as usize]).as_ref(), rows.first());
        let q = SignedQuery::new(&format!("party = {} and kind = order", f.p.id("bob")), &f.p.s("supervisor"), f.p.dir().epoch());
        assert_eq!(supervisor_query(entries.iter(), &q, &f.p.dir()).unwrap().len(), 2);
        let q = SignedQuery::new("kind = trade", &f.p.s("alice"), f.p.dir().epoch());
        assert!(matches!(supervisor_query(entries.iter(), &q, &f.p.dir()), Err(MonitorError::Unauthorized(_))));
        let forged = SignedQuery { party: f.p.id("supervisor"), ..SignedQuery::new("kind = trade", &crate::PartySigner::new(f.p.id("supervisor"), KeyPair::derive(1, "x")), 1) };
        assert!(matches!(supervisor_query(entries.iter(), &forged, &f.p.dir()), Err(MonitorError::Unauthorized(_))));
        let q = SignedQuery::new("price ~ 3", &f.p.s("supervisor"), f.p.dir().epoch());
        assert!(matches!(supervisor_query(entries.iter(), &q, &f.p.dir()), Err(MonitorError::MalformedQuery(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn realtime_equals_expost_and_oracles(
            script in prop::collection::vec((0usize..3, 0usize..3, 1u64..4, 98u64..103), 0..25),
            window in 5u64..40,
        ) {
            let names = ["alice", "bob", "carol"];
            let mut f = Feed::new();
            for (b, s, q, p) in script {
                f.trade(names[b], names[s], q, p);
            }
            let set = RuleSet { rules: vec![
                RuleSpec { id: "s".into(), kind: RuleKind::SelfTrade { window }, enabled: true },
                RuleSpec { id: "w".into(), kind: RuleKind::WashTrade { window, min_round_trips: 2, price_tolerance_bp: 300 }, enabled: true },
                RuleSpec { id: "p".into(), kind: RuleKind::PriceSpike { window, threshold_bp: 200 }, enabled: true },
                RuleSpec { id: "v".into(), kind: RuleKind::VolumeSurge { window, multiple: 3 }, enabled: true },
            ]};
            let entries = f.entries();
            let rt = realtime(&entries, &set);
            let post = evaluate_stream(entries.iter(), &set, Mode::ExPost);
            prop_assert_eq!(keys(&rt), keys(&post));
            let selfs: BTreeSet<Vec<u64>> = rt.iter().filter(|a| a.rule_id == "s").map(|a| a.evidence.clone()).collect();
            prop_assert_eq!(selfs, self_trade_oracle(&f, window).into_iter().collect::<BTreeSet<_>>());
            let wash: Vec<Alert> = rt.iter().filter(|a| a.rule_id == "w").cloned().collect();
            prop_assert_eq!(wash_alerts(&wash), wash_oracle(&f, window, 2, 300));
        }

        #[test]
        fn disjoint_monitors_union(script in prop::collection::vec((0usize..3, 0usize..3, 1u64..4, 98u64..103), 0..15)) {
            // Every trade here is on one ISIN, so the split is all-or-nothing.
            let names = ["alice", "bob", "carol"];
            let mut f = Feed::new();
            for (b, s, q, p) in script {
                f.trade(names[b], names[s], q, p);
            }
            let set = RuleSet::standard();
            let entries = f.entries();
            let all = evaluate_stream(entries.iter(), &set, Mode::RealTime);
            let mut mine = Evaluator::new(&set, Mode::RealTime).with_isins([Isin::from(ISIN)].into());
            let mut theirs = Evaluator::new(&set, Mode::RealTime).with_isins([Isin::from("OTHER")].into());
            let mut split: Vec<Alert> = Vec::new();
            for e in &entries {
                split.extend(mine.push(e));
                split.extend(theirs.push(e));
            }
            split.extend(mine.finish());
            split.extend(theirs.finish());
            prop_assert_eq!(keys(&all), keys(&split));
        }
    }
}
