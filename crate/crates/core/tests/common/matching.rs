//! Random order batches against a naive price-time reference.

use std::collections::BTreeMap;

use bondledger::contract::InstanceStatus;
use bondledger::identity::IdentityHandle;
use bondledger::ledger::MemDisk;
use bondledger::resource::ResourceManager;
use bondledger::trading::{Coordinated, Listing, OrderRequest, Side, TradeConfig, TradeManager};
use bondledger::txn::{participant_handle, Coordinator, Transport, TransportError, TxnHost, TxnMessage};
use bondledger::{Isin, ManagerId, ResourceId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Cast;

pub const NAMES: [&str; 3] = ["alice", "bob", "carol"];
pub const CASH: u64 = 10_000_000;
pub const UNITS: u64 = 10_000;

pub fn isin() -> Isin {
    Isin::from("XS0000000018")
}

pub struct Market {
    pub cast: Cast,
    pub sec: ResourceManager,
    pub cash: ResourceManager,
    pub tm: TradeManager,
    pub coord: Coordinator<IdentityHandle>,
    pub version: u64,
}

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

impl Market {
    pub fn new(config: TradeConfig) -> Self {
        let cast = Cast::new(3);
        let dir = cast.dir();
        let mut sec = ResourceManager::new(ManagerId::from("sec"), MemDisk::new().storage(), dir.clone(), cast.s["sec"].clone());
        let mut cash = ResourceManager::new(ManagerId::from("cash"), MemDisk::new().storage(), dir.clone(), cast.s["cash"].clone());
        sec.define_resource(isin().resource(), 0, Some(cast.id("issuer"))).unwrap();
        cash.define_resource(ResourceId::from("EUR"), 2, Some(cast.id("bank"))).unwrap();
        for who in NAMES {
            sec.issue_units(isin().resource(), cast.id(who), UNITS, &cast.s["issuer"]).unwrap();
            cash.issue_units(ResourceId::from("EUR"), cast.id(who), CASH, &cast.s["bank"]).unwrap();
        }
        let tm = TradeManager::new(ManagerId::from("tm"), MemDisk::new().storage(), dir.clone(), cast.s["tm"].clone()).with_config(config);
        let coord = Coordinator::new(ManagerId::from("coord"), cast.s["coord"].clone(), dir);
        let mut m = Market { cast, sec, cash, tm, coord, version: 0 };
        m.bump();
        m
    }

    /// Moves the listing to the next contract state version.
    pub fn bump(&mut self) {
        self.version += 1;
        let listing = Listing {
            isin: isin(),
            state_version: self.version,
            status: InstanceStatus::Live,
            security_manager: ManagerId::from("sec"),
            currency: ResourceId::from("EUR"),
            currency_manager: ManagerId::from("cash"),
            contract_manager: None,
        };
        let mut net = Pair { cash: &mut self.cash, sec: &mut self.sec };
        self.tm.sync_instrument(listing, &mut Coordinated { coordinator: &self.coord, net: &mut net }).unwrap();
    }

    pub fn order(&mut self, who: &str, side: Side, qty: u64, price: u64, pinned: u64) -> Option<String> {
        let req = OrderRequest { side, isin: isin(), pinned_version: pinned, qty, limit_price: price };
        let draft = self.tm.order_draft(&req, &self.cast.s[who]);
        let mut net = Pair { cash: &mut self.cash, sec: &mut self.sec };
        self.tm.submit_order(draft, &mut Coordinated { coordinator: &self.coord, net: &mut net }).ok()
    }

    /// (available, reserved) of cash and of bond units.
    pub fn balances(&self, who: &str) -> [(i64, i64); 2] {
        let p = self.cast.id(who);
        let eur = ResourceId::from("EUR");
        let u = isin().resource();
        [
            (self.cash.state().available(&p, &eur), self.cash.state().reserved(&p, &eur)),
            (self.sec.state().available(&p, &u), self.sec.state().reserved(&p, &u)),
        ]
    }
}

/// One order as the reference sees it.
#[derive(Debug, Clone)]
pub struct RefOrder {
    pub idx: usize,
    pub who: usize,
    pub side: Side,
    pub price: u64,
    pub left: u64,
    pub pinned: u64,
    /// Accepted while pinned to an old version: never matches.
    pub stale: bool,
}

/// Quadratic reference book: each arrival scans every resting order.
#[derive(Debug, Default)]
pub struct Reference {
    pub resting: Vec<RefOrder>,
    /// (buy idx, sell idx, qty, price).
    pub fills: Vec<(usize, usize, u64, u64)>,
}

impl Reference {
    pub fn arrive(&mut self, mut o: RefOrder) {
        if o.stale {
            self.resting.push(o);
            return;
        }
        while o.left > 0 {
            let mut best: Option<usize> = None;
            for i in 0..self.resting.len() {
                let r = &self.resting[i];
                let crosses = r.side != o.side
                    && !r.stale
                    && r.left > 0
                    && match o.side {
                        Side::Buy => r.price <= o.price,
                        Side::Sell => r.price >= o.price,
                    };
                if !crosses {
                    continue;
                }
                let better = best.map_or(true, |b| {
                    let b = &self.resting[b];
                    let price_better = match o.side {
                        Side::Buy => r.price < b.price,
                        Side::Sell => r.price > b.price,
                    };
                    price_better || (r.price == b.price && r.idx < b.idx)
                });
                if better {
                    best = Some(i);
                }
            }
            let Some(i) = best else { break };
            let q = o.left.min(self.resting[i].left);
            self.resting[i].left -= q;
            o.left -= q;
            let r = &self.resting[i];
            let (b, s) = if o.side == Side::Buy { (o.idx, r.idx) } else { (r.idx, o.idx) };
            self.fills.push((b, s, q, r.price));
        }
        self.resting.retain(|r| r.left > 0);
        if o.left > 0 {
            self.resting.push(o);
        }
    }

    /// A version change cancels every order pinned to an older version.
    pub fn bump(&mut self, version: u64) {
        self.resting.retain(|r| r.pinned >= version);
    }

    /// Expected (available, reserved) of cash and units for party `who`,
    /// given every order's side and limit by index.
    pub fn balances(&self, who: usize, orders: &[(usize, Side, u64)]) -> [(i64, i64); 2] {
        let (mut cash, mut units) = (CASH as i64, UNITS as i64);
        for &(b, s, q, p) in &self.fills {
            if orders[b].0 == who {
                cash -= (q * p) as i64;
                units += q as i64;
            }
            if orders[s].0 == who {
                cash += (q * p) as i64;
                units -= q as i64;
            }
        }
        let (mut cash_held, mut units_held) = (0i64, 0i64);
        for r in self.resting.iter().filter(|r| r.who == who) {
            match r.side {
                Side::Buy => cash_held += (r.left * r.price) as i64,
                Side::Sell => units_held += r.left as i64,
            }
        }
        [(cash - cash_held, cash_held), (units - units_held, units_held)]
    }
}

/// Runs `batches` random batches of at most 50 orders. Returns the batch
/// count, total fills and any mismatches.
pub fn run(batches: u64) -> (u64, usize, Vec<String>) {
    let mut failures = Vec::new();
    let mut total = 0;
    for seed in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reject_stale = rng.gen_bool(0.5);
        let mut m = Market::new(TradeConfig { reject_stale_at_entry: reject_stale });
        let mut r = Reference::default();
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut orders: Vec<(usize, Side, u64)> = Vec::new();
        let n = rng.gen_range(1..=50);
        for _ in 0..n {
            if rng.gen_range(0..10) == 0 {
                m.bump();
                r.bump(m.version);
                continue;
            }
            let who = rng.gen_range(0..NAMES.len());
            let side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
            let qty = rng.gen_range(1..=20);
            let price = rng.gen_range(95..=105);
            let stale = m.version > 1 && rng.gen_range(0..5) == 0;
            let pinned = if stale { m.version - 1 } else { m.version };
            let got = m.order(NAMES[who], side, qty, price, pinned);
            let idx = orders.len();
            orders.push((who, side, price));
            match got {
                Some(id) => {
                    if stale && reject_stale {
                        failures.push(format!("batch {seed}: stale order accepted"));
                    }
                    ids.insert(id, idx);
                    r.arrive(RefOrder { idx, who, side, price, left: qty, pinned, stale });
                }
                None if stale && reject_stale => {}
                None => failures.push(format!("batch {seed}: order {idx} rejected")),
            }
        }
        let got: Vec<(usize, usize, u64, u64)> = m
            .tm
            .state()
            .settled_trades()
            .iter()
            .map(|t| (ids[&t.buy_order], ids[&t.sell_order], t.qty, t.price))
            .collect();
        if got != r.fills {
            failures.push(format!("batch {seed}: fills {got:?} != {:?}", r.fills));
        }
        for (who, name) in NAMES.iter().enumerate() {
            let (want, have) = (r.balances(who, &orders), m.balances(name));
            if want != have {
                failures.push(format!("batch {seed}: {name} balances {have:?} != {want:?}"));
            }
        }
        total += got.len();
    }
    (batches, total, failures)
}
