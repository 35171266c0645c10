mod common;

use bondledger::trading::{Side, TradeConfig};
use common::matching::{Market, RefOrder, Reference};

#[test]
fn random_batches_match_the_reference() {
    let (_, fills, failures) = common::matching::run(16);
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(fills > 0);
}

#[test]
fn reference_fills_at_resting_price_with_partial_fills() {
    let mut r = Reference::default();
    let o = |idx, side, price, left| RefOrder { idx, who: idx % 3, side, price, left, pinned: 1, stale: false };
    r.arrive(o(0, Side::Sell, 95, 4));
    r.arrive(o(1, Side::Sell, 97, 4));
    r.arrive(o(2, Side::Buy, 100, 6));
    assert_eq!(r.fills, vec![(2, 0, 4, 95), (2, 1, 2, 97)]);
    assert_eq!(r.resting.len(), 1);
    r.bump(2);
    assert!(r.resting.is_empty());
}

#[test]
fn improvement_is_refunded_to_the_buyer() {
    let mut m = Market::new(TradeConfig::default());
    m.order("bob", Side::Sell, 10, 95, 1).unwrap();
    m.order("alice", Side::Buy, 10, 100, 1).unwrap();
    let [(cash, held), (units, _)] = m.balances("alice");
    assert_eq!((cash, held), (common::matching::CASH as i64 - 950, 0));
    assert_eq!(units, common::matching::UNITS as i64 + 10);
}
