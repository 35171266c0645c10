//! Scripted abusive trading and brute-force expectations.

use bondledger::trading::Trade;
use bondledger::PartyId;

const SETUP: &str = r#"
[[step]]
action = "issue_bond"
bond = "GB"
manager = "cm"
issuer = "issuer"
principal = 1000000
currency = "EUR"
coupons = 1
co2_threshold = 1
verifier = "verifier"
calculator = "calc"
first_coupon = 1000000

[[step]]
action = "transfer"
from = "issuer"
to = "alice"
asset = "GB"
amount = 1000

[[step]]
action = "transfer"
from = "issuer"
to = "bob"
asset = "GB"
amount = 1000
"#;

fn order(party: &str, side: &str, qty: u64, price: u64) -> String {
    format!("\n[[step]]\naction = \"order\"\nparty = \"{party}\"\nbond = \"GB\"\nside = \"{side}\"\nqty = {qty}\nprice = {price}\n")
}

/// `self`: alice crosses her own ask. `wash`: alice buys from bob and
/// sells to carol twice at the same price and size.
pub fn script(kind: &str) -> String {
    let mut s = format!("name = \"{kind}-trade\"\n{SETUP}");
    match kind {
        "self" => {
            s += &order("bob", "sell", 5, 100);
            s += &order("carol", "buy", 5, 100);
            s += &order("alice", "sell", 10, 101);
            s += &order("alice", "buy", 10, 101);
        }
        _ => {
            for _ in 0..2 {
                s += &order("bob", "sell", 10, 100);
                s += &order("alice", "buy", 10, 100);
                s += &order("carol", "buy", 10, 100);
                s += &order("alice", "sell", 10, 100);
            }
        }
    }
    s += "\n[[step]]\naction = \"assert_conservation\"\n";
    s
}

fn order_seq(id: &str) -> u64 {
    id.rsplit_once("-O").and_then(|(_, n)| n.parse().ok()).expect("order id")
}

/// Evidence of the single self trade, from every settled trade.
pub fn self_trade_oracle(trades: &[(u64, Trade)], window: u64) -> Vec<u64> {
    let mut hits: Vec<Vec<u64>> = Vec::new();
    for (seq, t) in trades {
        let (b, s) = (order_seq(&t.buy_order), order_seq(&t.sell_order));
        if t.buyer == t.seller && b.abs_diff(s) <= window {
            let mut v = vec![b, s, *seq];
            v.sort_unstable();
            hits.push(v);
        }
    }
    assert_eq!(hits.len(), 1, "script produces exactly one self trade");
    hits.remove(0)
}

/// Every settlement `party` took part in, when its legs alternate buy and
/// sell with equal quantity and price.
pub fn wash_oracle(trades: &[(u64, Trade)], party: &PartyId) -> Vec<u64> {
    let legs: Vec<(u64, bool, u64, u64)> = trades
        .iter()
        .filter(|(_, t)| t.buyer != t.seller && (&t.buyer == party || &t.seller == party))
        .map(|(seq, t)| (*seq, &t.buyer == party, t.qty, t.price))
        .collect();
    let alternating = legs.windows(2).all(|w| w[0].1 != w[1].1 && w[0].2 == w[1].2 && w[0].3 == w[1].3);
    assert!(alternating && legs.len() >= 4, "script produces at least two round trips: {legs:?}");
    legs.iter().map(|l| l.0).collect()
}
