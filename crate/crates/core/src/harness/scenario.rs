//! Scripted workloads with expected post-conditions.
//!
//! A scenario is an ordered list of `[[step]]` tables. Parties, bonds and
//! orders are referred to by the names the script gives them; bonds by an
//! alias chosen at issuance and orders by an optional label.
//!
//! ```toml
//! name = "coupon"
//!
//! [[step]]
//! action = "issue_bond"
//! bond = "GB"
//! manager = "cm"
//! issuer = "issuer"
//! principal = 1000000
//! currency = "EUR"
//! coupons = 2
//! co2_threshold = 1
//! verifier = "verifier"
//! calculator = "calc"
//!
//! [[step]]
//! action = "observe"
//! agent = "verifier"
//! bond = "GB"
//! key = "co2_tons_1"
//! value = 5
//!
//! [[step]]
//! action = "assert_version"
//! bond = "GB"
//! expect = 1
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::trading::Side;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSide {
    Buy,
    Sell,
}

impl From<OrderSide> for Side {
    fn from(s: OrderSide) -> Side {
        match s {
            OrderSide::Buy => Side::Buy,
            OrderSide::Sell => Side::Sell,
        }
    }
}

/// Expected result of an action. Without one, a failing action counts as a
/// failed assertion in fault-free runs and is only logged under faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    IssueBond {
        bond: String,
        manager: String,
        issuer: String,
        principal: u64,
        currency: String,
        coupons: u32,
        co2_threshold: i64,
        verifier: String,
        calculator: String,
        /// Verification deadline of the first period; later periods follow
        /// every `period` ticks and maturity one period after the last.
        #[serde(default = "first_coupon")]
        first_coupon: u64,
        #[serde(default = "period")]
        period: u64,
        /// Bond units created for the issuer; defaults to the principal.
        #[serde(default)]
        units: Option<u64>,
        #[serde(default)]
        docs: String,
    },
    Transfer {
        from: String,
        to: String,
        /// A bond alias or a currency id.
        asset: String,
        amount: u64,
        #[serde(default)]
        expect: Option<Outcome>,
    },
    Order {
        party: String,
        bond: String,
        side: OrderSide,
        qty: u64,
        price: u64,
        #[serde(default)]
        label: Option<String>,
        /// Defaults to the listing's current version.
        #[serde(default)]
        pinned_version: Option<u64>,
        #[serde(default)]
        expect: Option<Outcome>,
    },
    Cancel {
        party: String,
        order: String,
        #[serde(default)]
        expect: Option<Outcome>,
    },
    Observe {
        agent: String,
        bond: String,
        key: String,
        value: i64,
        /// Snapshot current bondholders atomically with the observation.
        #[serde(default)]
        record_date: bool,
        #[serde(default)]
        expect: Option<Outcome>,
    },
    /// Pays the next payment due on the bond: a coupon or the redemption.
    PayCoupon {
        bond: String,
        #[serde(default)]
        expect: Option<Outcome>,
    },
    /// Price mark by a calculation agent; does not change the state version.
    Mark {
        agent: String,
        bond: String,
        price: i64,
    },
    AdvanceTime {
        to: u64,
    },
    AssertBalance {
        party: String,
        asset: String,
        expect: i64,
        #[serde(default)]
        reserved: Option<i64>,
    },
    AssertVersion {
        bond: String,
        expect: u64,
    },
    AssertStatus {
        bond: String,
        /// `live`, `matured` or `default`.
        expect: String,
    },
    AssertTrades {
        bond: String,
        #[serde(default)]
        count: Option<usize>,
        #[serde(default)]
        volume: Option<u64>,
    },
    AssertAlerts {
        #[serde(default)]
        rule: Option<String>,
        count: usize,
    },
    AssertConservation,
    AssertLedgersVerify,
}

fn first_coupon() -> u64 {
    10
}

fn period() -> u64 {
    10
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::IssueBond { .. } => "issue_bond",
            Step::Transfer { .. } => "transfer",
            Step::Order { .. } => "order",
            Step::Cancel { .. } => "cancel",
            Step::Observe { .. } => "observe",
            Step::PayCoupon { .. } => "pay_coupon",
            Step::Mark { .. } => "mark",
            Step::AdvanceTime { .. } => "advance_time",
            Step::AssertBalance { .. } => "assert_balance",
            Step::AssertVersion { .. } => "assert_version",
            Step::AssertStatus { .. } => "assert_status",
            Step::AssertTrades { .. } => "assert_trades",
            Step::AssertAlerts { .. } => "assert_alerts",
            Step::AssertConservation => "assert_conservation",
            Step::AssertLedgersVerify => "assert_ledgers_verify",
        }
    }

    pub fn is_assertion(&self) -> bool {
        self.name().starts_with("assert_")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "step", default)]
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&super::read_source(path, "scenario")?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios serialize")
    }
}

/// Parameters of a randomized delivery-versus-payment workload.
#[derive(Debug, Clone)]
pub struct DvpWorkload {
    pub traders: Vec<String>,
    pub bond: String,
    pub orders: usize,
    /// Percent of steps that cancel a live order.
    pub cancel_pct: u32,
    /// Insert one state-changing observation at a random point.
    pub observation: Option<(String, String)>,
}

/// Random limit orders around a reference price of 100 plus cancels,
/// prefixed by the setup steps of `base`.
pub fn random_dvp(base: &Scenario, w: &DvpWorkload, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = base.steps.clone();
    let mut labels: Vec<(String, String)> = Vec::new();
    let observe_at = w.observation.as_ref().map(|_| rng.gen_range(0..w.orders.max(1)));
    for i in 0..w.orders {
        if Some(i) == observe_at {
            let (agent, key) = w.observation.clone().expect("set");
            steps.push(Step::Observe { agent, bond: w.bond.clone(), key, value: 5, record_date: false, expect: None });
        }
        if !labels.is_empty() && rng.gen_range(0..100) < w.cancel_pct {
            let k = rng.gen_range(0..labels.len());
            let (party, order) = labels.swap_remove(k);
            steps.push(Step::Cancel { party, order, expect: None });
            continue;
        }
        let party = w.traders.choose(&mut rng).expect("traders").clone();
        let label = format!("o{i}");
        labels.push((party.clone(), label.clone()));
        steps.push(Step::Order {
            party,
            bond: w.bond.clone(),
            side: if rng.gen_bool(0.5) { OrderSide::Buy } else { OrderSide::Sell },
            qty: rng.gen_range(1..=20),
            price: rng.gen_range(95..=105),
            label: Some(label),
            pinned_version: None,
            expect: None,
        });
    }
    Scenario { name: format!("{}-random-{seed}", base.name), steps }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_parse_by_action_tag() {
        let s = Scenario::from_toml(
            r#"
            [[step]]
            action = "order"
            party = "alice"
            bond = "GB"
            side = "buy"
            qty = 3
            price = 101
            [[step]]
            action = "assert_conservation"
            "#,
        )
        .unwrap();
        assert_eq!(s.steps.len(), 2);
        assert!(matches!(&s.steps[0], Step::Order { side: OrderSide::Buy, qty: 3, .. }));
        assert!(s.steps[1].is_assertion());
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
        assert!(Scenario::from_toml("[[step]]\naction = \"teleport\"\n").is_err());
    }

    #[test]
    fn random_workloads_are_seeded() {
        let w = DvpWorkload {
            traders: vec!["a".into(), "b".into()],
            bond: "GB".into(),
            orders: 30,
            cancel_pct: 20,
            observation: Some(("v".into(), "co2_tons_1".into())),
        };
        let base = Scenario::default();
        assert_eq!(random_dvp(&base, &w, 3), random_dvp(&base, &w, 3));
        assert_ne!(random_dvp(&base, &w, 3), random_dvp(&base, &w, 4));
        assert_eq!(random_dvp(&base, &w, 3).steps.iter().filter(|s| matches!(s, Step::Observe { .. })).count(), 1);
    }
}
