//! Declarative deployment description.
//!
//! ```toml
//! name = "green-bond"
//! key_seed = 7
//! coordinators = 1
//!
//! [timeouts]
//! t_prep = 2000
//! t_resolve = 10000
//!
//! [transport]
//! mode = "in_process"            # or "tcp"
//!
//! [[manager]]
//! id = "identity"
//! kind = "identity"
//!
//! [[manager]]
//! id = "cash"
//! kind = "resource"
//!
//! [[manager]]
//! id = "sec"
//! kind = "resource"
//!
//! [[manager]]
//! id = "cm"
//! kind = "contract"
//! security_manager = "sec"       # holds the units of every bond issued here
//!
//! [[manager]]
//! id = "tm"
//! kind = "trade"
//! contracts = ["cm"]             # instruments listed for trading
//!
//! [[currency]]
//! id = "EUR"
//! decimals = 2
//! issuer = "bank"
//! manager = "cash"
//!
//! [[party]]
//! name = "alice"
//! roles = ["Investor"]
//! balances = { EUR = 100000 }
//! credit = { EUR = 0 }
//! ```
//!
//! Every manager and coordinator also gets an operator party named after
//! its id. Keys are derived from `key_seed` and the party name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::contract::ContractConfig;
use crate::identity::Role;
use crate::ids::ManagerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagerKind {
    Identity,
    Resource,
    Contract,
    Trade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerSpec {
    pub id: String,
    pub kind: ManagerKind,
    /// Contract managers: the resource manager holding bond units.
    #[serde(default)]
    pub security_manager: Option<String>,
    /// Trade managers: contract managers whose instruments are listed.
    #[serde(default)]
    pub contracts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurrencySpec {
    pub id: String,
    #[serde(default = "default_decimals")]
    pub decimals: u32,
    pub issuer: String,
    pub manager: String,
}

fn default_decimals() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartySpec {
    pub name: String,
    pub roles: Vec<Role>,
    #[serde(default)]
    pub balances: BTreeMap<String, u64>,
    #[serde(default)]
    pub credit: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timeouts {
    /// Logical ticks a caller waits for a vote before giving up.
    pub t_prep: u64,
    /// Ticks an in-doubt participant waits before asking its peers.
    pub t_resolve: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts { t_prep: 2_000, t_resolve: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    InProcess,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    #[serde(default)]
    pub mode: TransportMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub key_seed: u64,
    #[serde(default = "one")]
    pub coordinators: usize,
    #[serde(default)]
    pub timeouts: Timeouts,
    #[serde(default)]
    pub transport: TransportSpec,
    #[serde(rename = "manager", default)]
    pub managers: Vec<ManagerSpec>,
    #[serde(rename = "currency", default)]
    pub currencies: Vec<CurrencySpec>,
    #[serde(rename = "party", default)]
    pub parties: Vec<PartySpec>,
}

fn one() -> usize {
    1
}

impl Topology {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let t: Topology = toml::from_str(text).map_err(|e| HarnessError::Config(format!("topology: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&super::read_source(path, "topology")?)
    }

    pub fn manager(&self, id: &str) -> Option<&ManagerSpec> {
        self.managers.iter().find(|m| m.id == id)
    }

    pub fn managers_of(&self, kind: ManagerKind) -> impl Iterator<Item = &ManagerSpec> {
        self.managers.iter().filter(move |m| m.kind == kind)
    }

    pub fn coordinator_ids(&self) -> Vec<ManagerId> {
        (0..self.coordinators).map(|i| ManagerId(format!("coord-{i}"))).collect()
    }

    pub fn currency(&self, id: &str) -> Option<&CurrencySpec> {
        self.currencies.iter().find(|c| c.id == id)
    }

    /// Trade manager listing the instruments of contract manager `cm`.
    pub fn trade_manager_for(&self, cm: &str) -> Option<&ManagerSpec> {
        self.managers_of(ManagerKind::Trade).find(|t| t.contracts.iter().any(|c| c == cm))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let mut ids = BTreeSet::new();
        for m in &self.managers {
            if m.id.is_empty() || !ids.insert(m.id.as_str()) {
                return bad(format!("manager id `{}` is empty or repeated", m.id));
            }
        }
        let coords = self.coordinator_ids();
        for c in &coords {
            if !ids.insert(c.as_str()) {
                return bad(format!("manager id `{c}` is reserved for a coordinator"));
            }
        }
        if self.coordinators == 0 {
            return bad("at least one coordinator is required".into());
        }
        if self.managers_of(ManagerKind::Identity).count() != 1 {
            return bad("exactly one identity manager is required".into());
        }
        let kind_of = |id: &str| self.manager(id).map(|m| m.kind);
        let mut prefixes = BTreeMap::new();
        let mut listed = BTreeSet::new();
        for m in &self.managers {
            match m.kind {
                ManagerKind::Contract => {
                    let Some(sec) = &m.security_manager else {
                        return bad(format!("contract manager `{}` needs a security_manager", m.id));
                    };
                    if kind_of(sec) != Some(ManagerKind::Resource) {
                        return bad(format!("security_manager `{sec}` of `{}` is not a resource manager", m.id));
                    }
                    // ISINs are sharded by prefix; two managers must never mint the same one.
                    let prefix = ContractConfig::for_manager(&ManagerId(m.id.clone())).isin_prefix;
                    if let Some(other) = prefixes.insert(prefix.clone(), m.id.clone()) {
                        return bad(format!("contract managers `{other}` and `{}` share ISIN prefix {prefix}", m.id));
                    }
                }
                ManagerKind::Trade => {
                    for c in &m.contracts {
                        if kind_of(c) != Some(ManagerKind::Contract) {
                            return bad(format!("`{c}` listed by `{}` is not a contract manager", m.id));
                        }
                        if !listed.insert(c.as_str()) {
                            return bad(format!("contract manager `{c}` is listed by two trade managers"));
                        }
                    }
                }
                ManagerKind::Identity | ManagerKind::Resource => {
                    if m.security_manager.is_some() || !m.contracts.is_empty() {
                        return bad(format!("manager `{}` takes no security_manager or contracts", m.id));
                    }
                }
            }
        }
        let mut party_names = BTreeSet::new();
        for p in &self.parties {
            if p.roles.is_empty() {
                return bad(format!("party `{}` has no roles", p.name));
            }
            if !party_names.insert(p.name.as_str()) || ids.contains(p.name.as_str()) || p.name == "operator" {
                return bad(format!("party name `{}` is repeated or reserved", p.name));
            }
        }
        let mut currencies = BTreeSet::new();
        for c in &self.currencies {
            if !currencies.insert(c.id.as_str()) {
                return bad(format!("currency `{}` is defined twice", c.id));
            }
            if kind_of(&c.manager) != Some(ManagerKind::Resource) {
                return bad(format!("currency `{}` must live on a resource manager", c.id));
            }
            match self.parties.iter().find(|p| p.name == c.issuer) {
                Some(p) if p.roles.contains(&Role::Issuer) => {}
                _ => return bad(format!("issuer `{}` of `{}` must be a party with the Issuer role", c.issuer, c.id)),
            }
        }
        for p in &self.parties {
            for r in p.balances.keys().chain(p.credit.keys()) {
                if !currencies.contains(r.as_str()) {
                    return bad(format!("party `{}` refers to unknown currency `{r}`", p.name));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [[manager]]
        id = "identity"
        kind = "identity"
        [[manager]]
        id = "cash"
        kind = "resource"
        [[currency]]
        id = "EUR"
        issuer = "bank"
        manager = "cash"
        [[party]]
        name = "bank"
        roles = ["Issuer"]
        balances = { EUR = 10 }
    "#;

    #[test]
    fn minimal_topology_parses_with_defaults() {
        let t = Topology::from_toml(MINIMAL).unwrap();
        assert_eq!(t.coordinators, 1);
        assert_eq!(t.timeouts, Timeouts::default());
        assert_eq!(t.currency("EUR").unwrap().decimals, 2);
        assert_eq!(t.coordinator_ids(), vec![ManagerId::from("coord-0")]);
    }

    #[test]
    fn rejects_inconsistent_sharding() {
        let dup = format!("{MINIMAL}\n[[manager]]\nid = \"cash\"\nkind = \"resource\"\n");
        assert!(Topology::from_toml(&dup).is_err());
        let orphan = format!("{MINIMAL}\n[[manager]]\nid = \"cm\"\nkind = \"contract\"\nsecurity_manager = \"nope\"\n");
        assert!(Topology::from_toml(&orphan).is_err());
        let unknown = MINIMAL.replace("balances = { EUR = 10 }", "balances = { USD = 10 }");
        assert!(Topology::from_toml(&unknown).is_err());
        let two_cur = format!("{MINIMAL}\n[[currency]]\nid = \"EUR\"\nissuer = \"bank\"\nmanager = \"cash\"\n");
        assert!(Topology::from_toml(&two_cur).is_err());
        assert!(Topology::from_toml(&MINIMAL.replace("kind = \"identity\"", "kind = \"resource\"")).is_err());
    }
}
