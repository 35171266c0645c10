//! Setup and reference implementations shared by integration tests.
#![allow(dead_code)]

pub mod matching;
pub mod surveillance;
pub mod tamper;

use std::collections::BTreeMap;

use bondledger::identity::{IdentityHandle, IdentityManager, Role};
use bondledger::ledger::MemDisk;
use bondledger::{KeyPair, PartyId, PartySigner};

/// An identity registry with named parties.
pub struct Cast {
    pub ids: IdentityManager,
    pub disk: MemDisk,
    pub s: BTreeMap<&'static str, PartySigner>,
}

impl Cast {
    pub fn new(seed: u64) -> Self {
        let disk = MemDisk::new();
        let ids = IdentityManager::bootstrap(disk.storage(), "operator", KeyPair::derive(seed, "operator")).unwrap();
        let mut c = Cast { ids, disk, s: BTreeMap::new() };
        for (name, role) in [
            ("cash", Role::MarketOperator),
            ("sec", Role::MarketOperator),
            ("cm", Role::MarketOperator),
            ("tm", Role::MarketOperator),
            ("coord", Role::MarketOperator),
            ("bank", Role::Issuer),
            ("issuer", Role::Issuer),
            ("alice", Role::Investor),
            ("bob", Role::Investor),
            ("carol", Role::Investor),
        ] {
            let key = KeyPair::derive(seed, name);
            let id = c.ids.register_party(name, &[role], key.public().as_bytes()).unwrap();
            c.s.insert(name, PartySigner::new(id, key));
        }
        c
    }

    pub fn dir(&self) -> IdentityHandle {
        self.ids.handle()
    }

    pub fn id(&self, name: &str) -> PartyId {
        self.s[name].party.clone()
    }
}
