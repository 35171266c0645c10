//! Shared unit-test setup: an identity registry with a few parties and
//! an in-process transport.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{KeyPair, PartySigner};
use crate::identity::{IdentityHandle, IdentityManager, Role};
use crate::ids::{ManagerId, PartyId};
use crate::ledger::MemDisk;
use crate::txn::{participant_handle, TransportError, Transport, TxnHost, TxnMessage};

pub(crate) struct Parties {
    pub ids: IdentityManager,
    pub signers: BTreeMap<&'static str, PartySigner>,
}

impl Parties {
    pub fn new() -> Self {
        let ids = IdentityManager::bootstrap(MemDisk::new().storage(), "Operator", KeyPair::derive(0, "op")).unwrap();
        let mut p = Parties { ids, signers: BTreeMap::new() };
        p.signers.insert("op", PartySigner::new(PartyId::from(IdentityManager::OPERATOR_ID), KeyPair::derive(0, "op")));
        for (name, role) in [
            ("sec", Role::MarketOperator),
            ("cash", Role::MarketOperator),
            ("cm", Role::MarketOperator),
            ("tm", Role::MarketOperator),
            ("coord", Role::MarketOperator),
            ("alice", Role::Investor),
            ("bob", Role::Investor),
            ("carol", Role::Investor),
            ("issuer", Role::Issuer),
            ("bank", Role::Issuer),
            ("verifier", Role::VerificationAgent),
            ("calc", Role::CalculationAgent),
            ("supervisor", Role::Supervisor),
        ] {
            p.add(name, role);
        }
        p
    }

    pub fn add(&mut self, name: &'static str, role: Role) {
        let key = KeyPair::derive(9, name);
        let id = self.ids.register_party(name, &[role], key.public().as_bytes()).unwrap();
        self.signers.insert(name, PartySigner::new(id, key));
    }

    pub fn dir(&self) -> IdentityHandle {
        self.ids.handle()
    }

    pub fn s(&self, name: &str) -> PartySigner {
        self.signers[name].clone()
    }

    pub fn id(&self, name: &str) -> PartyId {
        self.signers[name].party.clone()
    }
}

/// Synchronous in-process delivery to a fixed set of hosts.
pub(crate) struct Bus<'a> {
    pub hosts: BTreeMap<ManagerId, &'a mut dyn TxnHost>,
    pub down: BTreeSet<ManagerId>,
}

impl<'a> Bus<'a> {
    pub fn new(hosts: Vec<&'a mut dyn TxnHost>) -> Self {
        Bus { hosts: hosts.into_iter().map(|h| (h.host_id().clone(), h)).collect(), down: BTreeSet::new() }
    }
}

impl Transport for Bus<'_> {
    fn call(&mut self, _from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Result<TxnMessage, TransportError> {
        if self.down.contains(to) {
            return Err(TransportError::Timeout);
        }
        let host = self.hosts.get_mut(to).ok_or_else(|| TransportError::Unreachable(to.clone()))?;
        participant_handle(&mut **host, &msg).ok_or(TransportError::Timeout)
    }
}
