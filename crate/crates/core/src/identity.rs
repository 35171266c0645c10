//! Identity manager: binds legal persons to keys and roles and decides who
//! may author which ledger events.
//!
//! The role table is static:
//!
//! | role               | actions                                                    |
//! |--------------------|------------------------------------------------------------|
//! | Investor           | Transfer, Reserve, SubmitOrder, RotateKey                  |
//! | Issuer             | IssueInstrument, Transfer, Reserve, IssuerNotice, SubmitOrder, RotateKey |
//! | VerificationAgent  | SubmitObservation, RotateKey                               |
//! | CalculationAgent   | SubmitObservation, RotateKey                               |
//! | MarketOperator     | ManageIdentity, OperateManager, Transfer, Reserve, RotateKey |
//! | Supervisor         | SupervisorQuery, RotateKey                                 |
//!
//! KYC is a flag set to `Verified` on registration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Decoder, Encoder};
use crate::crypto::{PartySigner, PublicKey, Signer};
use crate::ids::PartyId;
use crate::ledger::{
    verify_chain_with, ChainKeys, Draft, EventEnvelope, KeyDirectory, Ledger, LedgerError, Reducer,
    Storage, VerifyOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Investor,
    Issuer,
    VerificationAgent,
    CalculationAgent,
    MarketOperator,
    Supervisor,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::Investor,
        Role::Issuer,
        Role::VerificationAgent,
        Role::CalculationAgent,
        Role::MarketOperator,
        Role::Supervisor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Investor => "Investor",
            Role::Issuer => "Issuer",
            Role::VerificationAgent => "VerificationAgent",
            Role::CalculationAgent => "CalculationAgent",
            Role::MarketOperator => "MarketOperator",
            Role::Supervisor => "Supervisor",
        }
    }
}

impl FromStr for Role {
    type Err = CodecError;
    fn from_str(s: &str) -> Result<Self, CodecError> {
        Role::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| CodecError::BadTag(s.to_owned()))
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    ManageIdentity,
    RotateKey,
    IssueInstrument,
    Transfer,
    Reserve,
    SubmitObservation,
    IssuerNotice,
    SubmitOrder,
    OperateManager,
    SupervisorQuery,
}

pub fn role_actions(role: Role) -> &'static [Action] {
    use Action::*;
    match role {
        Role::Investor => &[Transfer, Reserve, SubmitOrder, RotateKey],
        Role::Issuer => &[IssueInstrument, Transfer, Reserve, IssuerNotice, SubmitOrder, RotateKey],
        Role::VerificationAgent | Role::CalculationAgent => &[SubmitObservation, RotateKey],
        Role::MarketOperator => &[ManageIdentity, OperateManager, Transfer, Reserve, RotateKey],
        Role::Supervisor => &[SupervisorQuery, RotateKey],
    }
}

/// The action a ledger payload kind requires of its author.
pub fn action_for_kind(kind: &str) -> Option<Action> {
    use Action::*;
    Some(match kind {
        "identity.register" | "identity.revoke" => ManageIdentity,
        "identity.rotate" => RotateKey,
        "resource.issue" | "contract.issue" => IssueInstrument,
        "resource.transfer" | "contract.payment" => Transfer,
        "resource.reserve" | "resource.settle" => Reserve,
        "contract.observation" | "contract.mark" => SubmitObservation,
        "contract.notice" => IssuerNotice,
        "order.submit" | "order.cancel_request" => SubmitOrder,
        "monitor.query" => SupervisorQuery,
        k if k.starts_with("txn.")
            || k.starts_with("resource.")
            || k.starts_with("contract.")
            || k.starts_with("order.")
            || k.starts_with("trade.")
            || k.starts_with("match.")
            || k.starts_with("instrument.") =>
        {
            OperateManager
        }
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KycStatus {
    Pending,
    Verified,
    Revoked,
}

impl KycStatus {
    fn tag(self) -> &'static str {
        match self {
            KycStatus::Pending => "pending",
            KycStatus::Verified => "verified",
            KycStatus::Revoked => "revoked",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub public_key: PublicKey,
    /// First identity epoch at which the key validates.
    pub registered_at: u64,
    /// First identity epoch at which it no longer does.
    pub revoked_at: Option<u64>,
}

impl KeyRecord {
    pub fn valid_at(&self, epoch: u64) -> bool {
        self.registered_at <= epoch && self.revoked_at.map_or(true, |r| epoch < r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Party {
    pub party_id: PartyId,
    pub legal_name: String,
    pub roles: BTreeSet<Role>,
    pub keys: Vec<KeyRecord>,
    pub kyc_status: KycStatus,
}

impl Party {
    pub fn active_key(&self) -> Option<&KeyRecord> {
        self.keys.iter().rev().find(|k| k.revoked_at.is_none())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum IdentityEvent {
    Register { party_id: PartyId, legal_name: String, roles: Vec<Role>, key: [u8; 32] },
    Rotate { party_id: PartyId, new_key: [u8; 32] },
    Revoke { party_id: PartyId },
}

impl IdentityEvent {
    fn kind(&self) -> &'static str {
        match self {
            IdentityEvent::Register { .. } => "identity.register",
            IdentityEvent::Rotate { .. } => "identity.rotate",
            IdentityEvent::Revoke { .. } => "identity.revoke",
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            IdentityEvent::Register { party_id, legal_name, roles, key } => {
                let roles: Vec<String> = roles.iter().map(|r| r.as_str().to_owned()).collect();
                e.str(party_id.as_str()).str(legal_name).list(&roles).bytes(key);
            }
            IdentityEvent::Rotate { party_id, new_key } => {
                e.str(party_id.as_str()).bytes(new_key);
            }
            IdentityEvent::Revoke { party_id } => {
                e.str(party_id.as_str());
            }
        }
        e.finish()
    }

    fn decode(kind: &str, payload: &[u8]) -> Result<Self, CodecError> {
        let mut d = Decoder::new(payload);
        let ev = match kind {
            "identity.register" => IdentityEvent::Register {
                party_id: PartyId(d.str()?),
                legal_name: d.str()?,
                roles: d.list::<String>()?.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
                key: d.fixed()?,
            },
            "identity.rotate" => IdentityEvent::Rotate { party_id: PartyId(d.str()?), new_key: d.fixed()? },
            "identity.revoke" => IdentityEvent::Revoke { party_id: PartyId(d.str()?) },
            other => return Err(CodecError::BadTag(other.to_owned())),
        };
        d.finish()?;
        Ok(ev)
    }
}

/// Registered parties; a pure fold of the identity ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentityState {
    parties: BTreeMap<PartyId, Party>,
    epoch: u64,
}

impl IdentityState {
    pub fn party(&self, id: &PartyId) -> Option<&Party> {
        self.parties.get(id)
    }

    pub fn parties(&self) -> impl Iterator<Item = &Party> {
        self.parties.values()
    }

    pub fn authorize(&self, party: &PartyId, action: Action) -> bool {
        self.parties.get(party).is_some_and(|p| {
            p.kyc_status == KycStatus::Verified
                && p.active_key().is_some()
                && p.roles.iter().any(|r| role_actions(*r).contains(&action))
        })
    }

    pub fn has_role(&self, party: &PartyId, role: Role) -> bool {
        self.parties.get(party).is_some_and(|p| p.roles.contains(&role) && p.kyc_status == KycStatus::Verified)
    }

    pub fn apply(&mut self, env: &EventEnvelope) -> Result<(), CodecError> {
        let ev = IdentityEvent::decode(&env.payload_kind, &env.payload)?;
        // The genesis self-registration is valid from epoch 0 so that it can
        // sign itself; every later key is valid from the next epoch.
        let valid_from = if env.seq == 0 { 0 } else { env.seq + 1 };
        let bad = |m: &str| CodecError::Invalid(m.to_owned());
        match ev {
            IdentityEvent::Register { party_id, legal_name, roles, key } => {
                let public_key = PublicKey::from_bytes(&key).ok_or_else(|| bad("malformed key"))?;
                self.parties.insert(
                    party_id.clone(),
                    Party {
                        party_id,
                        legal_name,
                        roles: roles.into_iter().collect(),
                        keys: vec![KeyRecord { public_key, registered_at: valid_from, revoked_at: None }],
                        kyc_status: KycStatus::Verified,
                    },
                );
            }
            IdentityEvent::Rotate { party_id, new_key } => {
                let public_key = PublicKey::from_bytes(&new_key).ok_or_else(|| bad("malformed key"))?;
                let p = self.parties.get_mut(&party_id).ok_or_else(|| bad("unknown party"))?;
                for k in p.keys.iter_mut().filter(|k| k.revoked_at.is_none()) {
                    k.revoked_at = Some(env.seq + 1);
                }
                p.keys.push(KeyRecord { public_key, registered_at: env.seq + 1, revoked_at: None });
            }
            IdentityEvent::Revoke { party_id } => {
                let p = self.parties.get_mut(&party_id).ok_or_else(|| bad("unknown party"))?;
                p.kyc_status = KycStatus::Revoked;
                for k in p.keys.iter_mut().filter(|k| k.revoked_at.is_none()) {
                    k.revoked_at = Some(env.seq + 1);
                }
            }
        }
        self.epoch = env.seq + 1;
        Ok(())
    }

    /// Canonical byte encoding of the full state.
    pub fn encode_state(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.epoch).u64(self.parties.len() as u64);
        for p in self.parties.values() {
            e.str(p.party_id.as_str()).str(&p.legal_name).str(p.kyc_status.tag());
            let roles: Vec<String> = p.roles.iter().map(|r| r.as_str().to_owned()).collect();
            e.list(&roles).u64(p.keys.len() as u64);
            for k in &p.keys {
                e.bytes(k.public_key.as_bytes()).u64(k.registered_at).option(k.revoked_at.as_ref());
            }
        }
        e.finish()
    }
}

impl KeyDirectory for IdentityState {
    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn key_at(&self, party: &PartyId, epoch: u64) -> Option<PublicKey> {
        let p = self.parties.get(party)?;
        p.keys.iter().find(|k| k.valid_at(epoch)).map(|k| k.public_key)
    }

    fn may_author(&self, party: &PartyId, kind: &str) -> bool {
        action_for_kind(kind).is_some_and(|a| self.authorize(party, a))
    }
}

pub struct IdentityReducer;

impl Reducer for IdentityReducer {
    type State = IdentityState;
    fn init(&self) -> IdentityState {
        IdentityState::default()
    }
    fn step(&self, s: &mut IdentityState, env: &EventEnvelope) -> Result<(), CodecError> {
        s.apply(env)
    }
}

/// Shared, concurrently readable view of the identity state.
#[derive(Debug, Clone, Default)]
pub struct IdentityHandle(Arc<RwLock<IdentityState>>);

impl IdentityHandle {
    pub fn from_state(s: IdentityState) -> Self {
        IdentityHandle(Arc::new(RwLock::new(s)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, IdentityState> {
        self.0.read().unwrap_or_else(|p| p.into_inner())
    }

    fn replace(&self, s: IdentityState) {
        *self.0.write().unwrap_or_else(|p| p.into_inner()) = s;
    }

    pub fn authorize(&self, party: &PartyId, action: Action) -> bool {
        self.read().authorize(party, action)
    }
}

impl KeyDirectory for IdentityHandle {
    fn epoch(&self) -> u64 {
        self.read().epoch
    }
    fn key_at(&self, party: &PartyId, epoch: u64) -> Option<PublicKey> {
        self.read().key_at(party, epoch)
    }
    fn may_author(&self, party: &PartyId, kind: &str) -> bool {
        self.read().may_author(party, kind)
    }
}

/// Key source for verifying the identity ledger itself: the state advances
/// with each accepted entry.
#[derive(Default)]
pub struct IdentityChainKeys {
    pub state: IdentityState,
}

impl ChainKeys for IdentityChainKeys {
    fn key_for(&mut self, env: &EventEnvelope) -> Option<PublicKey> {
        if env.seq == 0 {
            // Genesis is self-signed by the operator it registers.
            return match IdentityEvent::decode(&env.payload_kind, &env.payload) {
                Ok(IdentityEvent::Register { party_id, key, .. }) if party_id == env.author => {
                    PublicKey::from_bytes(&key)
                }
                _ => None,
            };
        }
        self.state.key_at(&env.author, env.key_epoch)
    }
    fn max_epoch(&self) -> u64 {
        self.state.epoch
    }
    fn accepted(&mut self, env: &EventEnvelope) {
        // A signed but undecodable entry leaves the state unchanged.
        let _ = self.state.apply(env);
    }
}

pub fn verify_identity_chain<'a>(entries: impl IntoIterator<Item = &'a EventEnvelope>) -> (VerifyOutcome, IdentityState) {
    let mut keys = IdentityChainKeys::default();
    let out = verify_chain_with(entries, &mut keys);
    (out, keys.state)
}

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("role set is empty")]
    EmptyRoles,
    #[error("malformed public key")]
    MalformedKey,
    #[error("unknown party {0}")]
    UnknownParty(PartyId),
    #[error("old key of {0} is no longer active")]
    InactiveOldKey(PartyId),
    #[error("signature does not verify")]
    BadSignature,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

struct GenesisDir<'a>(&'a PartyId, PublicKey);

impl KeyDirectory for GenesisDir<'_> {
    fn epoch(&self) -> u64 {
        0
    }
    fn key_at(&self, party: &PartyId, _: u64) -> Option<PublicKey> {
        (party == self.0).then_some(self.1)
    }
    fn may_author(&self, party: &PartyId, kind: &str) -> bool {
        party == self.0 && kind == "identity.register"
    }
}

pub struct IdentityManager {
    ledger: Ledger,
    state: IdentityHandle,
    operator: PartySigner,
}

impl IdentityManager {
    pub const OPERATOR_ID: &'static str = "P00000";

    /// Creates the identity ledger with its self-registered operator.
    pub fn bootstrap(storage: Box<dyn Storage>, operator_name: &str, key: crate::crypto::KeyPair) -> Result<Self, IdentityError> {
        let op = PartyId::from(Self::OPERATOR_ID);
        let mut ledger = Ledger::with_storage("identity", storage);
        let ev = IdentityEvent::Register {
            party_id: op.clone(),
            legal_name: operator_name.to_owned(),
            roles: vec![Role::MarketOperator],
            key: *key.public().as_bytes(),
        };
        let signer = PartySigner::new(op.clone(), key);
        let genesis = GenesisDir(&op, signer.key.public());
        let env = ledger.append_signed(ev.kind(), ev.encode(), &signer, &genesis)?;
        let mut state = IdentityState::default();
        state.apply(&env).map_err(LedgerError::from)?;
        Ok(IdentityManager { ledger, state: IdentityHandle::from_state(state), operator: signer })
    }

    /// Rebuilds from persisted storage.
    pub fn recover(storage: Box<dyn Storage>, operator_key: crate::crypto::KeyPair) -> Result<Self, IdentityError> {
        let (ledger, _) = Ledger::open("identity", storage)?;
        let entries = ledger.entries();
        let state = crate::ledger::replay(entries.iter().map(|e| e.as_ref()), &IdentityReducer)?;
        Ok(IdentityManager {
            ledger,
            state: IdentityHandle::from_state(state),
            operator: PartySigner::new(PartyId::from(Self::OPERATOR_ID), operator_key),
        })
    }

    pub fn handle(&self) -> IdentityHandle {
        self.state.clone()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn operator(&self) -> &PartyId {
        &self.operator.party
    }

    pub fn authorize(&self, party: &PartyId, action: Action) -> bool {
        self.state.authorize(party, action)
    }

    fn commit(&mut self, draft: Draft) -> Result<Arc<EventEnvelope>, IdentityError> {
        let mut next = self.state.read().clone();
        let env = self.ledger.append(draft, &*self.state.read())?;
        next.apply(&env).map_err(LedgerError::from)?;
        self.state.replace(next);
        Ok(env)
    }

    pub fn register_party(&mut self, legal_name: &str, roles: &[Role], initial_key: &[u8]) -> Result<PartyId, IdentityError> {
        if roles.is_empty() {
            return Err(IdentityError::EmptyRoles);
        }
        let key = PublicKey::from_bytes(initial_key).ok_or(IdentityError::MalformedKey)?;
        let party_id = PartyId(format!("P{:05}", self.state.read().parties.len()));
        let mut roles = roles.to_vec();
        roles.sort();
        roles.dedup();
        let ev = IdentityEvent::Register { party_id: party_id.clone(), legal_name: legal_name.to_owned(), roles, key: *key.as_bytes() };
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), &self.operator, self.state.epoch());
        self.commit(draft)?;
        Ok(party_id)
    }

    /// Rotation message signed by the party's current key.
    pub fn rotate_key(&mut self, party: &PartyId, new_key: &[u8], old: &dyn Signer) -> Result<KeyRecord, IdentityError> {
        let new = PublicKey::from_bytes(new_key).ok_or(IdentityError::MalformedKey)?;
        let ev = IdentityEvent::Rotate { party_id: party.clone(), new_key: *new.as_bytes() };
        let epoch = self.state.epoch();
        let (seq, prev) = self.ledger.next_slot();
        let sig = old.sign(&crate::ledger::signing_bytes(seq, &prev, ev.kind(), &ev.encode(), party, epoch));
        self.rotate_key_signed(party, new_key, epoch, sig)
    }

    pub fn rotate_key_signed(&mut self, party: &PartyId, new_key: &[u8], key_epoch: u64, signature: Vec<u8>) -> Result<KeyRecord, IdentityError> {
        let new = PublicKey::from_bytes(new_key).ok_or(IdentityError::MalformedKey)?;
        let known = self.state.read().party(party).cloned().ok_or_else(|| IdentityError::UnknownParty(party.clone()))?;
        let ev = IdentityEvent::Rotate { party_id: party.clone(), new_key: *new.as_bytes() };
        let payload = ev.encode();
        let draft = Draft { kind: ev.kind().into(), payload: payload.clone(), author: party.clone(), key_epoch, signature: signature.clone() };
        match self.commit(draft) {
            Ok(_) => {}
            Err(IdentityError::Ledger(LedgerError::BadSignature | LedgerError::Unauthorized { .. })) => {
                let (seq, prev) = self.ledger.next_slot();
                let msg = crate::ledger::signing_bytes(seq, &prev, ev.kind(), &payload, party, key_epoch);
                let by_revoked = known.keys.iter().any(|k| k.revoked_at.is_some() && k.public_key.verify(&msg, &signature));
                return Err(if by_revoked { IdentityError::InactiveOldKey(party.clone()) } else { IdentityError::BadSignature });
            }
            Err(e) => return Err(e),
        }
        let st = self.state.read();
        Ok(st.party(party).and_then(|p| p.keys.last().cloned()).expect("rotation applied"))
    }

    pub fn revoke_party(&mut self, party: &PartyId) -> Result<(), IdentityError> {
        if self.state.read().party(party).is_none() {
            return Err(IdentityError::UnknownParty(party.clone()));
        }
        let ev = IdentityEvent::Revoke { party_id: party.clone() };
        let draft = self.ledger.sign_draft(ev.kind(), ev.encode(), &self.operator, self.state.epoch());
        self.commit(draft)?;
        Ok(())
    }

    pub fn state_encoding(&self) -> Vec<u8> {
        self.state.read().encode_state()
    }
}
