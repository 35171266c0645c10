//! A permissioned, functionally sharded trading and settlement engine for
//! green bonds.
//!
//! Every state manager (identity, security, currency, contract, trade) owns a
//! tamper-evident ledger and derives its state by folding over it. Managers
//! never share a global order; the stateless transaction coordinator in
//! [`txn`] synchronizes them only when an atomic multi-manager change such as
//! delivery-versus-payment requires it.

pub mod codec;
pub mod contract;
#[cfg(test)]
mod fixture;
pub mod crypto;
pub mod harness;
pub mod identity;
pub mod ids;
pub mod ledger;
pub mod monitor;
pub mod resource;
pub mod trading;
pub mod txn;

pub use crypto::{KeyPair, PartySigner, PublicKey, Signer};
pub use ids::{Isin, ManagerId, PartyId, ResourceId, TxnId};
