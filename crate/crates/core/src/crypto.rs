//! SHA-256 digests and Ed25519 signing keys.

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use crate::ids::PartyId;

pub type Digest = [u8; 32];

pub const ZERO_DIGEST: Digest = [0u8; 32];

pub fn sha256(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

/// A 32-byte Ed25519 verifying key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    /// Rejects byte strings that are not a valid curve point.
    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        let arr: [u8; 32] = b.try_into().ok()?;
        VerifyingKey::from_bytes(&arr).ok()?;
        Some(PublicKey(arr))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey::from_bytes(&self.0).expect("validated at construction")
    }

    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        let Ok(arr) = <[u8; 64]>::try_from(sig) else { return false };
        let sig = ed25519_dalek::Signature::from_bytes(&arr);
        self.verifying_key().verify_strict(msg, &sig).is_ok()
    }
}

/// Verifies many (message, signature, key) triples at once. Returns false if
/// any signature is malformed or invalid; callers fall back to individual
/// checks to locate the culprit.
pub fn verify_batch(items: &[(&[u8], &[u8], PublicKey)]) -> bool {
    let mut msgs = Vec::with_capacity(items.len());
    let mut sigs = Vec::with_capacity(items.len());
    let mut keys = Vec::with_capacity(items.len());
    for (m, s, k) in items {
        let Ok(arr) = <[u8; 64]>::try_from(*s) else { return false };
        msgs.push(*m);
        sigs.push(ed25519_dalek::Signature::from_bytes(&arr));
        keys.push(k.verifying_key());
    }
    ed25519_dalek::verify_batch(&msgs, &sigs, &keys).is_ok()
}

#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("public", &hex::encode(self.public().0)).finish()
    }
}

impl KeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair { signing: SigningKey::from_bytes(&seed) }
    }

    /// Deterministic key derived from a run seed and a label.
    pub fn derive(seed: u64, label: &str) -> Self {
        let mut material = seed.to_be_bytes().to_vec();
        material.extend_from_slice(label.as_bytes());
        let mut rng = ChaCha20Rng::from_seed(sha256(&material));
        KeyPair { signing: SigningKey::generate(&mut rng) }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signing.sign(msg).to_bytes().to_vec()
    }
}

/// Something that can sign on behalf of a party.
pub trait Signer {
    fn party(&self) -> &PartyId;
    fn sign(&self, msg: &[u8]) -> Vec<u8>;
}

#[derive(Debug, Clone)]
pub struct PartySigner {
    pub party: PartyId,
    pub key: KeyPair,
}

impl PartySigner {
    pub fn new(party: PartyId, key: KeyPair) -> Self {
        PartySigner { party, key }
    }
}

impl Signer for PartySigner {
    fn party(&self) -> &PartyId {
        &self.party
    }
    fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.key.sign(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_keys_are_deterministic_and_distinct() {
        assert_eq!(KeyPair::derive(1, "a").public(), KeyPair::derive(1, "a").public());
        assert_ne!(KeyPair::derive(1, "a").public(), KeyPair::derive(1, "b").public());
        assert_ne!(KeyPair::derive(1, "a").public(), KeyPair::derive(2, "a").public());
    }

    #[test]
    fn flipped_signature_bit_fails() {
        let k = KeyPair::derive(7, "x");
        let mut sig = k.sign(b"hello");
        assert!(k.public().verify(b"hello", &sig));
        sig[10] ^= 0x04;
        assert!(!k.public().verify(b"hello", &sig));
        assert!(!k.public().verify(b"hello", &sig[..63]));
    }

    #[test]
    fn batch_matches_individual() {
        let ks: Vec<_> = (0..4).map(|i| KeyPair::derive(i, "b")).collect();
        let msgs: Vec<Vec<u8>> = (0..4u8).map(|i| vec![i; 10]).collect();
        let sigs: Vec<_> = ks.iter().zip(&msgs).map(|(k, m)| k.sign(m)).collect();
        let mut items: Vec<_> =
            (0..4).map(|i| (msgs[i].as_slice(), sigs[i].as_slice(), ks[i].public())).collect();
        assert!(verify_batch(&items));
        items[2].2 = ks[3].public();
        assert!(!verify_batch(&items));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            hex::encode(sha256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
