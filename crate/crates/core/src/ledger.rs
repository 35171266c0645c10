//! Tamper-evident, append-only event log shared by every state manager.
//!
//! Each [`EventEnvelope`] is hash-chained to its predecessor and signed by
//! its author over `(seq, prev_hash, payload_kind, payload, author, key_epoch)`.
//! `key_epoch` is the length of the identity ledger the author's key was
//! looked up against, which makes key lookup time-indexed: later rotations
//! never invalidate historical entries.
//!
//! On disk a ledger is a sequence of records, each a 4-byte big-endian
//! length followed by the canonical envelope encoding.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::crypto::{sha256, verify_batch, Digest, PublicKey, Signer, ZERO_DIGEST};
use crate::ids::PartyId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventEnvelope {
    pub seq: u64,
    pub prev_hash: Digest,
    pub payload_kind: String,
    pub payload: Vec<u8>,
    pub author: PartyId,
    pub key_epoch: u64,
    pub signature: Vec<u8>,
    /// Always equal to `seq`.
    pub logical_time: u64,
}

/// The byte string an author signs for a given ledger slot.
pub fn signing_bytes(
    seq: u64,
    prev_hash: &Digest,
    kind: &str,
    payload: &[u8],
    author: &PartyId,
    key_epoch: u64,
) -> Vec<u8> {
    let mut e = Encoder::with_capacity(payload.len() + 128);
    e.u64(seq)
        .bytes(prev_hash)
        .str(kind)
        .bytes(payload)
        .str(author.as_str())
        .u64(key_epoch);
    e.finish()
}

impl EventEnvelope {
    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(
            self.seq,
            &self.prev_hash,
            &self.payload_kind,
            &self.payload,
            &self.author,
            self.key_epoch,
        )
    }

    pub fn digest(&self) -> Digest {
        sha256(&self.to_bytes())
    }
}

impl Canonical for EventEnvelope {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.seq)
            .bytes(&self.prev_hash)
            .str(&self.payload_kind)
            .bytes(&self.payload)
            .str(self.author.as_str())
            .u64(self.key_epoch)
            .bytes(&self.signature)
            .u64(self.logical_time);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(EventEnvelope {
            seq: dec.u64()?,
            prev_hash: dec.fixed()?,
            payload_kind: dec.str()?,
            payload: dec.bytes()?.to_vec(),
            author: PartyId(dec.str()?),
            key_epoch: dec.u64()?,
            signature: dec.bytes()?.to_vec(),
            logical_time: dec.u64()?,
        })
    }
}

/// Read access to registered keys and the role table.
pub trait KeyDirectory {
    /// Current identity epoch (length of the identity ledger).
    fn epoch(&self) -> u64;
    /// The key that was active for `party` at `epoch`, if any.
    fn key_at(&self, party: &PartyId, epoch: u64) -> Option<PublicKey>;
    /// Whether `party` may currently author events of `kind`.
    fn may_author(&self, party: &PartyId, kind: &str) -> bool;
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("{party} is not authorized to append `{kind}`")]
    Unauthorized { party: PartyId, kind: String },
    #[error("key epoch {got} outside [{min}, {max}]")]
    BadKeyEpoch { got: u64, min: u64, max: u64 },
    #[error("encoding: {0}")]
    Encoding(#[from] CodecError),
    #[error("ledger corrupt at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
    #[error("subscription start {from} beyond ledger length {len}")]
    SeqOutOfRange { from: u64, len: u64 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// An event submitted for append, signed for the next slot.
#[derive(Debug, Clone)]
pub struct Draft {
    pub kind: String,
    pub payload: Vec<u8>,
    pub author: PartyId,
    pub key_epoch: u64,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigCheck {
    Verify,
    /// Benchmark-only: accepts drafts without checking signatures.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Durability {
    EveryAppend,
    /// Flush every K appends. Relaxes crash guarantees: up to K-1
    /// acknowledged events can be lost.
    Batched(u32),
}

// ---------------------------------------------------------------------------
// Storage

pub trait Storage: Send {
    fn append(&mut self, record: &[u8]) -> io::Result<()>;
    /// Durability barrier.
    fn sync(&mut self) -> io::Result<()>;
    fn load(&self) -> io::Result<Vec<u8>>;
    fn truncate(&mut self, len: u64) -> io::Result<()>;
}

#[derive(Debug, Default)]
struct MemDiskInner {
    bytes: Vec<u8>,
    durable: usize,
}

/// In-memory disk with crash semantics: a crash drops every byte written
/// after the last durability barrier.
#[derive(Debug, Clone, Default)]
pub struct MemDisk(Arc<Mutex<MemDiskInner>>);

impl MemDisk {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn crash(&self) {
        let mut d = self.lock();
        let keep = d.durable;
        d.bytes.truncate(keep);
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.lock().bytes.clone()
    }

    pub fn storage(&self) -> Box<dyn Storage> {
        Box::new(self.clone())
    }

    fn lock(&self) -> MutexGuard<'_, MemDiskInner> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Storage for MemDisk {
    fn append(&mut self, record: &[u8]) -> io::Result<()> {
        self.lock().bytes.extend_from_slice(record);
        Ok(())
    }
    fn sync(&mut self) -> io::Result<()> {
        let mut d = self.lock();
        d.durable = d.bytes.len();
        Ok(())
    }
    fn load(&self) -> io::Result<Vec<u8>> {
        Ok(self.bytes())
    }
    fn truncate(&mut self, len: u64) -> io::Result<()> {
        let mut d = self.lock();
        d.bytes.truncate(len as usize);
        d.durable = d.durable.min(len as usize);
        Ok(())
    }
}

#[derive(Debug)]
pub struct FileStorage {
    path: PathBuf,
    file: File,
}

impl FileStorage {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        Ok(FileStorage { path, file })
    }
}

impl Storage for FileStorage {
    fn append(&mut self, record: &[u8]) -> io::Result<()> {
        self.file.write_all(record)
    }
    fn sync(&mut self) -> io::Result<()> {
        self.file.flush()?;
        self.file.sync_data()
    }
    fn load(&self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        File::open(&self.path)?.read_to_end(&mut buf)?;
        Ok(buf)
    }
    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)?;
        self.file.sync_data()
    }
}

// ---------------------------------------------------------------------------
// Record framing

pub fn encode_record(env: &EventEnvelope) -> Vec<u8> {
    let body = env.to_bytes();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileTail {
    Clean,
    /// The final record is incomplete (torn write or truncation mid-record).
    Torn { record: u64, valid_len: u64 },
    /// Record `record` is framed but does not decode.
    Malformed { record: u64, valid_len: u64, error: CodecError },
}

#[derive(Debug, Clone)]
pub struct ParsedRecords {
    pub entries: Vec<EventEnvelope>,
    pub tail: FileTail,
}

pub fn parse_records(bytes: &[u8]) -> ParsedRecords {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let record = entries.len() as u64;
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            return ParsedRecords { entries, tail: FileTail::Torn { record, valid_len: pos as u64 } };
        }
        let len = u32::from_be_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        if rest.len() - 4 < len {
            return ParsedRecords { entries, tail: FileTail::Torn { record, valid_len: pos as u64 } };
        }
        match EventEnvelope::from_bytes(&rest[4..4 + len]) {
            Ok(env) => entries.push(env),
            Err(error) => {
                return ParsedRecords {
                    entries,
                    tail: FileTail::Malformed { record, valid_len: pos as u64, error },
                }
            }
        }
        pos += 4 + len;
    }
    ParsedRecords { entries, tail: FileTail::Clean }
}

pub fn write_ledger_file(path: impl AsRef<Path>, entries: &[Arc<EventEnvelope>]) -> io::Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        buf.extend_from_slice(&encode_record(e));
    }
    std::fs::write(path, buf)
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyOutcome {
    Ok,
    Corrupt { seq: u64, reason: String },
}

impl VerifyOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerifyOutcome::Ok)
    }
}

/// Key source for chain verification. The identity ledger verifies itself
/// with a source whose state advances as entries are accepted.
pub trait ChainKeys {
    fn key_for(&mut self, env: &EventEnvelope) -> Option<PublicKey>;
    fn max_epoch(&self) -> u64;
    fn accepted(&mut self, _env: &EventEnvelope) {}
}

struct DirectoryKeys<'a>(&'a dyn KeyDirectory);

impl ChainKeys for DirectoryKeys<'_> {
    fn key_for(&mut self, env: &EventEnvelope) -> Option<PublicKey> {
        self.0.key_at(&env.author, env.key_epoch)
    }
    fn max_epoch(&self) -> u64 {
        self.0.epoch()
    }
}

/// Checks every hash link, seq, key epoch and signature. Returns the lowest
/// failing seq.
pub fn verify_chain<'a>(
    entries: impl IntoIterator<Item = &'a EventEnvelope>,
    dir: &dyn KeyDirectory,
) -> VerifyOutcome {
    verify_chain_with(entries, &mut DirectoryKeys(dir))
}

pub fn verify_chain_with<'a>(
    entries: impl IntoIterator<Item = &'a EventEnvelope>,
    keys: &mut dyn ChainKeys,
) -> VerifyOutcome {
    let corrupt = |seq: u64, reason: &str| VerifyOutcome::Corrupt { seq, reason: reason.to_owned() };
    let mut prev_digest = ZERO_DIGEST;
    let mut prev_epoch = 0u64;
    for (i, env) in entries.into_iter().enumerate() {
        let i = i as u64;
        if env.seq != i || env.logical_time != i {
            return corrupt(i, "sequence number out of place");
        }
        if env.key_epoch < prev_epoch || env.key_epoch > keys.max_epoch() {
            return corrupt(i, "key epoch not monotone");
        }
        let Some(key) = keys.key_for(env) else {
            return corrupt(i, "no key registered for author at epoch");
        };
        if !key.verify(&env.signing_bytes(), &env.signature) {
            return corrupt(i, "bad signature");
        }
        if env.prev_hash != prev_digest {
            // The signature covers prev_hash, so an authentic entry with a
            // broken link means its predecessor was altered.
            return if i == 0 { corrupt(0, "genesis prev_hash not zero") } else { corrupt(i - 1, "digest does not match successor link") };
        }
        keys.accepted(env);
        prev_digest = env.digest();
        prev_epoch = env.key_epoch;
    }
    VerifyOutcome::Ok
}

/// Structural check only: dense seqs and intact hash links.
pub fn check_links<'a>(entries: impl IntoIterator<Item = &'a EventEnvelope>) -> Result<Digest, LedgerError> {
    let mut prev = ZERO_DIGEST;
    for (i, env) in entries.into_iter().enumerate() {
        let i = i as u64;
        if env.seq != i || env.logical_time != i {
            return Err(LedgerError::Corrupt { seq: i, reason: "sequence number out of place".into() });
        }
        if env.prev_hash != prev {
            return Err(LedgerError::Corrupt { seq: i, reason: "broken hash link".into() });
        }
        prev = env.digest();
    }
    Ok(prev)
}

// ---------------------------------------------------------------------------
// Replay

/// The pure state function of a state manager.
pub trait Reducer {
    type State;
    fn init(&self) -> Self::State;
    fn step(&self, state: &mut Self::State, env: &EventEnvelope) -> Result<(), CodecError>;
}

/// Folds `reducer` over a structurally intact chain.
pub fn replay<'a, R: Reducer>(
    entries: impl IntoIterator<Item = &'a EventEnvelope> + Clone,
    reducer: &R,
) -> Result<R::State, LedgerError> {
    check_links(entries.clone())?;
    let mut state = reducer.init();
    for env in entries {
        reducer
            .step(&mut state, env)
            .map_err(|e| LedgerError::Corrupt { seq: env.seq, reason: format!("undecodable payload: {e}") })?;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Ledger

#[derive(Debug, Default)]
struct Log {
    entries: Mutex<Vec<Arc<EventEnvelope>>>,
    appended: Condvar,
}

impl Log {
    fn lock(&self) -> MutexGuard<'_, Vec<Arc<EventEnvelope>>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub entries: u64,
    /// Set when an incomplete trailing record was dropped.
    pub torn_tail_dropped: Option<u64>,
}

pub struct Ledger {
    id: String,
    log: Arc<Log>,
    head: Digest,
    last_epoch: u64,
    storage: Box<dyn Storage>,
    durability: Durability,
    unsynced: u32,
    sig_check: SigCheck,
}

impl std::fmt::Debug for Ledger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ledger").field("id", &self.id).field("len", &self.len()).finish()
    }
}

impl Ledger {
    pub fn in_memory(id: impl Into<String>) -> Self {
        Self::with_storage(id, MemDisk::new().storage())
    }

    /// A fresh ledger over empty storage.
    pub fn with_storage(id: impl Into<String>, storage: Box<dyn Storage>) -> Self {
        Ledger {
            id: id.into(),
            log: Arc::default(),
            head: ZERO_DIGEST,
            last_epoch: 0,
            storage,
            durability: Durability::EveryAppend,
            unsynced: 0,
            sig_check: SigCheck::Verify,
        }
    }

    /// Reopens a ledger from storage after a restart. An incomplete trailing
    /// record is dropped; any other damage is an error.
    pub fn open(id: impl Into<String>, mut storage: Box<dyn Storage>) -> Result<(Self, LoadReport), LedgerError> {
        let bytes = storage.load()?;
        let parsed = parse_records(&bytes);
        let mut report = LoadReport::default();
        match parsed.tail {
            FileTail::Clean => {}
            FileTail::Torn { record, valid_len } => {
                storage.truncate(valid_len)?;
                report.torn_tail_dropped = Some(record);
            }
            FileTail::Malformed { record, error, .. } => {
                return Err(LedgerError::Corrupt { seq: record, reason: error.to_string() })
            }
        }
        let head = check_links(&parsed.entries)?;
        report.entries = parsed.entries.len() as u64;
        let last_epoch = parsed.entries.last().map_or(0, |e| e.key_epoch);
        let mut ledger = Self::with_storage(id, storage);
        ledger.head = head;
        ledger.last_epoch = last_epoch;
        *ledger.log.lock() = parsed.entries.into_iter().map(Arc::new).collect();
        Ok((ledger, report))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> u64 {
        self.log.lock().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_hash(&self) -> Digest {
        self.head
    }

    pub fn set_sig_check(&mut self, c: SigCheck) {
        self.sig_check = c;
    }

    pub fn set_durability(&mut self, d: Durability) {
        self.durability = d;
    }

    /// Consistent snapshot of the current prefix.
    pub fn entries(&self) -> Vec<Arc<EventEnvelope>> {
        self.log.lock().clone()
    }

    pub fn get(&self, seq: u64) -> Option<Arc<EventEnvelope>> {
        self.log.lock().get(seq as usize).cloned()
    }

    /// `(seq, prev_hash)` of the next append.
    pub fn next_slot(&self) -> (u64, Digest) {
        (self.len(), self.head)
    }

    pub fn sign_draft(&self, kind: &str, payload: Vec<u8>, signer: &dyn Signer, key_epoch: u64) -> Draft {
        let (seq, prev) = self.next_slot();
        let author = signer.party().clone();
        let signature = signer.sign(&signing_bytes(seq, &prev, kind, &payload, &author, key_epoch));
        Draft { kind: kind.to_owned(), payload, author, key_epoch, signature }
    }

    fn admit(&self, d: &Draft, dir: &dyn KeyDirectory, check_sig: bool) -> Result<(), LedgerError> {
        let max = dir.epoch();
        if d.key_epoch < self.last_epoch || d.key_epoch > max {
            return Err(LedgerError::BadKeyEpoch { got: d.key_epoch, min: self.last_epoch, max });
        }
        if !dir.may_author(&d.author, &d.kind) {
            return Err(LedgerError::Unauthorized { party: d.author.clone(), kind: d.kind.clone() });
        }
        if check_sig && self.sig_check == SigCheck::Verify {
            let key = dir.key_at(&d.author, d.key_epoch).ok_or(LedgerError::BadSignature)?;
            // Revoked keys never validate new events.
            if dir.key_at(&d.author, max) != Some(key) {
                return Err(LedgerError::BadSignature);
            }
            let (seq, prev) = self.next_slot();
            let msg = signing_bytes(seq, &prev, &d.kind, &d.payload, &d.author, d.key_epoch);
            if !key.verify(&msg, &d.signature) {
                return Err(LedgerError::BadSignature);
            }
        }
        Ok(())
    }

    /// Verifies and appends one signed draft. Rejection leaves the ledger
    /// untouched.
    pub fn append(&mut self, draft: Draft, dir: &dyn KeyDirectory) -> Result<Arc<EventEnvelope>, LedgerError> {
        self.admit(&draft, dir, true)?;
        self.commit_draft(draft)
    }

    /// Appends a draft whose admission was already checked by the caller
    /// (batch verification).
    fn commit_draft(&mut self, d: Draft) -> Result<Arc<EventEnvelope>, LedgerError> {
        let (seq, prev_hash) = self.next_slot();
        let env = EventEnvelope {
            seq,
            prev_hash,
            payload_kind: d.kind,
            payload: d.payload,
            author: d.author,
            key_epoch: d.key_epoch,
            signature: d.signature,
            logical_time: seq,
        };
        let record = encode_record(&env);
        self.storage.append(&record)?;
        self.unsynced += 1;
        let due = match self.durability {
            Durability::EveryAppend => true,
            Durability::Batched(k) => self.unsynced >= k.max(1),
        };
        if due {
            self.storage.sync()?;
            self.unsynced = 0;
        }
        self.head = sha256(&record[4..]);
        self.last_epoch = env.key_epoch;
        let env = Arc::new(env);
        self.log.lock().push(env.clone());
        self.log.appended.notify_all();
        Ok(env)
    }

    /// Signs for the next slot with the current identity epoch and appends.
    pub fn append_signed(
        &mut self,
        kind: &str,
        payload: Vec<u8>,
        signer: &dyn Signer,
        dir: &dyn KeyDirectory,
    ) -> Result<Arc<EventEnvelope>, LedgerError> {
        let draft = self.sign_draft(kind, payload, signer, dir.epoch());
        self.append(draft, dir)
    }

    /// Checks a run of drafts signed for consecutive slots with one batch
    /// signature verification, returning the prefix that is admissible.
    /// Drafts are not appended; the caller commits them in order with
    /// [`Ledger::append_preverified`] after domain validation.
    pub fn verify_batch_drafts(&self, drafts: &[Draft], dir: &dyn KeyDirectory) -> usize {
        let (mut seq, mut prev) = self.next_slot();
        let max = dir.epoch();
        let mut msgs = Vec::with_capacity(drafts.len());
        let mut keys = Vec::with_capacity(drafts.len());
        let mut last_epoch = self.last_epoch;
        for d in drafts {
            let key = dir.key_at(&d.author, d.key_epoch);
            let ok = d.key_epoch >= last_epoch
                && d.key_epoch <= max
                && dir.may_author(&d.author, &d.kind)
                && key.is_some()
                && dir.key_at(&d.author, max) == key;
            if !ok {
                break;
            }
            last_epoch = d.key_epoch;
            msgs.push(signing_bytes(seq, &prev, &d.kind, &d.payload, &d.author, d.key_epoch));
            keys.push(key.unwrap_or_else(|| unreachable!()));
            // Predict the envelope digest to chain the next slot.
            let env = EventEnvelope {
                seq,
                prev_hash: prev,
                payload_kind: d.kind.clone(),
                payload: d.payload.clone(),
                author: d.author.clone(),
                key_epoch: d.key_epoch,
                signature: d.signature.clone(),
                logical_time: seq,
            };
            prev = env.digest();
            seq += 1;
        }
        let n = msgs.len();
        if self.sig_check == SigCheck::Skip {
            return n;
        }
        let items: Vec<_> =
            (0..n).map(|i| (msgs[i].as_slice(), drafts[i].signature.as_slice(), keys[i])).collect();
        if verify_batch(&items) {
            return n;
        }
        items.iter().position(|(m, s, k)| !k.verify(m, s)).unwrap_or(n)
    }

    /// Appends a draft already admitted by [`Ledger::verify_batch_drafts`].
    pub fn append_preverified(&mut self, draft: Draft) -> Result<Arc<EventEnvelope>, LedgerError> {
        self.commit_draft(draft)
    }

    /// Forces a durability barrier.
    pub fn flush(&mut self) -> Result<(), LedgerError> {
        if self.unsynced > 0 {
            self.storage.sync()?;
            self.unsynced = 0;
        }
        Ok(())
    }

    pub fn subscribe(&self, from_seq: u64) -> Result<Subscription, LedgerError> {
        let len = self.len();
        if from_seq > len {
            return Err(LedgerError::SeqOutOfRange { from: from_seq, len });
        }
        Ok(Subscription { log: self.log.clone(), next: from_seq })
    }

    pub fn verify(&self, dir: &dyn KeyDirectory) -> VerifyOutcome {
        let entries = self.entries();
        verify_chain(entries.iter().map(|e| e.as_ref()), dir)
    }
}

/// A cursor over a ledger: yields the backlog, then new appends, each
/// exactly once and in seq order.
#[derive(Debug, Clone)]
pub struct Subscription {
    log: Arc<Log>,
    next: u64,
}

impl Subscription {
    pub fn position(&self) -> u64 {
        self.next
    }

    pub fn try_next(&mut self) -> Option<Arc<EventEnvelope>> {
        let e = self.log.lock().get(self.next as usize).cloned()?;
        self.next += 1;
        Some(e)
    }

    /// Blocks up to `timeout` for the next entry.
    pub fn next_timeout(&mut self, timeout: Duration) -> Option<Arc<EventEnvelope>> {
        let guard = self.log.lock();
        let idx = self.next as usize;
        let (guard, _) = self
            .log
            .appended
            .wait_timeout_while(guard, timeout, |v| v.len() <= idx)
            .unwrap_or_else(|p| p.into_inner());
        let e = guard.get(idx).cloned()?;
        self.next += 1;
        Some(e)
    }

    pub fn drain(&mut self) -> Vec<Arc<EventEnvelope>> {
        let guard = self.log.lock();
        let out = guard[self.next as usize..].to_vec();
        self.next = guard.len() as u64;
        out
    }
}

impl Iterator for Subscription {
    type Item = Arc<EventEnvelope>;
    fn next(&mut self) -> Option<Self::Item> {
        self.try_next()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::crypto::{KeyPair, PartySigner};
    use std::collections::BTreeMap;

    /// Flat directory: every listed party may author anything, keys never rotate.
    #[derive(Default)]
    pub(crate) struct FlatDir(pub BTreeMap<PartyId, PublicKey>);

    impl KeyDirectory for FlatDir {
        fn epoch(&self) -> u64 {
            0
        }
        fn key_at(&self, party: &PartyId, _: u64) -> Option<PublicKey> {
            self.0.get(party).copied()
        }
        fn may_author(&self, party: &PartyId, _: &str) -> bool {
            self.0.contains_key(party)
        }
    }

    pub(crate) fn alice() -> (PartySigner, FlatDir) {
        let s = PartySigner::new(PartyId::from("alice"), KeyPair::derive(1, "alice"));
        let mut d = FlatDir::default();
        d.0.insert(s.party.clone(), s.key.public());
        (s, d)
    }

    fn filled(n: usize) -> (Ledger, FlatDir) {
        let (s, d) = alice();
        let mut l = Ledger::in_memory("t");
        for i in 0..n {
            l.append_signed("note", vec![i as u8; 3], &s, &d).unwrap();
        }
        (l, d)
    }

    #[test]
    fn genesis_and_chain_link() {
        let (l, _) = filled(2);
        let e = l.entries();
        assert_eq!(e[0].seq, 0);
        assert_eq!(e[0].prev_hash, ZERO_DIGEST);
        assert_eq!(e[1].prev_hash, e[0].digest());
        assert_eq!(l.head_hash(), e[1].digest());
    }

    #[test]
    fn flipped_signature_bit_is_rejected_without_state_change() {
        let (s, d) = alice();
        let mut l = Ledger::in_memory("t");
        let mut draft = l.sign_draft("note", b"x".to_vec(), &s, 0);
        draft.signature[3] ^= 1;
        assert!(matches!(l.append(draft, &d), Err(LedgerError::BadSignature)));
        assert_eq!(l.len(), 0);
        assert_eq!(l.head_hash(), ZERO_DIGEST);
    }

    #[test]
    fn unknown_author_is_unauthorized() {
        let (_, d) = alice();
        let mallory = PartySigner::new(PartyId::from("mallory"), KeyPair::derive(1, "m"));
        let mut l = Ledger::in_memory("t");
        assert!(matches!(
            l.append_signed("note", vec![], &mallory, &d),
            Err(LedgerError::Unauthorized { .. })
        ));
    }

    #[test]
    fn verify_empty_and_tampered() {
        let (_, d) = alice();
        assert!(verify_chain(std::iter::empty(), &d).is_ok());
        let (l, d) = filled(10);
        let mut entries: Vec<EventEnvelope> = l.entries().iter().map(|e| (**e).clone()).collect();
        assert!(verify_chain(&entries, &d).is_ok());
        entries[5].payload[0] ^= 0x80;
        assert_eq!(verify_chain(&entries, &d), VerifyOutcome::Corrupt { seq: 5, reason: "bad signature".into() });
    }

    #[test]
    fn resigned_with_unregistered_key_is_caught_at_that_seq() {
        let (l, d) = filled(10);
        let mut entries: Vec<EventEnvelope> = l.entries().iter().map(|e| (**e).clone()).collect();
        entries[5].payload = b"forged".to_vec();
        let rogue = KeyPair::derive(99, "rogue");
        entries[5].signature = rogue.sign(&entries[5].signing_bytes());
        assert!(matches!(verify_chain(&entries, &d), VerifyOutcome::Corrupt { seq: 5, .. }));
    }

    #[test]
    fn subscription_backlog_then_live() {
        let (s, d) = alice();
        let (mut l, _) = filled(5);
        let mut a = l.subscribe(0).unwrap();
        let seqs: Vec<u64> = a.by_ref().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
        let mut b = l.subscribe(5).unwrap();
        assert!(b.try_next().is_none());
        l.append_signed("note", vec![9], &s, &d).unwrap();
        assert_eq!(b.try_next().unwrap().seq, 5);
        assert_eq!(a.try_next().unwrap().seq, 5);
        assert!(matches!(l.subscribe(7), Err(LedgerError::SeqOutOfRange { from: 7, len: 6 })));
    }

    #[test]
    fn blocking_subscriber_sees_appends_from_another_thread() {
        let (s, d) = alice();
        let mut l = Ledger::in_memory("t");
        let mut sub = l.subscribe(0).unwrap();
        let h = std::thread::spawn(move || {
            (0..3).map(|_| sub.next_timeout(Duration::from_secs(5)).unwrap().seq).collect::<Vec<_>>()
        });
        for i in 0..3 {
            l.append_signed("note", vec![i], &s, &d).unwrap();
        }
        assert_eq!(h.join().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn reopen_after_crash_keeps_only_durable_prefix() {
        let (s, d) = alice();
        let disk = MemDisk::new();
        let mut l = Ledger::with_storage("t", disk.storage());
        l.set_durability(Durability::Batched(4));
        for i in 0..6 {
            l.append_signed("note", vec![i], &s, &d).unwrap();
        }
        disk.crash();
        let (l2, rep) = Ledger::open("t", disk.storage()).unwrap();
        assert_eq!(rep.entries, 4);
        assert_eq!(l2.head_hash(), l.entries()[3].digest());
    }

    #[test]
    fn torn_tail_is_dropped_on_open() {
        let (l, _) = filled(3);
        let mut bytes: Vec<u8> = l.entries().iter().flat_map(|e| encode_record(e)).collect();
        bytes.truncate(bytes.len() - 5);
        let mut disk = MemDisk::new();
        disk.append(&bytes).unwrap();
        let (l2, rep) = Ledger::open("t", disk.storage()).unwrap();
        assert_eq!(l2.len(), 2);
        assert_eq!(rep.torn_tail_dropped, Some(2));
    }

    #[test]
    fn batch_verification_finds_first_bad_draft() {
        let (s, d) = alice();
        let mut shadow = Ledger::in_memory("t");
        let mut drafts = Vec::new();
        for i in 0..8u8 {
            let dr = shadow.sign_draft("note", vec![i], &s, 0);
            shadow.append(dr.clone(), &d).unwrap();
            drafts.push(dr);
        }
        let l = Ledger::in_memory("t");
        assert_eq!(l.verify_batch_drafts(&drafts, &d), 8);
        drafts[5].signature[0] ^= 1;
        assert_eq!(l.verify_batch_drafts(&drafts, &d), 5);
    }

    struct Count;
    impl Reducer for Count {
        type State = u64;
        fn init(&self) -> u64 {
            0
        }
        fn step(&self, s: &mut u64, e: &EventEnvelope) -> Result<(), CodecError> {
            *s += e.payload[0] as u64;
            Ok(())
        }
    }

    #[test]
    fn replay_folds_and_rejects_broken_links() {
        let (l, _) = filled(4);
        let entries: Vec<EventEnvelope> = l.entries().iter().map(|e| (**e).clone()).collect();
        assert_eq!(replay(&entries, &Count).unwrap(), 0 + 1 + 2 + 3);
        assert_eq!(replay(&entries[..0], &Count).unwrap(), 0);
        let mut bad = entries.clone();
        bad[2].prev_hash[0] ^= 1;
        assert!(matches!(replay(&bad, &Count), Err(LedgerError::Corrupt { seq: 2, .. })));
    }
}
