//! Node hosting and message delivery for the scenario runner.
//!
//! In-process delivery is synchronous and driven by one thread: a logical
//! clock advances by one tick per message and by `t_prep` per timeout, and
//! faults fire when the clock passes their tick. TCP delivery runs every
//! host behind its own listener thread on the loopback interface.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::faults::{Fault, FaultKind, FaultPlan};
use crate::codec::{Decoder, Encoder};
use crate::contract::{ContractManager, ContractReducer};
use crate::crypto::PartySigner;
use crate::identity::IdentityHandle;
use crate::ids::ManagerId;
use crate::ledger::{replay, Ledger, LedgerError, MemDisk};
use crate::resource::{ResourceManager, ResourceReducer};
use crate::txn::{participant_handle, Checkpoint, Coordinator, Crashed, Transport, TransportError, TxnBook, TxnHost, TxnMessage};

pub(crate) enum Host {
    Resource(ResourceManager),
    Contract(ContractManager),
}

impl Host {
    pub fn txn(&mut self) -> &mut dyn TxnHost {
        match self {
            Host::Resource(m) => m,
            Host::Contract(m) => m,
        }
    }

    pub fn ledger(&self) -> &Ledger {
        match self {
            Host::Resource(m) => m.ledger(),
            Host::Contract(m) => m.ledger(),
        }
    }

    pub fn book(&self) -> &TxnBook {
        match self {
            Host::Resource(m) => m.state().txn_book(),
            Host::Contract(m) => m.state().txn_book(),
        }
    }

    pub fn encode_state(&self) -> Vec<u8> {
        match self {
            Host::Resource(m) => m.state().encode_state(),
            Host::Contract(m) => m.state().encode_state(),
        }
    }

    /// Canonical state obtained by folding the host's own ledger.
    pub fn replayed_state(&self) -> Result<Vec<u8>, LedgerError> {
        let entries = self.ledger().entries();
        let it = entries.iter().map(|e| e.as_ref());
        Ok(match self {
            Host::Resource(m) => replay(it, &ResourceReducer(m.id().clone()))?.encode_state(),
            Host::Contract(m) => replay(it, &ContractReducer(m.id().clone()))?.encode_state(),
        })
    }

    pub fn resource(&mut self) -> Option<&mut ResourceManager> {
        match self {
            Host::Resource(m) => Some(m),
            Host::Contract(_) => None,
        }
    }

    pub fn contract(&mut self) -> Option<&mut ContractManager> {
        match self {
            Host::Contract(m) => Some(m),
            Host::Resource(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum HostKind {
    Resource,
    Contract,
}

/// A resource or contract manager with its disk. `host` is `None` while the
/// node is crashed.
pub(crate) struct Node {
    pub id: ManagerId,
    pub kind: HostKind,
    pub host: Option<Host>,
    pub disk: MemDisk,
    pub operator: PartySigner,
    pub dir: IdentityHandle,
    /// Set on restart; cleared once recovery resolved every in-doubt entry.
    pub recovering: bool,
}

impl Node {
    pub fn new(id: ManagerId, kind: HostKind, operator: PartySigner, dir: IdentityHandle) -> Self {
        let disk = MemDisk::new();
        let host = match kind {
            HostKind::Resource => Host::Resource(ResourceManager::new(id.clone(), disk.storage(), dir.clone(), operator.clone())),
            HostKind::Contract => Host::Contract(ContractManager::new(id.clone(), disk.storage(), dir.clone(), operator.clone())),
        };
        Node { id, kind, host: Some(host), disk, operator, dir, recovering: false }
    }

    pub fn crash(&mut self) {
        self.host = None;
        self.disk.crash();
    }

    /// Rebuilds the manager from its disk.
    pub fn restart(&mut self) -> Result<(), LedgerError> {
        if self.host.is_some() {
            return Ok(());
        }
        let (id, dir, op) = (self.id.clone(), self.dir.clone(), self.operator.clone());
        self.host = Some(match self.kind {
            HostKind::Resource => Host::Resource(ResourceManager::recover(id, self.disk.storage(), dir, op)?),
            HostKind::Contract => Host::Contract(ContractManager::recover(id, self.disk.storage(), dir, op)?),
        });
        self.recovering = true;
        Ok(())
    }
}

pub(crate) type Shared<T> = Arc<Mutex<T>>;

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Default)]
struct FaultState {
    schedule: VecDeque<Fault>,
    /// Coordinators and trade managers: crash at the next matching checkpoint.
    armed: BTreeMap<ManagerId, Option<Checkpoint>>,
    crash_now: BTreeSet<ManagerId>,
    crash_after: BTreeSet<ManagerId>,
    restart: BTreeSet<ManagerId>,
    delay_until: BTreeMap<ManagerId, u64>,
    duplicate: BTreeSet<ManagerId>,
    reorder: Option<usize>,
    late: Vec<(ManagerId, TxnMessage)>,
}

/// Every node plus the delivery policy between them.
pub(crate) struct Fabric {
    pub nodes: BTreeMap<ManagerId, Shared<Node>>,
    pub coords: Vec<Arc<Coordinator<IdentityHandle>>>,
    pub coord_down: BTreeSet<ManagerId>,
    /// Trade managers that hit a crash checkpoint; the runner drops them.
    pub trade_crashed: BTreeSet<ManagerId>,
    /// Trade managers due for a restart.
    pub trade_restart: BTreeSet<ManagerId>,
    pub clock: u64,
    pub messages: u64,
    pub t_prep: u64,
    pub fired: Vec<String>,
    faults: FaultState,
    rng: ChaCha8Rng,
    rr: usize,
    tcp: Option<TcpCluster>,
}

impl Fabric {
    pub fn new(coords: Vec<Arc<Coordinator<IdentityHandle>>>, t_prep: u64, plan: &FaultPlan) -> Self {
        let mut schedule: Vec<Fault> = plan.faults.clone();
        schedule.sort_by_key(|f| f.at);
        Fabric {
            nodes: BTreeMap::new(),
            coords,
            coord_down: BTreeSet::new(),
            trade_crashed: BTreeSet::new(),
            trade_restart: BTreeSet::new(),
            clock: 0,
            messages: 0,
            t_prep,
            fired: Vec::new(),
            faults: FaultState { schedule: schedule.into(), ..FaultState::default() },
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            rr: 0,
            tcp: None,
        }
    }

    pub fn start_tcp(&mut self) -> io::Result<()> {
        self.tcp = Some(TcpCluster::start(&self.nodes)?);
        Ok(())
    }

    pub fn stop_tcp(&mut self) {
        if let Some(t) = self.tcp.take() {
            t.stop();
        }
    }

    pub fn node(&self, id: &ManagerId) -> Option<Shared<Node>> {
        self.nodes.get(id).cloned()
    }

    /// An available coordinator, rotating between them.
    pub fn pick_coordinator(&mut self) -> Option<Arc<Coordinator<IdentityHandle>>> {
        let n = self.coords.len();
        for i in 0..n {
            let c = &self.coords[(self.rr + i) % n];
            if !self.coord_down.contains(c.id()) {
                self.rr = (self.rr + i + 1) % n;
                return Some(c.clone());
            }
        }
        None
    }

    pub fn tick(&mut self) {
        self.clock += 1;
        self.fire_due();
    }

    fn fire_due(&mut self) {
        while self.faults.schedule.front().is_some_and(|f| f.at <= self.clock) {
            let f = self.faults.schedule.pop_front().expect("checked");
            let target = ManagerId(f.target.clone());
            self.fired.push(format!("t={} {} {:?}", self.clock, f.target, f.kind));
            let is_host = self.nodes.contains_key(&target);
            let is_coord = self.coords.iter().any(|c| c.id() == &target);
            match f.kind {
                FaultKind::Crash { after_handling, checkpoint } => {
                    if is_host {
                        if after_handling {
                            self.faults.crash_after.insert(target);
                        } else {
                            self.faults.crash_now.insert(target);
                        }
                    } else {
                        let at = checkpoint.as_deref().and_then(Checkpoint::parse);
                        self.faults.armed.insert(target, at);
                    }
                }
                FaultKind::Restart => {
                    if is_host {
                        self.faults.restart.insert(target);
                    } else if is_coord {
                        self.faults.armed.remove(&target);
                        self.coord_down.remove(&target);
                    } else {
                        self.faults.armed.remove(&target);
                        self.trade_restart.insert(target);
                    }
                }
                FaultKind::Delay { span } => {
                    self.faults.delay_until.insert(target, f.at + span);
                }
                FaultKind::Duplicate => {
                    self.faults.duplicate.insert(target);
                }
                FaultKind::Reorder { window } => self.faults.reorder = Some(window.max(1)),
            }
        }
    }

    /// Applies pending crash and restart faults to `node`.
    pub fn apply_pending(&mut self, node: &mut Node) {
        if self.faults.crash_now.remove(&node.id) {
            node.crash();
        }
        if self.faults.restart.remove(&node.id) {
            // Recovery replays a ledger this process wrote; failure is a bug.
            node.restart().expect("ledger replays after a crash");
        }
    }

    /// Applies pending crashes and restarts on every idle node.
    pub fn apply_pending_all(&mut self) {
        let nodes: Vec<Shared<Node>> = self.nodes.values().cloned().collect();
        for n in nodes {
            let mut g = lock(&n);
            self.apply_pending(&mut g);
        }
    }

    /// Delivers delayed messages, shuffled within the reorder window.
    /// Replies go nowhere: their senders timed out long ago.
    pub fn flush_late(&mut self) {
        let mut late = std::mem::take(&mut self.faults.late);
        if let Some(k) = self.faults.reorder {
            for chunk in late.chunks_mut(k) {
                chunk.shuffle(&mut self.rng);
            }
        }
        for (to, msg) in late {
            let Some(n) = self.node(&to) else { continue };
            let mut g = lock(&n);
            if let Some(h) = g.host.as_mut() {
                let _ = participant_handle(h.txn(), &msg);
            }
        }
    }

    /// Cancels every future fault and brings every node back up.
    pub fn heal(&mut self) {
        self.faults.schedule.clear();
        self.faults.armed.clear();
        self.faults.crash_after.clear();
        self.faults.crash_now.clear();
        self.faults.delay_until.clear();
        self.faults.duplicate.clear();
        self.coord_down.clear();
        for id in self.nodes.keys() {
            self.faults.restart.insert(id.clone());
        }
        self.apply_pending_all();
        self.flush_late();
    }

    fn timeout(&mut self) -> TransportError {
        self.clock += self.t_prep;
        TransportError::Timeout
    }

    fn deliver(&mut self, to: &ManagerId, msg: TxnMessage) -> Result<TxnMessage, TransportError> {
        if let Some(c) = self.coords.iter().find(|c| c.id() == to).cloned() {
            if self.coord_down.contains(to) {
                return Err(self.timeout());
            }
            return c.handle_query(&msg).ok_or_else(|| self.timeout());
        }
        let Some(node) = self.node(to) else { return Err(TransportError::Unreachable(to.clone())) };
        if self.faults.delay_until.get(to).is_some_and(|&t| t > self.clock) {
            self.faults.late.push((to.clone(), msg));
            return Err(self.timeout());
        }
        // A node that is busy recovering cannot serve its own queries.
        let mut g = match node.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(self.timeout()),
        };
        if let Some(tcp) = self.tcp.as_mut() {
            drop(g);
            return tcp.call(to, &msg);
        }
        self.apply_pending(&mut g);
        let Some(host) = g.host.as_mut() else { return Err(self.timeout()) };
        let reply = participant_handle(host.txn(), &msg);
        if self.faults.duplicate.remove(to) {
            let _ = participant_handle(host.txn(), &msg);
        }
        if self.faults.crash_after.remove(to) {
            g.crash();
            return Err(self.timeout());
        }
        drop(g);
        reply.ok_or_else(|| self.timeout())
    }
}

impl Transport for Fabric {
    fn call(&mut self, _from: &ManagerId, to: &ManagerId, msg: TxnMessage) -> Result<TxnMessage, TransportError> {
        self.messages += 1;
        self.tick();
        self.deliver(to, msg)
    }

    fn checkpoint(&mut self, who: &ManagerId, at: Checkpoint) -> Result<(), Crashed> {
        match self.faults.armed.get(who) {
            Some(None) => {}
            Some(Some(c)) if *c == at => {}
            _ => return Ok(()),
        }
        self.faults.armed.remove(who);
        self.fired.push(format!("t={} {who} crashed at {}", self.clock, at.name()));
        if self.coords.iter().any(|c| c.id() == who) {
            self.coord_down.insert(who.clone());
        } else {
            self.trade_crashed.insert(who.clone());
        }
        Err(Crashed)
    }

    fn coordinators(&self) -> Vec<ManagerId> {
        self.coords.iter().map(|c| c.id().clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// TCP

fn write_frame(s: &mut TcpStream, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    s.write_all(&buf)
}

fn read_frame(s: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    s.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
    s.read_exact(&mut body)?;
    Ok(body)
}

fn encode_msg(m: &TxnMessage) -> Vec<u8> {
    let mut e = Encoder::new();
    e.item(m);
    e.finish()
}

fn decode_msg(b: &[u8]) -> Option<TxnMessage> {
    let mut d = Decoder::new(b);
    let m = d.item().ok()?;
    d.finish().ok()?;
    Some(m)
}

/// One listener thread per host. Frames are a 4-byte big-endian length and
/// the canonical message encoding; an empty reply frame means no answer.
struct TcpCluster {
    addrs: BTreeMap<ManagerId, SocketAddr>,
    conns: BTreeMap<ManagerId, TcpStream>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl TcpCluster {
    fn start(nodes: &BTreeMap<ManagerId, Shared<Node>>) -> io::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let mut addrs = BTreeMap::new();
        let mut threads = Vec::new();
        for (id, node) in nodes {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            addrs.insert(id.clone(), listener.local_addr()?);
            let (node, stop) = (node.clone(), stop.clone());
            threads.push(std::thread::spawn(move || serve(listener, node, stop)));
        }
        Ok(TcpCluster { addrs, conns: BTreeMap::new(), stop, threads })
    }

    fn call(&mut self, to: &ManagerId, msg: &TxnMessage) -> Result<TxnMessage, TransportError> {
        let addr = *self.addrs.get(to).ok_or_else(|| TransportError::Unreachable(to.clone()))?;
        let exchange = |s: &mut TcpStream| -> io::Result<Vec<u8>> {
            write_frame(s, &encode_msg(msg))?;
            read_frame(s)
        };
        if !self.conns.contains_key(to) {
            let s = TcpStream::connect(addr).map_err(|_| TransportError::Unreachable(to.clone()))?;
            s.set_read_timeout(Some(Duration::from_secs(10))).ok();
            s.set_nodelay(true).ok();
            self.conns.insert(to.clone(), s);
        }
        let s = self.conns.get_mut(to).expect("connected");
        match exchange(s) {
            Ok(body) if body.is_empty() => Err(TransportError::Timeout),
            Ok(body) => decode_msg(&body).ok_or(TransportError::Timeout),
            Err(_) => {
                self.conns.remove(to);
                Err(TransportError::Timeout)
            }
        }
    }

    fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.conns.clear();
        for addr in self.addrs.values() {
            // Wake each accept loop so it sees the flag.
            let _ = TcpStream::connect(addr);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn serve(listener: TcpListener, node: Shared<Node>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let Ok(mut s) = conn else { continue };
        s.set_nodelay(true).ok();
        while let Ok(body) = read_frame(&mut s) {
            let reply = decode_msg(&body).and_then(|m| {
                let mut g = lock(&node);
                g.host.as_mut().and_then(|h| participant_handle(h.txn(), &m))
            });
            let out = reply.map(|r| encode_msg(&r)).unwrap_or_default();
            if write_frame(&mut s, &out).is_err() {
                break;
            }
        }
    }
}
