//! Single-bit corruption of persisted ledgers.

use std::path::Path;

use bondledger::harness::verify_ledger;
use bondledger::ledger::{encode_record, write_ledger_file, EventEnvelope};
use bondledger::resource::{ResourceManager, TransferInstruction};
use bondledger::{ManagerId, ResourceId};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use super::Cast;

/// A resource ledger with a few dozen entries and the identity ledger that
/// registers its authors.
pub struct Files {
    pub dir: tempfile::TempDir,
    pub ledgers: Vec<(std::path::PathBuf, Vec<u8>, Vec<usize>)>,
    pub identity: std::path::PathBuf,
}

fn ends(entries: &[std::sync::Arc<EventEnvelope>]) -> Vec<usize> {
    let mut acc = 0;
    entries
        .iter()
        .map(|e| {
            acc += encode_record(e).len();
            acc
        })
        .collect()
}

pub fn files() -> Files {
    let cast = Cast::new(5);
    let mut m = ResourceManager::new(ManagerId::from("cash"), bondledger::ledger::MemDisk::new().storage(), cast.dir(), cast.s["cash"].clone());
    let eur = ResourceId::from("EUR");
    m.define_resource(eur.clone(), 2, Some(cast.id("bank"))).unwrap();
    for who in ["alice", "bob", "carol"] {
        m.issue_units(eur.clone(), cast.id(who), 10_000, &cast.s["bank"]).unwrap();
    }
    for i in 0..25u64 {
        let (a, b) = [("alice", "bob"), ("bob", "carol"), ("carol", "alice")][(i % 3) as usize];
        let instr = TransferInstruction { from: cast.id(a), to: cast.id(b), resource: eur.clone(), amount: 1 + i, reference: None };
        m.transfer(instr, &cast.s[a]).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let identity = dir.path().join("identity.ledger");
    let ids = cast.ids.ledger().entries();
    write_ledger_file(&identity, &ids).unwrap();
    let cash = dir.path().join("cash.ledger");
    let entries = m.ledger().entries();
    write_ledger_file(&cash, &entries).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    let ledgers = vec![(cash.clone(), read(&cash), ends(&entries)), (identity.clone(), read(&identity), ends(&ids))];
    Files { dir, ledgers, identity }
}

/// Flips one bit of one file and returns the reported and the expected
/// first bad record.
pub fn check(f: &Files, which: usize, bit: usize) -> (Option<u64>, u64) {
    let (path, clean, ends) = &f.ledgers[which];
    let bit = bit % (clean.len() * 8);
    let mut bytes = clean.clone();
    bytes[bit / 8] ^= 1 << (bit % 8);
    // The identity ledger is mutated in a copy so it can double as the
    // reference directory for the other file.
    let target = f.dir.path().join(format!("mutated-{which}.ledger"));
    std::fs::write(&target, &bytes).unwrap();
    let identity = if path == &f.identity { target.clone() } else { f.identity.clone() };
    let expected = ends.iter().position(|&end| bit / 8 < end).unwrap() as u64;
    let got = verify_ledger(&target, &identity).map(|v| v.first_bad()).unwrap_or(None);
    (got, expected)
}

/// Runs `cases` random mutations; returns the case count and failures.
pub fn run(cases: u32) -> (u32, Vec<String>) {
    let f = files();
    for (path, _, _) in &f.ledgers {
        if !verify_ledger(path, &f.identity).unwrap().is_ok() {
            return (0, vec![format!("{} does not verify untouched", path.display())]);
        }
    }
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    let result = runner.run(&(0usize..2, any::<usize>()), |(which, bit)| {
        let (got, expected) = check(&f, which, bit);
        prop_assert_eq!(got, Some(expected));
        Ok(())
    });
    match result {
        Ok(()) => (cases, Vec::new()),
        Err(e) => (cases, vec![e.to_string()]),
    }
}
