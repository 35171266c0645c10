use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bondledger(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bondledger"))
        .args(args)
        .env("BONDLEDGER_DATA_DIR", data)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn runs(data: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(data.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn green_bond_run_passes_and_its_ledgers_verify() {
    let data = tempfile::tempdir().unwrap();
    let o = bondledger(data.path(), &["run-scenario", "green_bond", "green_bond"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("PASS"));
    let dir = &runs(data.path())[0];
    for f in ["report.json", "alerts.jsonl", "cm.ledger", "cash.ledger", "identity.ledger", "faults.toml"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let cm = dir.join("cm.ledger");
    let identity = dir.join("identity.ledger");
    let o = bondledger(data.path(), &["verify-ledger", cm.to_str().unwrap(), "--identity", identity.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(runs(data.path()).len(), 2, "every command gets its own folder");
}

#[test]
fn flipped_byte_fails_verification() {
    let data = tempfile::tempdir().unwrap();
    assert!(bondledger(data.path(), &["run-scenario", "green_bond", "empty"]).status.success());
    let dir = &runs(data.path())[0];
    let cash = dir.join("cash.ledger");
    let mut bytes = std::fs::read(&cash).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&cash, bytes).unwrap();
    let identity = dir.join("identity.ledger");
    let o = bondledger(data.path(), &["verify-ledger", cash.to_str().unwrap(), "--identity", identity.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("corrupt at entry"));
}

#[test]
fn failing_assertion_gives_nonzero_exit() {
    let data = tempfile::tempdir().unwrap();
    let scenario = data.path().join("bad.toml");
    std::fs::write(&scenario, "name = \"bad\"\n[[step]]\naction = \"assert_trades\"\nbond = \"GB\"\ncount = 3\n").unwrap();
    let o = bondledger(data.path(), &["run-scenario", "green_bond", scenario.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn random_fault_plan_keeps_the_dvp_run_consistent() {
    let data = tempfile::tempdir().unwrap();
    let o = bondledger(data.path(), &["run-scenario", "dvp", "dvp", "--faults", "random", "--seed", "11"]);
    let out = stdout(&o);
    assert!(!out.contains("VIOLATION"), "{out}");
    let plan = std::fs::read_to_string(runs(data.path())[0].join("faults.toml")).unwrap();
    assert!(plan.contains("seed = 11"), "{plan}");
}

#[test]
fn bench_reports_rate_and_reference() {
    let data = tempfile::tempdir().unwrap();
    let o = bondledger(data.path(), &["bench", "dvp", "--events", "2000", "--sig", "batch", "--shards", "2"]);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("200000 messages per second"));
    let json = std::fs::read_to_string(runs(data.path())[0].join("bench.json")).unwrap();
    assert!(json.contains("\"events\": 4000"), "{json}");
}

#[test]
fn bad_arguments_are_rejected() {
    let data = tempfile::tempdir().unwrap();
    assert!(!bondledger(data.path(), &["bench", "dvp", "--sig", "sometimes"]).status.success());
    assert_eq!(bondledger(data.path(), &["run-scenario", "no_such_topology", "empty"]).status.code(), Some(2));
}
