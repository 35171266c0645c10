use std::collections::BTreeMap;

use bondledger::contract::{ContractEffect, LifecycleKind};
use bondledger::harness::{bundled, dvp_campaign, run_scenario, verify_ledger, CampaignConfig, DvpWorkload, FaultPlan, Scenario, TargetKind, Topology};
use bondledger::txn::{Decision, Effect, TxnLogEvent};
use bondledger::TxnId;

fn load(name: &str, scenario: &str) -> (Topology, Scenario) {
    let t = Topology::from_toml(bundled(name, "topology").unwrap()).unwrap();
    let s = Scenario::from_toml(bundled(scenario, "scenario").unwrap()).unwrap();
    (t, s)
}

#[test]
fn green_bond_scenario_passes() {
    let (t, s) = load("green_bond", "green_bond");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    assert!(run.report.passed(), "{:#?}", run.report.failures());
}

#[test]
fn dvp_setup_passes() {
    let (t, s) = load("dvp", "dvp");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    assert!(run.report.passed(), "{:#?}", run.report.failures());
}

#[test]
fn dvp_setup_passes_over_tcp() {
    let (t, s) = load("dvp_tcp", "dvp");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    assert!(run.report.passed(), "{:#?}", run.report.failures());
}

#[test]
fn empty_scenario_passes() {
    let (t, s) = load("green_bond", "empty");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    assert!(run.report.passed(), "{:#?}", run.report.failures());
}

#[test]
fn small_fault_campaign_keeps_every_invariant() {
    let (t, s) = load("dvp", "dvp");
    let cfg = CampaignConfig {
        runs: 40,
        seed: 900,
        workload: DvpWorkload {
            traders: ["alice", "bob", "carol", "dave"].map(String::from).to_vec(),
            bond: "GB".into(),
            orders: 20,
            cancel_pct: 20,
            observation: Some(("verifier".into(), "co2_tons_1".into())),
        },
        fault_pct: 100,
    };
    let sum = dvp_campaign(&t, &s, &cfg).unwrap();
    assert!(sum.passed(), "{:#?}", sum.failures);
    assert!(sum.faults_fired > 0 && sum.committed_txns > 0);
}

#[test]
fn scripted_crash_of_a_participant_is_recovered() {
    let (t, s) = load("dvp", "dvp");
    let plan = FaultPlan::from_toml(
        r#"
        seed = 3
        [[fault]]
        at = 20
        target = "sec"
        kind = "crash"
        after_handling = true
        [[fault]]
        at = 40
        target = "sec"
        kind = "restart"
        "#,
    )
    .unwrap();
    let run = run_scenario(&t, &s, &plan).unwrap();
    assert!(run.report.violations.is_empty(), "{:#?}", run.report.violations);
    assert!(!run.report.faults_fired.is_empty());
}

#[test]
fn tcp_topology_refuses_fault_plans() {
    let (t, s) = load("dvp_tcp", "dvp");
    let plan = FaultPlan::random(1, &[("sec".into(), TargetKind::Host)], 50);
    assert!(run_scenario(&t, &s, &plan).is_err());
}

#[test]
fn run_outputs_verify_offline() {
    let (t, s) = load("green_bond", "green_bond");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.write(dir.path()).unwrap();
    let identity = dir.path().join("identity.ledger");
    for id in run.report.ledgers.keys() {
        let v = verify_ledger(&dir.path().join(format!("{id}.ledger")), &identity).unwrap();
        assert!(v.is_ok() && v.warnings.is_empty(), "{id}: {v:?}");
    }
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("alerts.jsonl").exists());
}

#[test]
fn truncation_is_reported_through_the_head_file() {
    let (t, s) = load("green_bond", "green_bond");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.write(dir.path()).unwrap();
    let path = dir.path().join("cash.ledger");
    let bytes = std::fs::read(&path).unwrap();
    let entries = bondledger::ledger::parse_records(&bytes).entries;
    let last = bondledger::ledger::encode_record(entries.last().unwrap()).len();
    std::fs::write(&path, &bytes[..bytes.len() - last]).unwrap();
    let v = verify_ledger(&path, &dir.path().join("identity.ledger")).unwrap();
    assert!(v.is_ok());
    assert_eq!(v.warnings.len(), 1, "{v:?}");
}

fn crash_coupon_coordinator(extra: &str) -> bondledger::harness::ScenarioReport {
    let (t, s) = load("green_bond", "green_bond");
    let plan = FaultPlan::from_toml(&format!(
        r#"
        seed = 1
        [[fault]]
        at = 21
        target = "coord-0"
        kind = "crash"
        checkpoint = "before_decision"
        {extra}
        "#
    ))
    .unwrap();
    let run = run_scenario(&t, &s, &plan).unwrap();
    let r = &run.report;
    assert!(r.violations.is_empty(), "{:#?}", r.violations);
    assert!(r.faults_fired.iter().any(|f| f.contains("crashed at before_decision")), "{:?}", r.faults_fired);
    assert!(r.action_errors.iter().any(|e| e.contains("pay_coupon") && e.contains("in doubt")), "{:?}", r.action_errors);
    // The coupon transaction reached the same decision at the contract and
    // the cash manager.
    let decisions = |id: &str| -> BTreeMap<TxnId, Decision> {
        let (_, entries) = run.ledgers.iter().find(|(m, _)| m == id).unwrap();
        entries
            .iter()
            .filter_map(|e| match TxnLogEvent::decode(&e.payload_kind, &e.payload) {
                Ok(TxnLogEvent::Decided { txn_id, decision }) => Some((txn_id, decision)),
                _ => None,
            })
            .collect()
    };
    let (_, cm) = run.ledgers.iter().find(|(m, _)| m == "cm").unwrap();
    let coupon = cm
        .iter()
        .find_map(|e| match TxnLogEvent::decode(&e.payload_kind, &e.payload) {
            Ok(TxnLogEvent::Prepared(t))
                if t.actions.iter().any(|a| {
                    matches!(&a.effect, Effect::Contract(ContractEffect::Apply(ev)) if matches!(ev.kind, LifecycleKind::PaymentSettled { .. }))
                }) =>
            {
                Some(t.txn_id)
            }
            _ => None,
        })
        .expect("coupon prepared at the contract manager");
    let at_cm = decisions("cm").get(&coupon).copied();
    assert!(at_cm.is_some(), "coupon undecided at cm");
    assert_eq!(at_cm, decisions("cash").get(&coupon).copied());
    run.report
}

#[test]
fn coordinator_crash_before_the_coupon_decision_is_all_or_nothing() {
    crash_coupon_coordinator("");
}

#[test]
fn coupon_blocked_behind_a_crashed_peer_is_flagged_and_resolved() {
    let r = crash_coupon_coordinator(
        r#"
        [[fault]]
        at = 24
        target = "cash"
        kind = "crash"
        after_handling = true
        [[fault]]
        at = 30
        target = "cash"
        kind = "restart"
        "#,
    );
    assert!(!r.in_doubt.is_empty(), "{:?}", r.faults_fired);
}

#[test]
fn identical_inputs_give_identical_ledgers() {
    let (t, s) = load("dvp", "dvp");
    let w = DvpWorkload {
        traders: ["alice", "bob", "carol", "dave"].map(String::from).to_vec(),
        bond: "GB".into(),
        orders: 20,
        cancel_pct: 10,
        observation: None,
    };
    let s = bondledger::harness::random_dvp(&s, &w, 5);
    let plan = FaultPlan::random(5, &bondledger::harness::campaign::fault_targets(&t), 80);
    let a = run_scenario(&t, &s, &plan).unwrap();
    let b = run_scenario(&t, &s, &plan).unwrap();
    assert_eq!(a.ledgers, b.ledgers);
}

#[test]
fn tcp_and_in_process_runs_end_in_the_same_state() {
    let (t, s) = load("dvp", "dvp");
    let (tcp, _) = load("dvp_tcp", "dvp");
    let a = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    let b = run_scenario(&tcp, &s, &FaultPlan::default()).unwrap();
    assert_eq!(a.report.ledgers, b.report.ledgers);
}

#[test]
fn empty_scenario_leaves_only_bootstrap_entries() {
    let (t, s) = load("green_bond", "empty");
    let run = run_scenario(&t, &s, &FaultPlan::default()).unwrap();
    assert_eq!(run.report.committed_txns, 0);
    assert_eq!(run.report.ledgers["cm"].entries, 0);
    assert_eq!(run.report.ledgers["tm"].entries, 0);
}
