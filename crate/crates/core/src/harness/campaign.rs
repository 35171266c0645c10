//! Randomized delivery-versus-payment runs under random fault plans.

use serde::Serialize;

use super::faults::{FaultPlan, TargetKind};
use super::scenario::{random_dvp, DvpWorkload, Scenario};
use super::topology::{ManagerKind, Topology};
use super::world::run_scenario;
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub runs: u64,
    pub seed: u64,
    pub workload: DvpWorkload,
    /// Fraction of runs, in percent, that get a fault plan.
    pub fault_pct: u32,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunFailure {
    pub seed: u64,
    pub problems: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CampaignSummary {
    pub runs: u64,
    pub faulted_runs: u64,
    pub faults_fired: u64,
    pub committed_txns: u64,
    pub aborted_txns: u64,
    pub trades: u64,
    /// Runs in which some participant reported a blocked transaction.
    pub blocked_runs: u64,
    pub failures: Vec<RunFailure>,
}

impl CampaignSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Everything a fault may hit in `topo`.
pub fn fault_targets(topo: &Topology) -> Vec<(String, TargetKind)> {
    let mut out = Vec::new();
    for m in &topo.managers {
        match m.kind {
            ManagerKind::Resource | ManagerKind::Contract => out.push((m.id.clone(), TargetKind::Host)),
            ManagerKind::Trade => out.push((m.id.clone(), TargetKind::Trade)),
            ManagerKind::Identity => {}
        }
    }
    out.extend(topo.coordinator_ids().into_iter().map(|c| (c.0, TargetKind::Coordinator)));
    out
}

/// Runs `base` followed by a random order flow, `runs` times. Faults are
/// scheduled after the setup steps of `base` so that every run starts
/// from the same funded market.
pub fn dvp_campaign(topo: &Topology, base: &Scenario, cfg: &CampaignConfig) -> Result<CampaignSummary, HarnessError> {
    let setup = run_scenario(topo, base, &FaultPlan::default())?;
    if !setup.report.passed() {
        return Err(HarnessError::Setup(setup.report.failures().join("; ")));
    }
    let offset = setup.report.step_ticks.last().copied().unwrap_or(0);
    let dry = run_scenario(topo, &random_dvp(base, &cfg.workload, cfg.seed), &FaultPlan::default())?;
    let horizon = dry.report.step_ticks.last().copied().unwrap_or(offset).saturating_sub(offset).max(2);
    let targets = fault_targets(topo);

    let mut sum = CampaignSummary::default();
    for i in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(i);
        let scenario = random_dvp(base, &cfg.workload, seed);
        let plan = if (seed % 100) < u64::from(cfg.fault_pct) {
            let mut p = FaultPlan::random(seed, &targets, horizon);
            for f in &mut p.faults {
                f.at += offset;
            }
            sum.faulted_runs += 1;
            p
        } else {
            FaultPlan { seed, faults: Vec::new() }
        };
        let r = run_scenario(topo, &scenario, &plan)?.report;
        sum.runs += 1;
        sum.faults_fired += r.faults_fired.len() as u64;
        sum.committed_txns += r.committed_txns as u64;
        sum.aborted_txns += r.aborted_txns as u64;
        sum.trades += r.trades as u64;
        if !r.in_doubt.is_empty() {
            sum.blocked_runs += 1;
        }
        if !r.passed() {
            sum.failures.push(RunFailure { seed, problems: r.failures() });
        }
    }
    Ok(sum)
}
