//! Seeded fault schedules for the simulated network.
//!
//! ```toml
//! seed = 42
//!
//! [[fault]]
//! at = 40                 # logical tick
//! target = "cash"
//! kind = "crash"
//! after_handling = true   # handle the message at hand, then lose the reply
//!
//! [[fault]]
//! at = 90
//! target = "cash"
//! kind = "restart"
//!
//! [[fault]]
//! at = 10
//! target = "coord-0"
//! kind = "crash"
//! checkpoint = "before_decision"
//!
//! [[fault]]
//! at = 5
//! target = "sec"
//! kind = "delay"
//! span = 20
//! ```
//!
//! Hosts (resource and contract managers) crash immediately or after
//! handling one message. Coordinators and trade managers crash at their next
//! checkpoint, optionally a named one. Delayed messages time out for the
//! sender and arrive after the current step; `reorder` shuffles them in
//! windows of `window`. Messages are never corrupted: a forged or damaged
//! message fails authentication and is indistinguishable from a drop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::txn::Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Crash {
        #[serde(default)]
        after_handling: bool,
        #[serde(default)]
        checkpoint: Option<String>,
    },
    Restart,
    Delay {
        span: u64,
    },
    Duplicate,
    Reorder {
        window: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub at: u64,
    pub target: String,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "fault", default)]
    pub faults: Vec<Fault>,
}

/// What a fault may be aimed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Host,
    Coordinator,
    Trade,
}

impl FaultPlan {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let p: FaultPlan = toml::from_str(text).map_err(|e| HarnessError::Config(format!("fault plan: {e}")))?;
        for f in &p.faults {
            if let FaultKind::Crash { checkpoint: Some(c), .. } = &f.kind {
                if Checkpoint::parse(c).is_none() {
                    return Err(HarnessError::Config(format!("unknown checkpoint `{c}`")));
                }
            }
            if let FaultKind::Reorder { window: 0 } = f.kind {
                return Err(HarnessError::Config("reorder window must be positive".into()));
            }
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&super::read_source(path, "faults")?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plans serialize")
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    /// One to four faults spread over `[0, horizon)` ticks. Crashed hosts
    /// come back after a random downtime about half of the time; the rest
    /// stay down until the run heals.
    pub fn random(seed: u64, targets: &[(String, TargetKind)], horizon: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let horizon = horizon.max(2);
        let mut faults = Vec::new();
        for _ in 0..rng.gen_range(1..=4) {
            let Some((target, kind)) = targets.choose(&mut rng) else { break };
            let at = rng.gen_range(0..horizon);
            let target = target.clone();
            match kind {
                TargetKind::Host => match rng.gen_range(0..4) {
                    0 | 1 => {
                        let after_handling = rng.gen_bool(0.5);
                        faults.push(Fault { at, target: target.clone(), kind: FaultKind::Crash { after_handling, checkpoint: None } });
                        if rng.gen_bool(0.5) {
                            let back = at + rng.gen_range(1..horizon);
                            faults.push(Fault { at: back, target, kind: FaultKind::Restart });
                        }
                    }
                    2 => {
                        let span = rng.gen_range(1..30);
                        faults.push(Fault { at, target: target.clone(), kind: FaultKind::Delay { span } });
                        if rng.gen_bool(0.5) {
                            faults.push(Fault { at, target, kind: FaultKind::Reorder { window: rng.gen_range(2..5) } });
                        }
                    }
                    _ => faults.push(Fault { at, target, kind: FaultKind::Duplicate }),
                },
                TargetKind::Coordinator => {
                    let points = ["before_prepare", "after_prepare", "before_decision", "mid_decision"];
                    let checkpoint = Some(points.choose(&mut rng).expect("non-empty").to_string());
                    faults.push(Fault { at, target: target.clone(), kind: FaultKind::Crash { after_handling: false, checkpoint } });
                    faults.push(Fault { at: at + rng.gen_range(1..horizon), target, kind: FaultKind::Restart });
                }
                TargetKind::Trade => {
                    let points = ["after_intent", "before_result"];
                    let checkpoint = Some(points.choose(&mut rng).expect("non-empty").to_string());
                    faults.push(Fault { at, target: target.clone(), kind: FaultKind::Crash { after_handling: false, checkpoint } });
                    if rng.gen_bool(0.7) {
                        faults.push(Fault { at: at + rng.gen_range(1..horizon), target, kind: FaultKind::Restart });
                    }
                }
            }
        }
        faults.sort_by_key(|f| f.at);
        FaultPlan { seed, faults }
    }
}
