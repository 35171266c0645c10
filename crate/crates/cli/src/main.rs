use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bondledger::harness::bench::{run_bench, BenchConfig, SigMode, REFERENCE_EVENTS_PER_SEC};
use bondledger::harness::campaign::fault_targets;
use bondledger::harness::{run_scenario, verify_ledger, FaultPlan, LedgerVerdict, Scenario, Topology};
use bondledger::ledger::VerifyOutcome;

/// Where run folders are created. Defaults to `./data`.
const DATA_DIR_VAR: &str = "BONDLEDGER_DATA_DIR";

#[derive(Parser)]
#[command(name = "bondledger", version, about = "Run bond market scenarios, benchmarks and ledger checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario on a topology and check its assertions.
    RunScenario {
        /// Topology file, or the name of a bundled one.
        topology: PathBuf,
        /// Scenario file, or the name of a bundled one.
        scenario: PathBuf,
        /// Fault plan file, or `random` for a generated plan.
        #[arg(long)]
        faults: Option<String>,
        /// Seed for the fault plan; overrides the seed in the file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure ledger ingest throughput.
    Bench {
        topology: PathBuf,
        /// Events per shard.
        #[arg(long, default_value_t = 100_000)]
        events: usize,
        #[arg(long, default_value = "none", value_parser = parse_sig)]
        sig: SigMode,
        #[arg(long, default_value_t = 1)]
        shards: usize,
        /// Drafts per batch in `batch` mode.
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Check a ledger file's hash chain and signatures.
    VerifyLedger {
        path: PathBuf,
        /// Identity ledger holding the signing keys.
        #[arg(long)]
        identity: PathBuf,
    },
}

fn parse_sig(s: &str) -> Result<SigMode, String> {
    s.parse()
}

fn run_dir(command: &str) -> Result<PathBuf> {
    let base = std::env::var_os(DATA_DIR_VAR).map_or_else(|| PathBuf::from("data"), PathBuf::from);
    let ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
    let mut dir = base.join("runs").join(format!("{ms}-{command}"));
    let mut n = 1;
    while dir.exists() {
        dir = base.join("runs").join(format!("{ms}-{command}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fault_plan(topo: &Topology, scenario: &Scenario, faults: Option<&str>, seed: Option<u64>) -> Result<FaultPlan> {
    let mut plan = match faults {
        None => FaultPlan::default(),
        Some("random") => {
            let seed = seed.unwrap_or(0);
            // Faults are spread over the span a clean run needs.
            let dry = run_scenario(topo, scenario, &FaultPlan::default())?;
            let horizon = dry.report.step_ticks.last().copied().unwrap_or(0).max(2);
            FaultPlan::random(seed, &fault_targets(topo), horizon)
        }
        Some(path) => FaultPlan::load(Path::new(path))?,
    };
    if let Some(s) = seed {
        plan.seed = s;
    }
    Ok(plan)
}

fn run_scenario_cmd(topology: &Path, scenario: &Path, faults: Option<&str>, seed: Option<u64>) -> Result<bool> {
    let topo = Topology::load(topology)?;
    let scenario = Scenario::load(scenario)?;
    let plan = fault_plan(&topo, &scenario, faults, seed)?;
    let run = run_scenario(&topo, &scenario, &plan)?;
    let dir = run_dir("run-scenario")?;
    run.write(&dir)?;
    std::fs::write(dir.join("faults.toml"), plan.to_toml()).context("writing fault plan")?;

    let r = &run.report;
    for a in &r.assertions {
        println!("step {:>3} {:<22} {} {}", a.step, a.name, if a.passed { "ok  " } else { "FAIL" }, a.detail);
    }
    for e in &r.action_errors {
        println!("note: {e}");
    }
    for f in &r.faults_fired {
        println!("fault: {f}");
    }
    for d in &r.in_doubt {
        println!("in doubt: {d}");
    }
    for v in &r.violations {
        println!("VIOLATION: {v}");
    }

    // Re-read what was written, as an independent check of the files.
    let identity = dir.join("identity.ledger");
    let mut files_ok = true;
    for (id, _) in &run.ledgers {
        let v = verify_ledger(&dir.join(format!("{id}.ledger")), &identity)?;
        if !v.is_ok() || !v.warnings.is_empty() {
            println!("ledger {id}: {}", describe(&v));
            files_ok = false;
        }
    }
    let passed = r.passed() && files_ok;
    println!(
        "{} {}: {} committed, {} aborted, {} trades, {} alerts -> {}",
        r.topology,
        r.scenario,
        r.committed_txns,
        r.aborted_txns,
        r.trades,
        r.alerts.len(),
        if passed { "PASS" } else { "FAIL" }
    );
    println!("output: {}", dir.display());
    Ok(passed)
}

fn bench_cmd(topology: &Path, cfg: BenchConfig) -> Result<bool> {
    let topo = Topology::load(topology)?;
    topo.validate()?;
    let report = run_bench(&cfg)?;
    let dir = run_dir("bench")?;
    write_json(&dir.join("bench.json"), &report)?;
    println!(
        "{}: {} events, sig {:?}, {} shard(s), {:.1} ms, {:.0} events/s",
        topo.name, report.events, report.sig, report.shards, report.elapsed_ms, report.events_per_sec
    );
    println!(
        "reference: Nasdaq ITCH feeds peak at up to {REFERENCE_EVENTS_PER_SEC:.0} messages per second; this run is {:.2}x that rate",
        report.reference_ratio
    );
    println!("output: {}", dir.display());
    Ok(true)
}

fn describe(v: &LedgerVerdict) -> String {
    let mut s = match &v.outcome {
        VerifyOutcome::Ok => format!("ok, {} entries", v.entries),
        VerifyOutcome::Corrupt { seq, reason } => format!("corrupt at entry {seq}: {reason}"),
    };
    for w in &v.warnings {
        s.push_str("; warning: ");
        s.push_str(w);
    }
    s
}

fn verify_cmd(path: &Path, identity: &Path) -> Result<bool> {
    let v = verify_ledger(path, identity)?;
    println!("{}: {}", path.display(), describe(&v));
    let dir = run_dir("verify-ledger")?;
    let first_bad = v.first_bad();
    write_json(
        &dir.join("verdict.json"),
        &serde_json::json!({
            "path": path,
            "entries": v.entries,
            "ok": v.is_ok(),
            "first_bad": first_bad,
            "warnings": v.warnings,
        }),
    )?;
    Ok(v.is_ok() && v.warnings.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::RunScenario { topology, scenario, faults, seed } => run_scenario_cmd(&topology, &scenario, faults.as_deref(), seed),
        Cmd::Bench { topology, events, sig, shards, batch } => {
            if events == 0 || shards == 0 || batch == 0 {
                bail!("--events, --shards and --batch must be positive");
            }
            bench_cmd(&topology, BenchConfig { events, sig, shards, batch })
        }
        Cmd::VerifyLedger { path, identity } => verify_cmd(&path, &identity),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
