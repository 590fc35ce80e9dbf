//! Run summaries computed from trace records alone, plus the on-disk layout
//! of a run directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use beamsurfer::config::Scenario;
use beamsurfer::engine::audit;
use beamsurfer::metrics::{
    blockage_events, cdf, median_throughput, oracle_deviation, recovery_stats, Deviation, RecoveryStats,
};
use beamsurfer::trace::{read_jsonl, write_csv, write_jsonl, AuditReport, Policy, SimulationTrace};
use serde::{Deserialize, Serialize};

pub const TRACE_JSONL: &str = "trace.jsonl";
pub const TRACE_CSV: &str = "trace.csv";
pub const TRANSITIONS_JSONL: &str = "transitions.jsonl";
pub const RUN_META: &str = "run.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CDF_CSV: &str = "throughput_cdf.csv";

/// Settings the post-run analysis needs besides the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub acquisition_failed: bool,
    pub decision_epoch_ms: f64,
    pub neighbor_bound: usize,
    pub control_snr_db: f64,
}

impl RunMeta {
    pub fn new(s: &Scenario, trace: &SimulationTrace) -> Self {
        Self {
            config_hash: trace.config_hash.clone(),
            seed: trace.seed,
            acquisition_failed: trace.acquisition_failed,
            decision_epoch_ms: s.config.decision_epoch_ms,
            neighbor_bound: s.config.protocol.neighbor_bound,
            control_snr_db: s.config.protocol.control_snr_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Policy,
    pub epochs: usize,
    pub mean_oracle_rss_dbm: f64,
    pub deviation: Option<Deviation>,
    pub median_throughput_bps: Option<f64>,
    pub total_probes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reacquisitions: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blockage: Option<RecoveryStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub acquisition_failed: bool,
    pub audit_passed: bool,
    pub audit: AuditReport,
    pub policies: Vec<PolicySummary>,
}

impl RunSummary {
    pub fn policy(&self, p: Policy) -> Option<&PolicySummary> {
        self.policies.iter().find(|s| s.policy == p)
    }
}

pub fn summarize(trace: &SimulationTrace, control_snr_db: f64) -> RunSummary {
    let policies = trace
        .policies()
        .into_iter()
        .map(|p| {
            let records = trace.policy(p);
            let oracle: Vec<f64> = records.iter().map(|r| r.oracle_rss).filter(|v| v.is_finite()).collect();
            let stateful = records.iter().any(|r| r.state.is_some());
            let blockage = if stateful {
                recovery_stats(&blockage_events(&records, control_snr_db)).ok()
            } else {
                None
            };
            PolicySummary {
                policy: p,
                epochs: records.len(),
                mean_oracle_rss_dbm: oracle.iter().sum::<f64>() / oracle.len().max(1) as f64,
                deviation: oracle_deviation(&records).ok(),
                median_throughput_bps: median_throughput(&records),
                total_probes: records.iter().map(|r| r.probes_this_epoch).sum(),
                reacquisitions: stateful.then(|| records.iter().map(|r| r.reacquisitions).sum()),
                blockage,
            }
        })
        .collect();
    RunSummary {
        config_hash: trace.config_hash.clone(),
        seed: trace.seed,
        acquisition_failed: trace.acquisition_failed,
        audit_passed: trace.audit.passed(),
        audit: trace.audit.clone(),
        policies,
    }
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_cdf(w: impl Write, trace: &SimulationTrace) -> std::io::Result<()> {
    let mut w = w;
    writeln!(w, "policy,throughput_bps,quantile")?;
    for p in trace.policies() {
        let values: Vec<f64> = trace.policy(p).iter().map(|r| r.throughput).collect();
        for (v, q) in cdf(&values) {
            writeln!(w, "{p},{v},{q}")?;
        }
    }
    Ok(())
}

/// Writes every artifact of one run into `dir`, creating it if needed.
pub fn write_run(dir: &Path, meta: &RunMeta, trace: &SimulationTrace, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_jsonl(create(dir.join(TRACE_JSONL))?, &trace.records)?;
    write_csv(create(dir.join(TRACE_CSV))?, &trace.records)?;
    if trace.records.iter().any(|r| r.state.is_some()) {
        write_jsonl(create(dir.join(TRANSITIONS_JSONL))?, &trace.transitions)?;
    }
    write_cdf(create(dir.join(CDF_CSV))?, trace)?;
    serde_json::to_writer_pretty(create(dir.join(RUN_META))?, meta)?;
    serde_json::to_writer_pretty(create(dir.join(SUMMARY_JSON))?, summary)?;
    Ok(())
}

fn open(path: PathBuf) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(&path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

/// Rebuilds a trace from a run directory and re-runs the audit on it.
pub fn read_run(dir: &Path) -> Result<(RunMeta, SimulationTrace)> {
    let meta: RunMeta = serde_json::from_reader(open(dir.join(RUN_META))?)
        .with_context(|| format!("bad {RUN_META} in {}", dir.display()))?;
    let records = read_jsonl(open(dir.join(TRACE_JSONL))?)?;
    let transitions_path = dir.join(TRANSITIONS_JSONL);
    let transitions = if transitions_path.exists() {
        read_jsonl(open(transitions_path)?)?
    } else {
        Vec::new()
    };
    let mut trace = SimulationTrace {
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        records,
        transitions,
        acquisition_failed: meta.acquisition_failed,
        audit: AuditReport::default(),
    };
    trace.audit = audit(&trace, meta.decision_epoch_ms, meta.neighbor_bound);
    Ok((meta, trace))
}

/// One line per policy: within-3 dB fraction and median throughput.
pub fn headline(summary: &RunSummary) -> String {
    summary
        .policies
        .iter()
        .map(|p| {
            let within = p
                .deviation
                .map(|d| format!("{:.3}", d.fraction_within_3db))
                .unwrap_or_else(|| "n/a".into());
            let median = p
                .median_throughput_bps
                .map(|v| format!("{:.2} Gbps", v / 1e9))
                .unwrap_or_else(|| "n/a".into());
            format!("{}: within 3 dB {within}, median throughput {median}", p.policy)
        })
        .collect::<Vec<_>>()
        .join("\n")
}
