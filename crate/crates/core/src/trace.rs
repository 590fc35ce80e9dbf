//! Per-epoch trace records and their JSON-lines / CSV forms.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::protocol::{ProtocolState, TransitionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Beamsurfer,
    Oracle,
    Exhaustive,
    Static,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Beamsurfer,
        Policy::Oracle,
        Policy::Exhaustive,
        Policy::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Beamsurfer => "beamsurfer",
            Policy::Oracle => "oracle",
            Policy::Exhaustive => "exhaustive",
            Policy::Static => "static",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy '{s}'"))
    }
}

/// One decision epoch of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Instant the record was evaluated at, ms.
    pub t: f64,
    pub policy: Policy,
    /// Protocol state; absent for policies without a state machine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ProtocolState>,
    pub tx_beam: usize,
    pub rx_beam: usize,
    /// Absent while the link is being re-acquired.
    pub rss: Option<f64>,
    pub oracle_rss: f64,
    pub probes_this_epoch: usize,
    /// bit/s.
    pub throughput: f64,
    pub blockage_active: bool,
    /// Re-acquisitions started since the previous record.
    #[serde(default)]
    pub reacquisitions: u32,
    #[serde(default)]
    pub noise_floor: f64,
}

impl TraceRecord {
    pub fn snr(&self) -> Option<f64> {
        self.rss.map(|r| r - self.noise_floor)
    }
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> std::io::Result<Vec<T>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

pub const CSV_HEADER: &str =
    "t,policy,state,tx_beam,rx_beam,rss,oracle_rss,probes_this_epoch,throughput,blockage_active,reacquisitions";
/// Header used when no record carries protocol state.
pub const CSV_HEADER_STATELESS: &str = "t,policy,tx_beam,rx_beam,rss,oracle_rss,probes_this_epoch,throughput,blockage_active";

/// The `state` and `reacquisitions` columns appear only if some record has a state.
pub fn write_csv(mut w: impl Write, records: &[TraceRecord]) -> std::io::Result<()> {
    let stateful = records.iter().any(|r| r.state.is_some());
    writeln!(w, "{}", if stateful { CSV_HEADER } else { CSV_HEADER_STATELESS })?;
    for r in records {
        let rss = r.rss.map(|v| v.to_string()).unwrap_or_default();
        let state = if stateful {
            format!(",{}", r.state.map(|s| format!("{s:?}")).unwrap_or_default())
        } else {
            String::new()
        };
        write!(
            w,
            "{},{}{state},{},{},{},{},{},{},{}",
            r.t, r.policy, r.tx_beam, r.rx_beam, rss, r.oracle_rss, r.probes_this_epoch, r.throughput, r.blockage_active
        )?;
        if stateful {
            write!(w, ",{}", r.reacquisitions)?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Violation counts from the post-run consistency checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Records whose RSS exceeds the oracle at the same instant.
    pub envelope: usize,
    /// Transitions outside the allowed edge set.
    pub illegal_transitions: usize,
    /// Actions that start before the previous one finished.
    pub overlapping_actions: usize,
    /// Epochs whose charged airtime exceeds the epoch length.
    pub epoch_overruns: usize,
    /// Realignment events that used more neighbor probes than allowed.
    pub probe_bound: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        *self == Self::default()
    }
}

/// Output of one scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<TraceRecord>,
    pub transitions: Vec<TransitionRecord>,
    pub acquisition_failed: bool,
    #[serde(default)]
    pub audit: AuditReport,
}

impl SimulationTrace {
    pub fn policy(&self, p: Policy) -> Vec<TraceRecord> {
        self.records.iter().filter(|r| r.policy == p).cloned().collect()
    }

    pub fn policies(&self) -> Vec<Policy> {
        let mut v: Vec<Policy> = self.records.iter().map(|r| r.policy).collect();
        v.sort();
        v.dedup();
        v
    }
}
