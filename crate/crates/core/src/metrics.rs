//! Post-run analysis: beam coherence time, deviation from the oracle,
//! blockage recovery, throughput and distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProtocolState;
use crate::trace::TraceRecord;

/// Drop from the series maximum that ends a coherence interval, dB.
pub const BCT_DROP_DB: f64 = 3.0;
pub const WITHIN_DB: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("trace has no records with an oracle value")]
    MissingOracle,
    #[error("trace contains no blockage events")]
    NoBlockageEvents,
    #[error("MCS ladder is empty")]
    EmptyLadder,
    #[error("MCS ladder thresholds must be non-decreasing")]
    UnsortedLadder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bct {
    Finite(f64),
    Unbounded,
}

impl Bct {
    pub fn ms(self) -> Option<f64> {
        match self {
            Bct::Finite(v) => Some(v),
            Bct::Unbounded => None,
        }
    }
}

/// Time from the series maximum to the first point more than 3 dB below it,
/// linearly interpolated to the exact crossing.
pub fn compute_bct(series: &[(f64, f64)]) -> Result<Bct, MetricsError> {
    let (peak_i, &(t0, peak)) = series
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, &(f64, f64))>, (i, s)| match best {
            Some((_, b)) if b.1 >= s.1 => best,
            _ => Some((i, s)),
        })
        .ok_or(MetricsError::EmptySeries)?;
    let level = peak - BCT_DROP_DB;
    for w in series[peak_i..].windows(2) {
        let ((ta, ra), (tb, rb)) = (w[0], w[1]);
        if rb < level {
            let frac = if ra > rb { (ra - level) / (ra - rb) } else { 1.0 };
            return Ok(Bct::Finite(ta + frac * (tb - ta) - t0));
        }
    }
    Ok(Bct::Unbounded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub mean: f64,
    pub std: f64,
    pub fraction_within_3db: f64,
    pub epochs: usize,
}

/// Per-epoch `oracle_rss - rss`. Epochs without a link count against the
/// within-3 dB fraction and are left out of the mean and spread.
pub fn oracle_deviation(records: &[TraceRecord]) -> Result<Deviation, MetricsError> {
    let oracle: Vec<&TraceRecord> = records.iter().filter(|r| r.oracle_rss.is_finite()).collect();
    if oracle.is_empty() {
        return Err(MetricsError::MissingOracle);
    }
    let devs: Vec<f64> = oracle
        .iter()
        .filter_map(|r| r.rss.map(|rss| r.oracle_rss - rss))
        .collect();
    let within = devs.iter().filter(|d| **d <= WITHIN_DB).count();
    let (mean, std) = mean_std(&devs);
    Ok(Deviation {
        mean,
        std,
        fraction_within_3db: within as f64 / oracle.len() as f64,
        epochs: oracle.len(),
    })
}

/// Population mean and standard deviation; zeros for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A maximal run of records with the LoS path blocked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockageEvent {
    pub start: f64,
    pub end: f64,
    /// RSS of the last record before the blockage.
    pub pre_blockage_rss: Option<f64>,
    /// Median RSS over the interior of the blockage.
    pub nlos_rss: Option<f64>,
    pub failed: bool,
    /// Time until the link was back within the NLoS tolerance, ms.
    pub recovery_ms: Option<f64>,
}

impl BlockageEvent {
    pub fn nlos_drop(&self) -> Option<f64> {
        Some(self.pre_blockage_rss? - self.nlos_rss?)
    }
}

/// Shortfall from the pre-blockage RSS still counted as recovered, dB.
pub const RECOVERY_TOLERANCE_DB: f64 = 11.0;

/// Extracts blockage events from one policy's records. An event fails when
/// the link enters re-acquisition or drops below `control_snr_db` while blocked.
pub fn blockage_events(records: &[TraceRecord], control_snr_db: f64) -> Vec<BlockageEvent> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < records.len() {
        if !records[i].blockage_active {
            i += 1;
            continue;
        }
        let start = i;
        while i < records.len() && records[i].blockage_active {
            i += 1;
        }
        let run = &records[start..i];
        let pre = start.checked_sub(1).and_then(|p| records[p].rss);
        let failed = run.iter().any(|r| {
            r.reacquisitions > 0
                || r.state == Some(ProtocolState::AR)
                || r.snr().is_none_or(|s| s < control_snr_db)
        });
        let interior = if run.len() >= 3 { &run[1..run.len() - 1] } else { run };
        let mut vals: Vec<f64> = interior.iter().filter_map(|r| r.rss).collect();
        let nlos = median(&mut vals);
        let recovery_ms = pre.and_then(|p| {
            run.iter()
                .find(|r| r.rss.is_some_and(|v| v >= p - RECOVERY_TOLERANCE_DB))
                .map(|r| r.t - run[0].t)
        });
        out.push(BlockageEvent {
            start: run[0].t,
            end: run[run.len() - 1].t,
            pre_blockage_rss: pre,
            nlos_rss: nlos,
            failed,
            recovery_ms,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub events: usize,
    pub failures: usize,
    pub recoveries: usize,
    pub failure_rate: f64,
    pub mean_recovery_ms: Option<f64>,
}

pub fn recovery_stats(events: &[BlockageEvent]) -> Result<RecoveryStats, MetricsError> {
    if events.is_empty() {
        return Err(MetricsError::NoBlockageEvents);
    }
    let failures = events.iter().filter(|e| e.failed).count();
    let times: Vec<f64> = events
        .iter()
        .filter(|e| !e.failed)
        .filter_map(|e| e.recovery_ms)
        .collect();
    Ok(RecoveryStats {
        events: events.len(),
        failures,
        recoveries: events.len() - failures,
        failure_rate: failures as f64 / events.len() as f64,
        mean_recovery_ms: (!times.is_empty()).then(|| mean_std(&times).0),
    })
}

/// SNR threshold (dB) to data rate (bit/s) step table, closed below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsLadder {
    pub steps: Vec<(f64, f64)>,
}

impl Default for McsLadder {
    fn default() -> Self {
        Self {
            steps: vec![
                (5.0, 0.25e9),
                (8.0, 0.5e9),
                (11.0, 1.0e9),
                (13.0, 1.4e9),
                (15.0, 2.0e9),
            ],
        }
    }
}

impl McsLadder {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.steps.is_empty() {
            return Err(MetricsError::EmptyLadder);
        }
        if self.steps.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
            return Err(MetricsError::UnsortedLadder);
        }
        Ok(())
    }

    pub fn top_rate(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.1)
    }
}

/// Highest rate whose threshold is at or below `snr`; 0 below the ladder.
pub fn throughput(snr: f64, ladder: &McsLadder) -> Result<f64, MetricsError> {
    ladder.validate()?;
    Ok(ladder
        .steps
        .iter()
        .rev()
        .find(|(th, _)| snr >= *th)
        .map_or(0.0, |(_, rate)| *rate))
}

/// Empirical CDF: sorted values paired with `i / n`, i = 1..=n.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// Median (mean of the middle pair for even counts); sorts in place.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Median throughput of a set of records, bit/s.
pub fn median_throughput(records: &[TraceRecord]) -> Option<f64> {
    let mut v: Vec<f64> = records.iter().map(|r| r.throughput).collect();
    median(&mut v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Policy;
    use proptest::prelude::*;

    fn rec(t: f64, rss: Option<f64>, oracle: f64, blocked: bool) -> TraceRecord {
        TraceRecord {
            t,
            policy: Policy::Beamsurfer,
            state: Some(ProtocolState::NOp),
            tx_beam: 0,
            rx_beam: 0,
            rss,
            oracle_rss: oracle,
            probes_this_epoch: 0,
            throughput: 0.0,
            blockage_active: blocked,
            reacquisitions: 0,
            noise_floor: -74.0,
        }
    }

    #[test]
    fn bct_examples() {
        let flat: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64 * 10.0, -51.0)).collect();
        assert_eq!(compute_bct(&flat).unwrap(), Bct::Unbounded);
        let decay: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64 * 10.0, -51.0 - 0.1 * i as f64)).collect();
        let v = compute_bct(&decay).unwrap().ms().unwrap();
        assert!((v - 300.0).abs() < 1e-6, "{v}");
        let crossing = vec![(0.0, -51.0), (470.0, -53.94), (480.0, -54.04)];
        let v = compute_bct(&crossing).unwrap().ms().unwrap();
        assert!((v - 476.0).abs() < 1e-6, "{v}");
        assert_eq!(compute_bct(&[]), Err(MetricsError::EmptySeries));
    }

    #[test]
    fn bct_starts_at_the_maximum() {
        let s = vec![(0.0, -55.0), (100.0, -50.0), (200.0, -52.0), (300.0, -54.0)];
        let v = compute_bct(&s).unwrap().ms().unwrap();
        assert!((v - 150.0).abs() < 1e-9);
    }

    #[test]
    fn deviation_examples() {
        let same = vec![rec(0.0, Some(-51.0), -51.0, false); 4];
        let d = oracle_deviation(&same).unwrap();
        assert_eq!((d.mean, d.fraction_within_3db), (0.0, 1.0));
        let two = vec![rec(0.0, Some(-52.0), -51.0, false), rec(1.0, Some(-54.0), -51.0, false)];
        let d = oracle_deviation(&two).unwrap();
        assert!((d.mean - 2.0).abs() < 1e-12);
        assert!((d.std - 1.0).abs() < 1e-12);
        assert_eq!(d.fraction_within_3db, 1.0);
        let lost = vec![rec(0.0, None, -51.0, false), rec(1.0, Some(-51.0), -51.0, false)];
        assert_eq!(oracle_deviation(&lost).unwrap().fraction_within_3db, 0.5);
        assert_eq!(
            oracle_deviation(&[rec(0.0, Some(-51.0), f64::NAN, false)]),
            Err(MetricsError::MissingOracle)
        );
    }

    #[test]
    fn throughput_examples() {
        let l = McsLadder::default();
        assert_eq!(throughput(20.0, &l).unwrap(), 2e9);
        assert_eq!(throughput(4.99, &l).unwrap(), 0.0);
        assert_eq!(throughput(13.0, &l).unwrap(), 1.4e9);
        assert_eq!(throughput(12.99, &l).unwrap(), 1.0e9);
        assert_eq!(throughput(5.0, &l).unwrap(), 0.25e9);
        assert_eq!(
            throughput(10.0, &McsLadder { steps: vec![] }),
            Err(MetricsError::EmptyLadder)
        );
    }

    #[test]
    fn blockage_event_extraction() {
        let mut rs = vec![rec(0.0, Some(-51.0), -51.0, false)];
        for i in 1..=5 {
            rs.push(rec(i as f64 * 100.0, Some(-60.0), -59.5, true));
        }
        rs.push(rec(600.0, Some(-51.0), -51.0, false));
        let ev = blockage_events(&rs, 0.0);
        assert_eq!(ev.len(), 1);
        assert!(!ev[0].failed);
        assert_eq!(ev[0].nlos_drop(), Some(9.0));
        assert_eq!(ev[0].recovery_ms, Some(0.0));
        let stats = recovery_stats(&ev).unwrap();
        assert_eq!((stats.events, stats.failures), (1, 0));

        rs[3].rss = None;
        rs[3].state = Some(ProtocolState::AR);
        let ev = blockage_events(&rs, 0.0);
        assert!(ev[0].failed);
        assert_eq!(recovery_stats(&ev).unwrap().failure_rate, 1.0);
        assert_eq!(recovery_stats(&[]), Err(MetricsError::NoBlockageEvents));
    }

    #[test]
    fn median_of_symmetric_sample_is_center() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(median(&mut v), Some(3.0));
        let c = cdf(&[3.0, 1.0, 2.0]);
        assert_eq!(c, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
    }

    proptest! {
        #[test]
        fn bct_is_offset_invariant(
            vals in proptest::collection::vec(-80.0f64..-40.0, 1..60),
            offset in -30.0f64..30.0,
        ) {
            let a: Vec<(f64, f64)> = vals.iter().enumerate().map(|(i, v)| (i as f64 * 10.0, *v)).collect();
            let b: Vec<(f64, f64)> = a.iter().map(|(t, v)| (*t, v + offset)).collect();
            match (compute_bct(&a).unwrap(), compute_bct(&b).unwrap()) {
                (Bct::Finite(x), Bct::Finite(y)) => prop_assert!((x - y).abs() < 1e-6),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn cdf_is_monotone(vals in proptest::collection::vec(-1e3f64..1e3, 1..100)) {
            let c = cdf(&vals);
            for w in c.windows(2) {
                prop_assert!(w[0].0 <= w[1].0);
                prop_assert!(w[0].1 < w[1].1);
            }
            prop_assert_eq!(c.last().unwrap().1, 1.0);
        }

        #[test]
        fn deviation_non_negative_under_envelope(
            pairs in proptest::collection::vec((-80.0f64..-40.0, 0.0f64..20.0), 1..50)
        ) {
            let rs: Vec<TraceRecord> = pairs.iter().enumerate()
                .map(|(i, (o, gap))| rec(i as f64, Some(o - gap), *o, false)).collect();
            let d = oracle_deviation(&rs).unwrap();
            prop_assert!(d.mean >= 0.0);
        }

        #[test]
        fn symmetric_sample_median(center in -100.0f64..100.0, spread in proptest::collection::vec(0.0f64..50.0, 1..30)) {
            let mut v: Vec<f64> = spread.iter().flat_map(|s| [center - s, center + s]).collect();
            prop_assert!((median(&mut v).unwrap() - center).abs() < 1e-9);
        }
    }
}
