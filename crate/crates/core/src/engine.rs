//! Frame-clocked simulation of every configured policy over one scenario.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::baselines::{acquisition_sweep, exhaustive_search, link_decoder, oracle_best_pair, SsbSchedule};
use crate::channel::Link;
use crate::config::Scenario;
use crate::geometry::blockage_attenuation;
use crate::metrics::{throughput, McsLadder};
use crate::motion::MotionModel;
use crate::protocol::{
    audit_transitions, realignment_events, Acquisition, BeamSurfer, LinkMeasure, MeasureError,
    ProtocolContext, ProtocolError, ProtocolState, Tick, TransitionRecord, Wake,
};
use crate::rng::{stream_rng, NOISE, SYNC_OFFSET};
use crate::trace::{AuditReport, Policy, SimulationTrace, TraceRecord};

/// Steps allowed back to back at one instant before the run is declared stuck.
const MAX_CHAINED_STEPS: usize = 64;
const AUDIT_EPS_MS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("protocol did not settle at t = {0} ms")]
    Stuck(f64),
}

fn ms(us: i64) -> f64 {
    us as f64 / 1000.0
}

fn us(ms: f64) -> i64 {
    (ms * 1000.0).round() as i64
}

/// Simulated measurements over a real link, with optional Gaussian noise.
pub struct SimMeasure<'a> {
    link: &'a Link,
    motion: &'a MotionModel,
    ssb: SsbSchedule,
    horizon: f64,
    seed: u64,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
    acquisitions: u64,
}

impl<'a> SimMeasure<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let c = &scenario.config;
        let noise = (c.measurement_noise_db > 0.0).then(|| {
            (
                Normal::new(0.0, c.measurement_noise_db).expect("positive std"),
                stream_rng(c.seed, NOISE, 0),
            )
        });
        Self {
            link: &scenario.link,
            motion: &scenario.motion,
            ssb: c.ssb,
            horizon: c.duration_ms,
            seed: c.seed,
            noise,
            acquisitions: 0,
        }
    }
}

impl LinkMeasure for SimMeasure<'_> {
    fn tx_count(&self) -> usize {
        self.link.tx_codebook.len()
    }

    fn rx_count(&self) -> usize {
        self.link.rx_codebook.len()
    }

    fn distinct_rx(&self, rx_beam: usize, other: usize) -> bool {
        let cb = &self.link.rx_codebook;
        match (cb.beam(rx_beam), cb.beam(other)) {
            (Ok(a), Ok(b)) => (a.boresight - b.boresight).abs() > a.beamwidth.max(b.beamwidth),
            _ => false,
        }
    }

    fn noise_floor(&self) -> f64 {
        self.link.budget.noise_floor
    }

    fn measure(&mut self, tx: usize, rx: usize, at: f64) -> Result<f64, MeasureError> {
        if tx >= self.tx_count() || rx >= self.rx_count() {
            return Err(MeasureError::InvalidPair { tx, rx });
        }
        let rss = self.link.rss(tx, rx, &self.motion.sample_state(at), at).rss;
        let n = self.noise.as_mut().map_or(0.0, |(d, r)| d.sample(r));
        Ok(rss + n)
    }

    fn acquire(&mut self, from: f64) -> Option<Acquisition> {
        let mut rng = stream_rng(self.seed, SYNC_OFFSET, self.acquisitions);
        self.acquisitions += 1;
        let sched = SsbSchedule {
            offset_ms: rng.random_range(0.0..self.ssb.period_ms),
            ..self.ssb
        };
        let decode = link_decoder(self.link, self.motion, &sched);
        acquisition_sweep(from, &sched, self.link.rx_codebook.len(), self.horizon, decode)
            .ok()
            .map(|a| Acquisition {
                at: a.acquired_at,
                tx_beam: a.tx_beam,
                rx_beam: a.rx_beam,
                rss: a.rss,
            })
    }
}

struct Frames {
    frame_us: i64,
    per_epoch: i64,
    count: i64,
}

impl Frames {
    fn new(s: &Scenario) -> Self {
        let frame_us = us(s.config.frame_ms);
        Self {
            frame_us,
            per_epoch: (us(s.config.decision_epoch_ms) / frame_us).max(1),
            count: us(s.config.duration_ms) / frame_us,
        }
    }

    fn epochs(&self) -> impl Iterator<Item = i64> + '_ {
        (0..=self.count)
            .filter(|f| f % self.per_epoch == 0)
            .map(|f| f * self.frame_us)
    }
}

/// Common fields of a record for `(tx, rx)` evaluated at `t`.
fn record(
    s: &Scenario,
    policy: Policy,
    t: f64,
    pair: Option<(usize, usize)>,
    probes: usize,
    ladder: &McsLadder,
) -> (TraceRecord, usize, usize) {
    let state = s.motion.sample_state(t);
    let oracle = oracle_best_pair(&s.link, &state, t);
    let (tx, rx) = pair.unwrap_or((oracle.tx_beam, oracle.rx_beam));
    let snap = s.link.snapshot(&state, t);
    let rss = snap.sample(&s.link.tx_codebook, &s.link.rx_codebook, tx, rx).rss;
    let noise_floor = s.link.budget.noise_floor;
    let blocked = blockage_attenuation(&s.link.env, s.link.env.tx_position, state.position, t) > 0.0;
    (
        TraceRecord {
            t,
            policy,
            state: None,
            tx_beam: tx,
            rx_beam: rx,
            rss: Some(rss),
            oracle_rss: oracle.rss,
            probes_this_epoch: probes,
            throughput: throughput(rss - noise_floor, ladder).unwrap_or(0.0),
            blockage_active: blocked,
            reacquisitions: 0,
            noise_floor,
        },
        oracle.tx_beam,
        oracle.rx_beam,
    )
}

fn run_oracle(s: &Scenario) -> Vec<TraceRecord> {
    let ladder = &s.config.mcs_ladder;
    Frames::new(s)
        .epochs()
        .map(|t| record(s, Policy::Oracle, ms(t), None, 0, ladder).0)
        .collect()
}

fn run_static(s: &Scenario) -> Vec<TraceRecord> {
    let ladder = &s.config.mcs_ladder;
    let init = oracle_best_pair(&s.link, &s.motion.sample_state(0.0), 0.0);
    let pair = Some((init.tx_beam, init.rx_beam));
    Frames::new(s)
        .epochs()
        .map(|t| record(s, Policy::Static, ms(t), pair, 0, ladder).0)
        .collect()
}

fn run_exhaustive(s: &Scenario) -> Vec<TraceRecord> {
    let ladder = &s.config.mcs_ladder;
    let slot = s.config.protocol.probe_slot_ms;
    let sigma = s.config.measurement_noise_db;
    let mut rng = stream_rng(s.config.seed, NOISE, 1);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("non-negative std");
    Frames::new(s)
        .epochs()
        .map(|t| {
            let t = ms(t);
            let (choice, elapsed) = exhaustive_search(&s.link, &s.motion, t, slot, || {
                if sigma > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                }
            });
            let at = ms(us(t + elapsed));
            let pair = Some((choice.tx_beam, choice.rx_beam));
            record(s, Policy::Exhaustive, at, pair, choice.evaluations, ladder).0
        })
        .collect()
}

struct ProtocolRun {
    records: Vec<TraceRecord>,
    transitions: Vec<TransitionRecord>,
    acquisition_failed: bool,
}

fn run_beamsurfer(s: &Scenario) -> Result<ProtocolRun, EngineError> {
    let ladder = &s.config.mcs_ladder;
    let frames = Frames::new(s);
    let init = oracle_best_pair(&s.link, &s.motion.sample_state(0.0), 0.0);
    let mut bs = BeamSurfer::new(
        s.config.protocol.clone(),
        ProtocolContext::aligned(init.tx_beam, init.rx_beam, init.rss, 0.0),
    );
    let mut measure = SimMeasure::new(s);
    let mut out = ProtocolRun {
        records: Vec::new(),
        transitions: Vec::new(),
        acquisition_failed: false,
    };
    let mut busy_until = 0i64;
    let mut probes = 0usize;
    let mut reacq = 0u32;

    for f in 0..=frames.count {
        let now = f * frames.frame_us;
        let tick = if f % frames.per_epoch == 0 { Tick::Epoch } else { Tick::Frame };
        let mut eval = now;
        if now >= busy_until && bs.ready(ms(now), tick) {
            let mut t = now;
            let mut chained = 0;
            loop {
                let step = bs.step(ms(t), tick, &mut measure)?;
                let r = &step.record;
                probes += r.actions.iter().filter_map(|a| a.probes).map(|(n, _)| n).sum::<usize>();
                if r.state_after == ProtocolState::AR && r.state_before != ProtocolState::AR {
                    reacq += 1;
                }
                if r.state_after == ProtocolState::AR && step.wake == Wake::Never {
                    out.acquisition_failed = true;
                }
                t = t.max(us(r.done_at));
                out.transitions.push(step.record);
                if step.wake != Wake::Immediate {
                    break;
                }
                chained += 1;
                if chained >= MAX_CHAINED_STEPS {
                    return Err(EngineError::Stuck(ms(now)));
                }
            }
            busy_until = t;
            eval = t;
        }
        if tick != Tick::Epoch {
            continue;
        }
        let pair = Some((bs.ctx.tx_beam, bs.ctx.rx_beam));
        let (mut rec, _, _) = record(s, Policy::Beamsurfer, ms(eval), pair, probes, ladder);
        rec.state = Some(bs.state());
        rec.reacquisitions = reacq;
        if bs.state() == ProtocolState::AR {
            rec.rss = None;
            rec.throughput = 0.0;
        }
        out.records.push(rec);
        probes = 0;
        reacq = 0;
    }
    Ok(out)
}

/// Runs every configured policy over the scenario.
pub fn run(s: &Scenario) -> Result<SimulationTrace, EngineError> {
    let mut trace = SimulationTrace {
        config_hash: s.config_hash.clone(),
        seed: s.config.seed,
        records: Vec::new(),
        transitions: Vec::new(),
        acquisition_failed: false,
        audit: AuditReport::default(),
    };
    let mut policies = s.config.policies.clone();
    policies.sort();
    policies.dedup();
    for p in policies {
        match p {
            Policy::Beamsurfer => {
                let r = run_beamsurfer(s)?;
                trace.records.extend(r.records);
                trace.transitions = r.transitions;
                trace.acquisition_failed = r.acquisition_failed;
            }
            Policy::Oracle => trace.records.extend(run_oracle(s)),
            Policy::Exhaustive => trace.records.extend(run_exhaustive(s)),
            Policy::Static => trace.records.extend(run_static(s)),
        }
    }
    trace.audit = audit(&trace, s.config.decision_epoch_ms, s.config.protocol.neighbor_bound);
    Ok(trace)
}

/// Consistency checks over a finished trace.
pub fn audit(trace: &SimulationTrace, epoch_ms: f64, neighbor_bound: usize) -> AuditReport {
    let envelope = trace
        .records
        .iter()
        .filter(|r| r.rss.is_some_and(|v| v > r.oracle_rss + 1e-9))
        .count();
    let illegal_transitions = audit_transitions(&trace.transitions).err().map_or(0, |v| v.len());

    let actions: Vec<_> = trace.transitions.iter().flat_map(|r| r.actions.iter()).collect();
    let overlapping_actions = actions
        .windows(2)
        .filter(|w| w[1].at + AUDIT_EPS_MS < w[0].at + w[0].cost)
        .count();

    let mut per_epoch = std::collections::BTreeMap::<i64, f64>::new();
    for a in &actions {
        *per_epoch.entry((a.at / epoch_ms).floor() as i64).or_default() += a.cost;
    }
    let epoch_overruns = per_epoch.values().filter(|&&c| c > epoch_ms + AUDIT_EPS_MS).count();

    let probe_bound = realignment_events(&trace.transitions)
        .iter()
        .filter(|e| e.neighbor_probes > e.probe_bound(neighbor_bound))
        .count();

    AuditReport {
        envelope,
        illegal_transitions,
        overlapping_actions,
        epoch_overruns,
        probe_bound,
    }
}
