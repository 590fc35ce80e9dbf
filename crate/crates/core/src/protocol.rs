//! The beam-surfing state machine.
//!
//! The machine is driven externally: the engine calls [`BeamSurfer::step`]
//! whenever the machine's [`Wake`] condition is met. Each call performs the
//! work of the current state, charges simulated time for every action, and
//! reports exactly one transition.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolState {
    NOp,
    RBA,
    TBA,
    BR,
    NLoSBO,
    AR,
}

impl ProtocolState {
    pub const ALL: [ProtocolState; 6] = [
        ProtocolState::NOp,
        ProtocolState::RBA,
        ProtocolState::TBA,
        ProtocolState::BR,
        ProtocolState::NLoSBO,
        ProtocolState::AR,
    ];
}

impl fmt::Display for ProtocolState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProtocolState::NOp => "N.Op",
            ProtocolState::RBA => "RBA",
            ProtocolState::TBA => "TBA",
            ProtocolState::BR => "BR",
            ProtocolState::NLoSBO => "NLoS-BO",
            ProtocolState::AR => "A/R",
        };
        f.write_str(s)
    }
}

/// Every transition the machine may take.
pub const EDGES: &[(ProtocolState, ProtocolState)] = {
    use ProtocolState::*;
    &[
        (NOp, NOp),
        (NOp, RBA),
        (NOp, BR),
        (NOp, NLoSBO),
        (RBA, NOp),
        (RBA, TBA),
        (TBA, TBA),
        (TBA, NOp),
        (TBA, AR),
        (BR, NOp),
        (BR, NLoSBO),
        (BR, AR),
        (NLoSBO, NLoSBO),
        (NLoSBO, NOp),
        (NLoSBO, AR),
        (AR, AR),
        (AR, NOp),
    ]
};

pub fn is_edge(from: ProtocolState, to: ProtocolState) -> bool {
    EDGES.contains(&(from, to))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub frame_ms: f64,
    pub probe_slot_ms: f64,
    pub control_rtt_ms: f64,
    /// Drop from the reference that triggers receive-beam adaptation, dB.
    pub rx_drop_db: f64,
    /// Drop from the reference treated as blockage, dB.
    pub blockage_drop_db: f64,
    /// Largest tolerated shortfall while operating on a reflected path, dB.
    pub nlos_floor_db: f64,
    pub tba_timeout_ms: f64,
    pub nlos_max_age_ms: f64,
    pub br_period_ms: f64,
    /// Consecutive failed control exchanges tolerated in NLoS operation.
    pub control_patience: u32,
    /// SNR needed for a control packet to get through, dB.
    pub control_snr_db: f64,
    /// Check every frame, not only every sample, for a blockage-sized drop.
    pub frame_blockage_check: bool,
    pub neighbor_bound: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            frame_ms: 10.0,
            probe_slot_ms: 0.1,
            control_rtt_ms: 10.0,
            rx_drop_db: 3.0,
            blockage_drop_db: 10.0,
            nlos_floor_db: 10.0,
            tba_timeout_ms: 6000.0,
            nlos_max_age_ms: 100.0,
            br_period_ms: 100.0,
            control_patience: 3,
            control_snr_db: 0.0,
            frame_blockage_check: true,
            neighbor_bound: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredBeam {
    pub rx_beam: usize,
    pub rss: f64,
    pub stored_at: f64,
}

/// When the engine should call `step` next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Wake {
    /// Continue at the completion time of the last step.
    Immediate,
    /// Next frame boundary.
    Frame,
    /// Next decision epoch.
    Epoch,
    /// Not before the given time, ms.
    At(f64),
    /// Never; the link could not be re-acquired.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tick {
    Epoch,
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BrMode {
    Periodic,
    Blockage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolContext {
    pub state: ProtocolState,
    pub tx_beam: usize,
    pub rx_beam: usize,
    pub rss_current_rb: f64,
    pub stored_nlos: Option<StoredBeam>,
    pub tba_entered_at: Option<f64>,
    /// Start of the current run of samples more than the NLoS floor below the reference.
    pub low_since: Option<f64>,
    pub last_sample_at: f64,
    pub last_br_scan_at: f64,
    pub synchronized: bool,
    pub control_failures: u32,
    pub wake: Wake,
    pub br_mode: BrMode,
    /// TX beam changed since the last BR scan.
    pub tx_changed: bool,
    /// Realignment event in progress and whether its neighbor phase ran.
    pub event: Option<u64>,
    pub neighbor_phase_done: bool,
    pub next_event_id: u64,
    pub pending_acquisition: Option<Acquisition>,
}

impl ProtocolContext {
    /// Aligned on `(tx_beam, rx_beam)` with reference `rss` at time `t`.
    pub fn aligned(tx_beam: usize, rx_beam: usize, rss: f64, t: f64) -> Self {
        Self {
            state: ProtocolState::NOp,
            tx_beam,
            rx_beam,
            rss_current_rb: rss,
            stored_nlos: None,
            tba_entered_at: None,
            low_since: None,
            last_sample_at: t,
            last_br_scan_at: f64::NEG_INFINITY,
            synchronized: true,
            control_failures: 0,
            wake: Wake::Frame,
            br_mode: BrMode::Periodic,
            tx_changed: true,
            event: None,
            neighbor_phase_done: false,
            next_event_id: 0,
            pending_acquisition: None,
        }
    }

    /// Stored NLoS beam if it is fresh enough to use at `now`.
    pub fn fresh_nlos(&self, now: f64, max_age: f64) -> Option<StoredBeam> {
        self.stored_nlos.filter(|s| now - s.stored_at <= max_age)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeClass {
    /// Neighbor-phase probe bounded by the per-event budget.
    Neighbor,
    /// Full receive scan during a search fallback.
    FullScan,
    /// Reconnaissance scan for a reflected beam.
    Recon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    SampleRss,
    ProbeRxBeam(usize),
    SwitchRxBeam(usize),
    SwitchTxBeam(usize),
    RequestTxAdaptation,
    ProbeTxBeam(usize),
    ScanAllRxBeams,
    StoreNlosBeam(usize),
    SendControlPacket,
    EnterReacquisition,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at: f64,
    /// Airtime consumed, ms.
    pub cost: f64,
    pub action: Action,
    /// Number of RSS probes consumed and how they count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<(usize, ProbeClass)>,
}

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: f64,
    pub done_at: f64,
    pub state_before: ProtocolState,
    pub state_after: ProtocolState,
    pub actions: Vec<TimedAction>,
    pub rss: Option<f64>,
    pub tx_beam: usize,
    pub rx_beam: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<u64>,
}

impl TransitionRecord {
    pub fn probes(&self, class: ProbeClass) -> usize {
        self.actions
            .iter()
            .filter_map(|a| a.probes)
            .filter(|(_, c)| *c == class)
            .map(|(n, _)| n)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub at: f64,
    pub tx_beam: usize,
    pub rx_beam: usize,
    pub rss: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("beam pair ({tx}, {rx}) is not in the codebooks")]
    InvalidPair { tx: usize, rx: usize },
    #[error("no measurement available at {0} ms")]
    Unavailable(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("measurement fault at {at} ms: {source}")]
    MeasurementFault { at: f64, source: MeasureError },
    #[error("realignment event {0} not found")]
    EventNotFound(u64),
    #[error("transition {0} -> {1} is not an allowed edge")]
    IllegalTransition(ProtocolState, ProtocolState),
}

/// Source of RSS measurements for the state machine.
pub trait LinkMeasure {
    fn tx_count(&self) -> usize;
    fn rx_count(&self) -> usize;
    /// RX beams far enough from `rx_beam` to be a different propagation path.
    fn distinct_rx(&self, rx_beam: usize, other: usize) -> bool;
    fn noise_floor(&self) -> f64;
    fn measure(&mut self, tx: usize, rx: usize, at: f64) -> Result<f64, MeasureError>;
    /// Runs the acquisition sweep starting at `from`.
    fn acquire(&mut self, from: f64) -> Option<Acquisition>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Probe {
    tx: usize,
    rx: usize,
    rss: f64,
}

/// Strictly stronger, or equal with the lower (tx, rx) index.
fn better(a: &Probe, b: &Probe) -> bool {
    a.rss > b.rss || (a.rss == b.rss && (a.tx, a.rx) < (b.tx, b.rx))
}

fn pick(best: &mut Option<Probe>, p: Probe) {
    if best.as_ref().is_none_or(|b| better(&p, b)) {
        *best = Some(p);
    }
}

/// Result of one `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub record: TransitionRecord,
    pub wake: Wake,
}

/// Scratch state for one step: a clock and the actions charged so far.
struct Run<'m> {
    clock_us: i64,
    actions: Vec<TimedAction>,
    measure: &'m mut dyn LinkMeasure,
    slot: f64,
    last_rss: Option<f64>,
}

fn to_us(ms: f64) -> i64 {
    (ms * 1000.0).round() as i64
}

impl Run<'_> {
    fn clock(&self) -> f64 {
        self.clock_us as f64 / 1000.0
    }

    fn advance(&mut self, ms: f64) {
        self.clock_us += to_us(ms);
    }

    fn act(&mut self, action: Action, cost: f64) {
        self.actions.push(TimedAction {
            at: self.clock(),
            cost,
            action,
            probes: None,
        });
        self.advance(cost);
    }

    fn read(&mut self, tx: usize, rx: usize) -> Result<f64, ProtocolError> {
        self.measure
            .measure(tx, rx, self.clock())
            .map_err(|source| ProtocolError::MeasurementFault {
                at: self.clock(),
                source,
            })
    }

    fn sample(&mut self, tx: usize, rx: usize) -> Result<f64, ProtocolError> {
        let rss = self.read(tx, rx)?;
        self.act(Action::SampleRss, 0.0);
        self.last_rss = Some(rss);
        Ok(rss)
    }

    fn probe(&mut self, tx: usize, rx: usize, class: ProbeClass) -> Result<Probe, ProtocolError> {
        let rss = self.read(tx, rx)?;
        self.actions.push(TimedAction {
            at: self.clock(),
            cost: self.slot,
            action: Action::ProbeRxBeam(rx),
            probes: Some((1, class)),
        });
        self.advance(self.slot);
        Ok(Probe { tx, rx, rss })
    }

    fn scan(&mut self, tx: usize, class: ProbeClass) -> Result<Vec<Probe>, ProtocolError> {
        let start_us = self.clock_us;
        let start = self.clock();
        let n = self.measure.rx_count();
        let mut out = Vec::with_capacity(n);
        for rx in 0..n {
            let at = (start_us + rx as i64 * to_us(self.slot)) as f64 / 1000.0;
            let rss = self
                .measure
                .measure(tx, rx, at)
                .map_err(|source| ProtocolError::MeasurementFault { at, source })?;
            out.push(Probe { tx, rx, rss });
        }
        let cost = (n as i64 * to_us(self.slot)) as f64 / 1000.0;
        self.actions.push(TimedAction {
            at: start,
            cost,
            action: Action::ScanAllRxBeams,
            probes: Some((n, class)),
        });
        self.advance(cost);
        Ok(out)
    }
}

fn neighbor_indices(index: usize, count: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(2);
    if index > 0 {
        v.push(index - 1);
    }
    if index + 1 < count {
        v.push(index + 1);
    }
    v
}

/// The protocol state machine with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamSurfer {
    pub config: ProtocolConfig,
    pub ctx: ProtocolContext,
}

impl BeamSurfer {
    pub fn new(config: ProtocolConfig, ctx: ProtocolContext) -> Self {
        Self { config, ctx }
    }

    pub fn state(&self) -> ProtocolState {
        self.ctx.state
    }

    /// Whether a call at `now` with `tick` satisfies the wake condition.
    pub fn ready(&self, now: f64, tick: Tick) -> bool {
        match self.ctx.wake {
            Wake::Immediate | Wake::Frame => true,
            Wake::Epoch => tick == Tick::Epoch,
            Wake::At(t) => now >= t,
            Wake::Never => false,
        }
    }

    /// Runs the current state's logic at `now`.
    pub fn step(
        &mut self,
        now: f64,
        tick: Tick,
        measure: &mut dyn LinkMeasure,
    ) -> Result<Step, ProtocolError> {
        let before = self.ctx.state;
        let slot = self.config.probe_slot_ms;
        let mut run = Run {
            clock_us: to_us(now),
            actions: Vec::new(),
            measure,
            slot,
            last_rss: None,
        };
        let (after, wake) = match before {
            ProtocolState::NOp => self.normal(&mut run, tick)?,
            ProtocolState::RBA => self.rx_adaptation(&mut run)?,
            ProtocolState::TBA => self.tx_adaptation(&mut run)?,
            ProtocolState::BR => self.recon(&mut run)?,
            ProtocolState::NLoSBO => self.nlos(&mut run)?,
            ProtocolState::AR => self.reacquire(&mut run)?,
        };
        debug_assert!(is_edge(before, after), "{before} -> {after}");
        if !is_edge(before, after) {
            return Err(ProtocolError::IllegalTransition(before, after));
        }
        let event = self.ctx.event;
        if after == ProtocolState::NOp && before != ProtocolState::NOp {
            self.ctx.event = None;
            self.ctx.neighbor_phase_done = false;
            self.ctx.tba_entered_at = None;
            self.ctx.low_since = None;
        }
        self.ctx.state = after;
        self.ctx.wake = wake;
        let done_at = run.clock();
        let actions = if run.actions.is_empty() {
            vec![TimedAction {
                at: now,
                cost: 0.0,
                action: Action::None,
                probes: None,
            }]
        } else {
            run.actions
        };
        Ok(Step {
            record: TransitionRecord {
                t: now,
                done_at,
                state_before: before,
                state_after: after,
                actions,
                rss: run.last_rss,
                tx_beam: self.ctx.tx_beam,
                rx_beam: self.ctx.rx_beam,
                event,
            },
            wake,
        })
    }

    fn start_event(&mut self) {
        if self.ctx.event.is_none() {
            self.ctx.event = Some(self.ctx.next_event_id);
            self.ctx.next_event_id += 1;
            self.ctx.neighbor_phase_done = false;
        }
    }

    fn adopt(&mut self, run: &mut Run, p: Probe, reset: bool) {
        if p.tx != self.ctx.tx_beam {
            run.act(Action::SwitchTxBeam(p.tx), 0.0);
            self.ctx.tx_beam = p.tx;
            self.ctx.tx_changed = true;
        }
        if p.rx != self.ctx.rx_beam {
            run.act(Action::SwitchRxBeam(p.rx), 0.0);
            self.ctx.rx_beam = p.rx;
        }
        if reset {
            self.ctx.rss_current_rb = p.rss;
        }
        run.last_rss = Some(p.rss);
    }

    fn blockage(&mut self, run: &mut Run) -> (ProtocolState, Wake) {
        self.start_event();
        let now = run.clock();
        match self.ctx.fresh_nlos(now, self.config.nlos_max_age_ms) {
            Some(stored) => {
                run.act(Action::SwitchRxBeam(stored.rx_beam), 0.0);
                self.ctx.rx_beam = stored.rx_beam;
                self.ctx.control_failures = 0;
                (ProtocolState::NLoSBO, Wake::Immediate)
            }
            None => {
                self.ctx.br_mode = BrMode::Blockage;
                (ProtocolState::BR, Wake::Immediate)
            }
        }
    }

    fn normal(&mut self, run: &mut Run, tick: Tick) -> Result<(ProtocolState, Wake), ProtocolError> {
        let cfg = self.config;
        let (tx, rx) = (self.ctx.tx_beam, self.ctx.rx_beam);
        if tick == Tick::Epoch || cfg.frame_blockage_check {
            let rss = run.sample(tx, rx)?;
            if tick == Tick::Epoch {
                self.ctx.last_sample_at = run.clock();
            }
            let drop = self.ctx.rss_current_rb - rss;
            if drop > cfg.blockage_drop_db {
                return Ok(self.blockage(run));
            }
            if tick == Tick::Epoch && drop > cfg.rx_drop_db {
                self.start_event();
                return Ok((ProtocolState::RBA, Wake::Immediate));
            }
        }
        let due = run.clock() - self.ctx.last_br_scan_at >= cfg.br_period_ms - 1e-9;
        if due || self.ctx.tx_changed {
            self.ctx.br_mode = BrMode::Periodic;
            return Ok((ProtocolState::BR, Wake::Immediate));
        }
        Ok((ProtocolState::NOp, Wake::Frame))
    }

    fn rx_adaptation(&mut self, run: &mut Run) -> Result<(ProtocolState, Wake), ProtocolError> {
        let (tx, k) = (self.ctx.tx_beam, self.ctx.rx_beam);
        let mut best = None;
        for r in neighbor_indices(k, run.measure.rx_count()) {
            let p = run.probe(tx, r, ProbeClass::Neighbor)?;
            pick(&mut best, p);
        }
        if let Some(p) = best {
            if p.rss >= self.ctx.rss_current_rb - self.config.rx_drop_db {
                self.adopt(run, p, true);
                return Ok((ProtocolState::NOp, Wake::Frame));
            }
        }
        Ok((ProtocolState::TBA, Wake::Immediate))
    }

    /// Neighbor phase of a joint search: every TX candidate against the
    /// current RX beam and its neighbors.
    fn neighbor_phase(
        &mut self,
        run: &mut Run,
        include_current_tx: bool,
        best: &mut Option<Probe>,
    ) -> Result<(), ProtocolError> {
        let (n, k) = (self.ctx.tx_beam, self.ctx.rx_beam);
        let rx_n = run.measure.rx_count();
        if include_current_tx {
            for r in neighbor_indices(k, rx_n) {
                let p = run.probe(n, r, ProbeClass::Neighbor)?;
                pick(best, p);
            }
        }
        for c in neighbor_indices(n, run.measure.tx_count()) {
            run.act(Action::ProbeTxBeam(c), 0.0);
            let mut rxs = vec![k];
            rxs.extend(neighbor_indices(k, rx_n));
            for r in rxs {
                let p = run.probe(c, r, ProbeClass::Neighbor)?;
                pick(best, p);
            }
        }
        self.ctx.neighbor_phase_done = true;
        Ok(())
    }

    /// Full receive scans on the current TX beam and its neighbors.
    fn scan_phase(&mut self, run: &mut Run, best: &mut Option<Probe>) -> Result<(), ProtocolError> {
        let n = self.ctx.tx_beam;
        let mut txs = vec![n];
        txs.extend(neighbor_indices(n, run.measure.tx_count()));
        txs.sort_unstable();
        for c in txs {
            run.act(Action::ProbeTxBeam(c), 0.0);
            for p in run.scan(c, ProbeClass::FullScan)? {
                pick(best, p);
            }
        }
        Ok(())
    }

    /// Tracks how long the best available pair has sat below the NLoS floor.
    fn track_low(&mut self, rss: f64, now: f64) {
        if rss < self.ctx.rss_current_rb - self.config.nlos_floor_db {
            self.ctx.low_since.get_or_insert(now);
        } else {
            self.ctx.low_since = None;
        }
    }

    fn control_ok(&mut self, run: &mut Run, action: Action) -> Result<bool, ProtocolError> {
        let rss = run.read(self.ctx.tx_beam, self.ctx.rx_beam)?;
        run.last_rss = Some(rss);
        run.act(action, self.config.control_rtt_ms);
        Ok(rss - run.measure.noise_floor() >= self.config.control_snr_db)
    }

    fn tx_adaptation(&mut self, run: &mut Run) -> Result<(ProtocolState, Wake), ProtocolError> {
        let cfg = self.config;
        let entered = *self.ctx.tba_entered_at.get_or_insert(run.clock());
        let current = Probe {
            tx: self.ctx.tx_beam,
            rx: self.ctx.rx_beam,
            rss: run.read(self.ctx.tx_beam, self.ctx.rx_beam)?,
        };
        if self.control_ok(run, Action::RequestTxAdaptation)? {
            let target = self.ctx.rss_current_rb - cfg.rx_drop_db;
            let mut best = Some(current);
            if !self.ctx.neighbor_phase_done {
                self.neighbor_phase(run, false, &mut best)?;
                if let Some(p) = best.filter(|p| p.rss >= target) {
                    self.adopt(run, p, true);
                    return Ok((ProtocolState::NOp, Wake::Frame));
                }
            }
            self.scan_phase(run, &mut best)?;
            let p = best.expect("current pair is always a candidate");
            if p.rss >= target {
                self.adopt(run, p, true);
                return Ok((ProtocolState::NOp, Wake::Frame));
            }
            self.adopt(run, p, false);
            self.track_low(p.rss, run.clock());
        } else {
            self.track_low(current.rss, run.clock());
        }
        let timed_out = self
            .ctx
            .low_since
            .is_some_and(|since| run.clock() - since >= cfg.tba_timeout_ms);
        if timed_out || run.clock() - entered >= cfg.tba_timeout_ms && self.ctx.low_since.is_some() {
            return Ok(self.enter_ar(run));
        }
        Ok((ProtocolState::TBA, Wake::Epoch))
    }

    fn recon(&mut self, run: &mut Run) -> Result<(ProtocolState, Wake), ProtocolError> {
        let (n, k) = (self.ctx.tx_beam, self.ctx.rx_beam);
        let scan = run.scan(n, ProbeClass::Recon)?;
        self.ctx.last_br_scan_at = run.clock();
        self.ctx.tx_changed = false;
        let mode = self.ctx.br_mode;
        self.ctx.br_mode = BrMode::Periodic;
        let mut overall = None;
        let mut distinct = None;
        for p in &scan {
            pick(&mut overall, *p);
            if run.measure.distinct_rx(k, p.rx) {
                pick(&mut distinct, *p);
            }
        }
        let stored = match mode {
            BrMode::Periodic => distinct.or(overall),
            BrMode::Blockage => overall,
        };
        let Some(stored) = stored else {
            return Ok((ProtocolState::NOp, Wake::Frame));
        };
        run.act(Action::StoreNlosBeam(stored.rx), 0.0);
        self.ctx.stored_nlos = Some(StoredBeam {
            rx_beam: stored.rx,
            rss: stored.rss,
            stored_at: run.clock(),
        });
        match mode {
            BrMode::Periodic => Ok((ProtocolState::NOp, Wake::Frame)),
            BrMode::Blockage => {
                if stored.rss >= self.ctx.rss_current_rb - self.config.nlos_floor_db {
                    self.adopt(run, stored, false);
                    self.ctx.control_failures = 0;
                    Ok((ProtocolState::NLoSBO, Wake::Immediate))
                } else {
                    Ok(self.enter_ar(run))
                }
            }
        }
    }

    fn nlos(&mut self, run: &mut Run) -> Result<(ProtocolState, Wake), ProtocolError> {
        let cfg = self.config;
        if !self.control_ok(run, Action::SendControlPacket)? {
            self.ctx.control_failures += 1;
            if self.ctx.control_failures >= cfg.control_patience {
                return Ok(self.enter_ar(run));
            }
            return Ok((ProtocolState::NLoSBO, Wake::Frame));
        }
        self.ctx.control_failures = 0;
        let mut best = Some(Probe {
            tx: self.ctx.tx_beam,
            rx: self.ctx.rx_beam,
            rss: run.last_rss.expect("control exchange reads the link"),
        });
        let restore = self.ctx.rss_current_rb - cfg.rx_drop_db;
        if !self.ctx.neighbor_phase_done {
            self.neighbor_phase(run, true, &mut best)?;
            if let Some(p) = best.filter(|p| p.rss >= restore) {
                self.adopt(run, p, true);
                return Ok((ProtocolState::NOp, Wake::Frame));
            }
        }
        self.scan_phase(run, &mut best)?;
        let p = best.expect("current pair is always a candidate");
        if p.rss >= restore {
            self.adopt(run, p, true);
            return Ok((ProtocolState::NOp, Wake::Frame));
        }
        if p.rss >= self.ctx.rss_current_rb - cfg.nlos_floor_db {
            self.adopt(run, p, false);
            return Ok((ProtocolState::NLoSBO, Wake::Epoch));
        }
        run.last_rss = Some(p.rss);
        Ok(self.enter_ar(run))
    }

    fn enter_ar(&mut self, run: &mut Run) -> (ProtocolState, Wake) {
        run.act(Action::EnterReacquisition, 0.0);
        self.ctx.synchronized = false;
        self.ctx.pending_acquisition = None;
        (ProtocolState::AR, Wake::Immediate)
    }

    fn reacquire(&mut self, run: &mut Run) -> Result<(ProtocolState, Wake), ProtocolError> {
        if let Some(acq) = self.ctx.pending_acquisition {
            if run.clock() >= acq.at {
                self.ctx.pending_acquisition = None;
                self.ctx.synchronized = true;
                self.ctx.stored_nlos = None;
                let p = Probe {
                    tx: acq.tx_beam,
                    rx: acq.rx_beam,
                    rss: acq.rss,
                };
                self.adopt(run, p, true);
                self.ctx.tx_changed = true;
                return Ok((ProtocolState::NOp, Wake::Frame));
            }
            return Ok((ProtocolState::AR, Wake::At(acq.at)));
        }
        match run.measure.acquire(run.clock()) {
            Some(acq) => {
                self.ctx.pending_acquisition = Some(acq);
                Ok((ProtocolState::AR, Wake::At(acq.at)))
            }
            None => Ok((ProtocolState::AR, Wake::Never)),
        }
    }
}

/// Checks every logged transition against the edge set.
pub fn audit_transitions(log: &[TransitionRecord]) -> Result<(), Vec<(ProtocolState, ProtocolState)>> {
    let bad: Vec<_> = log
        .iter()
        .map(|r| (r.state_before, r.state_after))
        .filter(|(a, b)| !is_edge(*a, *b))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

/// One misalignment, from detection to the return to normal operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealignmentEvent {
    pub id: u64,
    pub start: f64,
    pub end: Option<f64>,
    pub states: Vec<ProtocolState>,
    pub tx_changed: bool,
    pub neighbor_probes: usize,
    pub full_scan_probes: usize,
    pub recon_probes: usize,
}

impl RealignmentEvent {
    /// Resolved by the receive side alone.
    pub fn rx_only(&self) -> bool {
        !self.tx_changed
            && self
                .states
                .iter()
                .all(|s| matches!(s, ProtocolState::NOp | ProtocolState::RBA))
    }

    pub fn probe_bound(&self, neighbor_bound: usize) -> usize {
        if self.rx_only() {
            2
        } else {
            neighbor_bound
        }
    }
}

/// Groups the log into realignment events.
pub fn realignment_events(log: &[TransitionRecord]) -> Vec<RealignmentEvent> {
    let mut events: BTreeMap<u64, RealignmentEvent> = BTreeMap::new();
    let mut last_tx: Option<usize> = None;
    for r in log {
        if let Some(id) = r.event {
            let e = events.entry(id).or_insert_with(|| RealignmentEvent {
                id,
                start: r.t,
                end: None,
                states: Vec::new(),
                tx_changed: false,
                neighbor_probes: 0,
                full_scan_probes: 0,
                recon_probes: 0,
            });
            for s in [r.state_before, r.state_after] {
                if !e.states.contains(&s) {
                    e.states.push(s);
                }
            }
            if last_tx.is_some_and(|tx| tx != r.tx_beam) {
                e.tx_changed = true;
            }
            e.neighbor_probes += r.probes(ProbeClass::Neighbor);
            e.full_scan_probes += r.probes(ProbeClass::FullScan);
            e.recon_probes += r.probes(ProbeClass::Recon);
            if r.state_after == ProtocolState::NOp {
                e.end = Some(r.done_at);
            }
        }
        last_tx = Some(r.tx_beam);
    }
    events.into_values().collect()
}

/// Neighbor-phase probes consumed by event `id`.
pub fn probe_budget(log: &[TransitionRecord], id: u64) -> Result<usize, ProtocolError> {
    realignment_events(log)
        .into_iter()
        .find(|e| e.id == id)
        .map(|e| e.neighbor_probes)
        .ok_or(ProtocolError::EventNotFound(id))
}

/// Neighbor-phase probes of every event that starts inside `[from, to)`.
pub fn window_probe_count(log: &[TransitionRecord], from: f64, to: f64) -> usize {
    realignment_events(log)
        .iter()
        .filter(|e| e.start >= from && e.start < to)
        .map(|e| e.neighbor_probes)
        .sum()
}

pub fn write_transition_log(mut w: impl Write, log: &[TransitionRecord]) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_transition_log(r: impl BufRead) -> std::io::Result<Vec<TransitionRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            l.and_then(|l| {
                serde_json::from_str(&l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Scripted measurements: a table of pair values, everything else at a floor.
    struct Script {
        values: HashMap<(usize, usize), f64>,
        floor: f64,
        acquisition: Option<Acquisition>,
        calls: usize,
    }

    impl Script {
        fn new(floor: f64) -> Self {
            Self {
                values: HashMap::new(),
                floor,
                acquisition: None,
                calls: 0,
            }
        }
        fn set(mut self, tx: usize, rx: usize, v: f64) -> Self {
            self.values.insert((tx, rx), v);
            self
        }
    }

    impl LinkMeasure for Script {
        fn tx_count(&self) -> usize {
            25
        }
        fn rx_count(&self) -> usize {
            25
        }
        fn distinct_rx(&self, a: usize, b: usize) -> bool {
            a.abs_diff(b) > 4
        }
        fn noise_floor(&self) -> f64 {
            -74.0
        }
        fn measure(&mut self, tx: usize, rx: usize, _at: f64) -> Result<f64, MeasureError> {
            self.calls += 1;
            Ok(*self.values.get(&(tx, rx)).unwrap_or(&self.floor))
        }
        fn acquire(&mut self, _from: f64) -> Option<Acquisition> {
            self.acquisition
        }
    }

    struct Failing;
    impl LinkMeasure for Failing {
        fn tx_count(&self) -> usize {
            25
        }
        fn rx_count(&self) -> usize {
            25
        }
        fn distinct_rx(&self, _: usize, _: usize) -> bool {
            true
        }
        fn noise_floor(&self) -> f64 {
            -74.0
        }
        fn measure(&mut self, _: usize, _: usize, at: f64) -> Result<f64, MeasureError> {
            Err(MeasureError::Unavailable(at))
        }
        fn acquire(&mut self, _: f64) -> Option<Acquisition> {
            None
        }
    }

    fn surfer() -> BeamSurfer {
        let mut ctx = ProtocolContext::aligned(12, 12, -51.0, 0.0);
        ctx.tx_changed = false;
        ctx.last_br_scan_at = 0.0;
        BeamSurfer::new(ProtocolConfig::default(), ctx)
    }

    fn run_until_settled(b: &mut BeamSurfer, now: f64, m: &mut dyn LinkMeasure) -> Vec<TransitionRecord> {
        let mut log = Vec::new();
        let mut t = now;
        loop {
            let s = b.step(t, Tick::Epoch, m).unwrap();
            t = s.record.done_at;
            log.push(s.record);
            if s.wake != Wake::Immediate {
                return log;
            }
        }
    }

    #[test]
    fn small_drop_stays_in_normal_operation() {
        let mut b = surfer();
        let mut m = Script::new(-90.0).set(12, 12, -52.5);
        let s = b.step(50.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NOp);
        assert_eq!((b.ctx.tx_beam, b.ctx.rx_beam), (12, 12));
        assert_eq!(b.ctx.rss_current_rb, -51.0);
    }

    #[test]
    fn moderate_drop_goes_to_rba_and_probes_neighbors() {
        let mut b = surfer();
        let mut m = Script::new(-90.0).set(12, 12, -55.5);
        let s = b.step(50.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::RBA);
        let s = b.step(s.record.done_at, Tick::Epoch, &mut m).unwrap();
        let probed: Vec<_> = s
            .record
            .actions
            .iter()
            .filter_map(|a| match a.action {
                Action::ProbeRxBeam(r) => Some(r),
                _ => None,
            })
            .collect();
        assert_eq!(probed, vec![11, 13]);
    }

    #[test]
    fn rba_adopts_better_neighbor_and_resets_reference() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::RBA;
        let mut m = Script::new(-90.0).set(12, 13, -52.0).set(12, 11, -58.0);
        let s = b.step(0.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NOp);
        assert_eq!(b.ctx.rx_beam, 13);
        assert_eq!(b.ctx.rss_current_rb, -52.0);
        assert!((s.record.done_at - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rba_tie_prefers_lower_index() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::RBA;
        let mut m = Script::new(-90.0).set(12, 13, -52.0).set(12, 11, -52.0);
        b.step(0.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(b.ctx.rx_beam, 11);
    }

    #[test]
    fn large_drop_with_fresh_stored_beam_switches_to_it() {
        let mut b = surfer();
        b.ctx.stored_nlos = Some(StoredBeam {
            rx_beam: 3,
            rss: -60.0,
            stored_at: 20.0,
        });
        let mut m = Script::new(-90.0).set(12, 12, -66.0).set(12, 3, -60.0);
        let s = b.step(100.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NLoSBO);
        assert!(s.record.actions.iter().any(|a| a.action == Action::SwitchRxBeam(3)));
        assert_eq!(b.ctx.rx_beam, 3);
    }

    #[test]
    fn stale_stored_beam_is_ignored() {
        let mut b = surfer();
        b.ctx.stored_nlos = Some(StoredBeam {
            rx_beam: 3,
            rss: -60.0,
            stored_at: 0.0,
        });
        let mut m = Script::new(-90.0).set(12, 12, -66.0);
        let s = b.step(100.5, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::BR);
        assert_eq!(b.ctx.rx_beam, 12);
    }

    #[test]
    fn rx_only_realignment_costs_two_probes() {
        let mut b = surfer();
        let mut m = Script::new(-90.0).set(12, 12, -55.0).set(12, 13, -51.5);
        let log = run_until_settled(&mut b, 100.0, &mut m);
        let events = realignment_events(&log);
        assert_eq!(events.len(), 1);
        assert!(events[0].rx_only());
        assert_eq!(probe_budget(&log, events[0].id).unwrap(), 2);
        assert_eq!(window_probe_count(&log, 0.0, 50.0), 0);
        assert_eq!(probe_budget(&log, 99), Err(ProtocolError::EventNotFound(99)));
    }

    #[test]
    fn tx_neighbor_realignment_stays_within_eight_probes() {
        let mut b = surfer();
        let mut m = Script::new(-90.0).set(12, 12, -56.0).set(13, 13, -51.5);
        let log = run_until_settled(&mut b, 100.0, &mut m);
        let states: Vec<_> = log.iter().map(|r| r.state_after).collect();
        assert_eq!(
            states,
            vec![ProtocolState::RBA, ProtocolState::TBA, ProtocolState::NOp]
        );
        assert_eq!((b.ctx.tx_beam, b.ctx.rx_beam), (13, 13));
        let e = &realignment_events(&log)[0];
        assert!(!e.rx_only());
        assert_eq!(e.neighbor_probes, 8);
        assert_eq!(e.full_scan_probes, 0);
    }

    #[test]
    fn tba_falls_back_to_full_scans_then_lingers() {
        let mut b = surfer();
        // only a far RX beam on TX 11 helps, and only partially
        let mut m = Script::new(-90.0).set(12, 12, -56.0).set(11, 20, -55.0);
        let log = run_until_settled(&mut b, 100.0, &mut m);
        assert_eq!(b.state(), ProtocolState::TBA);
        assert_eq!((b.ctx.tx_beam, b.ctx.rx_beam), (11, 20));
        // reference held until a pair within 3 dB is found
        assert_eq!(b.ctx.rss_current_rb, -51.0);
        let e = &realignment_events(&log)[0];
        assert_eq!(e.neighbor_probes, 8);
        assert_eq!(e.full_scan_probes, 75);
        // a later re-sweep uses full scans only
        let s = b.step(200.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.probes(ProbeClass::Neighbor), 0);
    }

    #[test]
    fn tba_times_out_into_reacquisition() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::TBA;
        b.ctx.neighbor_phase_done = true;
        b.ctx.event = Some(0);
        let mut m = Script::new(-65.0);
        let mut t = 0.0;
        while b.state() == ProtocolState::TBA {
            b.step(t, Tick::Epoch, &mut m).unwrap();
            t += 100.0;
            assert!(t < 7000.0);
        }
        assert_eq!(b.state(), ProtocolState::AR);
        assert!(t >= 6000.0);
    }

    #[test]
    fn nlos_operation_recovers_los_when_it_returns() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::NLoSBO;
        b.ctx.rx_beam = 3;
        b.ctx.event = Some(0);
        let mut m = Script::new(-90.0).set(12, 3, -60.0).set(12, 12, -51.2);
        let s = b.step(0.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NOp);
        assert_eq!(b.ctx.rx_beam, 12);
        assert_eq!(s.record.probes(ProbeClass::Neighbor), 8);
    }

    #[test]
    fn nlos_operation_holds_reflection_while_blocked() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::NLoSBO;
        b.ctx.rx_beam = 3;
        let mut m = Script::new(-90.0).set(12, 3, -60.0);
        let s = b.step(0.0, Tick::Epoch, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NLoSBO);
        assert_eq!(b.ctx.rss_current_rb, -51.0);
        assert!((s.record.done_at - (10.0 + 0.8 + 7.5)).abs() < 1e-9);
    }

    #[test]
    fn nlos_control_failures_lead_to_reacquisition() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::NLoSBO;
        let mut m = Script::new(-80.0);
        for i in 0..3 {
            let s = b.step(i as f64 * 10.0, Tick::Frame, &mut m).unwrap();
            let expect = if i < 2 { ProtocolState::NLoSBO } else { ProtocolState::AR };
            assert_eq!(s.record.state_after, expect);
        }
        assert!(!b.ctx.synchronized);
    }

    #[test]
    fn periodic_recon_stores_a_distinct_beam() {
        let mut b = surfer();
        b.ctx.last_br_scan_at = -100.0;
        let mut m = Script::new(-90.0)
            .set(12, 12, -51.0)
            .set(12, 13, -52.0)
            .set(12, 4, -60.0);
        let log = run_until_settled(&mut b, 0.0, &mut m);
        assert_eq!(log[0].state_after, ProtocolState::BR);
        assert_eq!(log[1].state_after, ProtocolState::NOp);
        assert_eq!(b.ctx.stored_nlos.unwrap().rx_beam, 4);
        assert_eq!(b.ctx.rx_beam, 12);
        assert!(realignment_events(&log).is_empty());
    }

    #[test]
    fn reacquisition_adopts_the_acquired_pair() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::AR;
        let mut m = Script::new(-90.0);
        m.acquisition = Some(Acquisition {
            at: 340.0,
            tx_beam: 5,
            rx_beam: 7,
            rss: -53.0,
        });
        let s = b.step(0.0, Tick::Frame, &mut m).unwrap();
        assert_eq!(s.wake, Wake::At(340.0));
        assert!(!b.ready(330.0, Tick::Frame));
        assert!(b.ready(340.0, Tick::Frame));
        let s = b.step(340.0, Tick::Frame, &mut m).unwrap();
        assert_eq!(s.record.state_after, ProtocolState::NOp);
        assert_eq!((b.ctx.tx_beam, b.ctx.rx_beam), (5, 7));
        assert_eq!(b.ctx.rss_current_rb, -53.0);
        assert!(b.ctx.synchronized);
    }

    #[test]
    fn failed_acquisition_never_wakes() {
        let mut b = surfer();
        b.ctx.state = ProtocolState::AR;
        let s = b.step(0.0, Tick::Frame, &mut Script::new(-90.0)).unwrap();
        assert_eq!(s.wake, Wake::Never);
    }

    #[test]
    fn measurement_fault_is_surfaced() {
        let mut b = surfer();
        let err = b.step(0.0, Tick::Epoch, &mut Failing).unwrap_err();
        assert!(matches!(err, ProtocolError::MeasurementFault { .. }));
    }

    #[test]
    fn identical_inputs_give_identical_steps() {
        let go = || {
            let mut b = surfer();
            let mut m = Script::new(-90.0).set(12, 12, -56.0).set(13, 13, -51.5);
            run_until_settled(&mut b, 100.0, &mut m)
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn transition_log_round_trips_and_audits() {
        let mut b = surfer();
        let mut m = Script::new(-90.0).set(12, 12, -56.0).set(13, 13, -51.5);
        let log = run_until_settled(&mut b, 100.0, &mut m);
        let mut buf = Vec::new();
        write_transition_log(&mut buf, &log).unwrap();
        let back = read_transition_log(&buf[..]).unwrap();
        assert_eq!(back, log);
        assert!(audit_transitions(&log).is_ok());
        let mut bad = log[0].clone();
        bad.state_before = ProtocolState::RBA;
        bad.state_after = ProtocolState::AR;
        assert!(audit_transitions(&[bad]).is_err());
    }

    /// Each 100 ms the best pair moves and a common loss applies; RSS falls
    /// 3 dB per beam step away from the best pair.
    struct Drift {
        epochs: Vec<(usize, usize, f64)>,
    }

    impl LinkMeasure for Drift {
        fn tx_count(&self) -> usize {
            25
        }
        fn rx_count(&self) -> usize {
            25
        }
        fn distinct_rx(&self, a: usize, b: usize) -> bool {
            a.abs_diff(b) > 4
        }
        fn noise_floor(&self) -> f64 {
            -74.0
        }
        fn measure(&mut self, tx: usize, rx: usize, at: f64) -> Result<f64, MeasureError> {
            let e = ((at / 100.0) as usize).min(self.epochs.len() - 1);
            let (btx, brx, loss) = self.epochs[e];
            Ok((-51.0 - loss - 3.0 * (tx.abs_diff(btx) + rx.abs_diff(brx)) as f64).max(-90.0))
        }
        fn acquire(&mut self, from: f64) -> Option<Acquisition> {
            let at = from + 500.0;
            let (tx_beam, rx_beam, _) = self.epochs[((at / 100.0) as usize).min(self.epochs.len() - 1)];
            Some(Acquisition {
                at,
                tx_beam,
                rx_beam,
                rss: self.measure(tx_beam, rx_beam, at).ok()?,
            })
        }
    }

    /// Frame-clocked driver; returns the log and the reference after every step.
    fn drive(m: &mut Drift) -> (Vec<TransitionRecord>, Vec<f64>) {
        let mut b = surfer();
        let (mut log, mut refs) = (Vec::new(), Vec::new());
        let mut busy_until = 0.0;
        let end = m.epochs.len() as f64 * 100.0;
        for frame in 0..(end / 10.0) as usize {
            let t = frame as f64 * 10.0;
            let tick = if frame % 10 == 0 { Tick::Epoch } else { Tick::Frame };
            if t < busy_until || !b.ready(t, tick) {
                continue;
            }
            let mut now = t;
            for _ in 0..64 {
                let s = b.step(now, tick, m).unwrap();
                now = s.record.done_at;
                log.push(s.record);
                refs.push(b.ctx.rss_current_rb);
                if s.wake != Wake::Immediate {
                    break;
                }
            }
            busy_until = now;
        }
        (log, refs)
    }

    fn drift() -> impl Strategy<Value = Vec<(usize, usize, f64)>> {
        proptest::collection::vec((9usize..16, 9usize..16, 0.0f64..25.0), 5..40)
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn random_drift_keeps_every_invariant(epochs in drift()) {
            let (log, refs) = drive(&mut Drift { epochs: epochs.clone() });
            prop_assert!(audit_transitions(&log).is_ok());
            for e in realignment_events(&log) {
                prop_assert!(e.neighbor_probes <= e.probe_bound(8), "{e:?}");
            }
            for w in log.windows(2) {
                prop_assert!(w[1].t >= w[0].done_at - 1e-9);
            }
            let mut prev = -51.0;
            for (r, rb) in log.iter().zip(&refs) {
                if r.state_before == ProtocolState::NOp && r.state_after != ProtocolState::AR {
                    prop_assert_eq!(*rb, prev, "reference moved outside an adoption at {}", r.t);
                }
                prev = *rb;
            }
            let (again, _) = drive(&mut Drift { epochs });
            prop_assert_eq!(again, log);
        }
    }
}
