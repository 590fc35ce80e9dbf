//! Received signal strength for any (TX beam, RX beam) pair.
//!
//! Each path contributes `tx_power + G_tx + G_rx - FSPL - losses`; paths are
//! combined as a non-coherent power sum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::beam::{fspl, wrap_deg, BeamCodebook, BeamError};
use crate::geometry::{blockage_attenuation, reflected_paths, Environment, Point};
use crate::motion::{MobileState, MotionModel};

/// Operating point the transmit power is calibrated to, dBm.
pub const CALIBRATION_TARGET_DBM: f64 = -51.0;
pub const DEFAULT_NOISE_FLOOR_DBM: f64 = -74.0;
pub const DEFAULT_CARRIER_HZ: f64 = 60e9;
pub const DEFAULT_BANDWIDTH_HZ: f64 = 2e9;
/// Airtime of one RSS probe, ms.
pub const PROBE_SLOT_MS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub tx_power: f64,
    pub noise_floor: f64,
    pub carrier: f64,
    pub bandwidth: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            tx_power: 0.0,
            noise_floor: DEFAULT_NOISE_FLOOR_DBM,
            carrier: DEFAULT_CARRIER_HZ,
            bandwidth: DEFAULT_BANDWIDTH_HZ,
        }
    }
}

impl LinkBudget {
    /// Transmit power that makes a boresight-aligned, unobstructed link at
    /// `distance` land on `target` dBm.
    pub fn calibrated(
        mut self,
        tx: &BeamCodebook,
        rx: &BeamCodebook,
        distance: f64,
        target: f64,
    ) -> Result<Self, BeamError> {
        let peak = |cb: &BeamCodebook| {
            cb.beams()
                .iter()
                .map(|b| b.peak_gain)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        self.tx_power = target - peak(tx) - peak(rx) + fspl(distance, self.carrier)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "wall", rename_all = "snake_case")]
pub enum PathKind {
    Los,
    Reflected(usize),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssSample {
    pub t: f64,
    pub tx_beam: usize,
    pub rx_beam: usize,
    pub rss: f64,
    pub snr: f64,
    pub path: PathKind,
}

/// Power delivered by a single propagation path, dBm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPower {
    pub kind: PathKind,
    pub power: f64,
    /// Blocker attenuation applied to this path, dB.
    pub blockage: f64,
}

/// Sum of dBm powers in the linear domain.
pub fn power_sum(powers: impl IntoIterator<Item = f64>) -> f64 {
    let mw: f64 = powers.into_iter().map(|p| 10f64.powf(p / 10.0)).sum();
    if mw > 0.0 {
        10.0 * mw.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Everything needed to evaluate a beam pair.
#[derive(Debug, Clone)]
pub struct Link {
    pub env: Environment,
    pub budget: LinkBudget,
    pub tx_codebook: BeamCodebook,
    pub rx_codebook: BeamCodebook,
}

impl Link {
    pub fn snapshot(&self, state: &MobileState, t: f64) -> Snapshot {
        Snapshot::new(&self.env, &self.budget, state, t)
    }

    pub fn paths(&self, tx_beam: usize, rx_beam: usize, state: &MobileState, t: f64) -> Vec<PathPower> {
        path_powers(
            &self.env,
            &self.budget,
            &self.tx_codebook,
            &self.rx_codebook,
            tx_beam,
            rx_beam,
            state,
            t,
        )
    }

    pub fn rss(&self, tx_beam: usize, rx_beam: usize, state: &MobileState, t: f64) -> RssSample {
        compute_rss(
            &self.env,
            &self.budget,
            &self.tx_codebook,
            &self.rx_codebook,
            tx_beam,
            rx_beam,
            state,
            t,
        )
    }

    /// Probes every RX beam in index order, one slot each.
    pub fn scan_rx(&self, tx_beam: usize, motion: &MotionModel, t: f64) -> RxScan {
        scan_rx_beams(self, tx_beam, motion, t)
    }
}

/// Beam-independent part of one propagation path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathGeometry {
    pub kind: PathKind,
    /// Departure direction in the TX array frame, degrees.
    pub tx_dir: f64,
    /// Arrival direction in the RX array frame, degrees.
    pub rx_dir: f64,
    /// Power before antenna gains, dBm.
    pub base: f64,
    pub blockage: f64,
}

/// Geometry of every path at one instant; evaluates any beam pair cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub noise_floor: f64,
    pub paths: Vec<PathGeometry>,
}

impl Snapshot {
    pub fn new(env: &Environment, budget: &LinkBudget, state: &MobileState, t: f64) -> Self {
        let tx = env.tx_position;
        let rx = state.position;
        let tx_dir = |bearing: f64| wrap_deg(bearing - env.tx_boresight);
        let rx_dir = |bearing: f64| wrap_deg(bearing - state.orientation);
        let loss = |d: f64| fspl(d, budget.carrier).unwrap_or(f64::INFINITY);
        let mut paths = Vec::with_capacity(1 + env.walls.len());
        let los_block = blockage_attenuation(env, tx, rx, t);
        paths.push(PathGeometry {
            kind: PathKind::Los,
            tx_dir: tx_dir(tx.bearing_to(rx)),
            rx_dir: rx_dir(rx.bearing_to(tx)),
            base: budget.tx_power - loss(tx.distance(rx)) - los_block,
            blockage: los_block,
        });
        for p in reflected_paths(env, tx, rx) {
            let block = blockage_attenuation(env, tx, p.reflection_point, t)
                + blockage_attenuation(env, p.reflection_point, rx, t);
            paths.push(PathGeometry {
                kind: PathKind::Reflected(p.wall),
                tx_dir: tx_dir(p.departure_angle),
                rx_dir: rx_dir(p.arrival_angle),
                base: budget.tx_power - loss(p.total_length) - p.reflection_loss - block,
                blockage: block,
            });
        }
        Self {
            t,
            noise_floor: budget.noise_floor,
            paths,
        }
    }

    pub fn path_powers(&self, tx_cb: &BeamCodebook, rx_cb: &BeamCodebook, tx_beam: usize, rx_beam: usize) -> Vec<PathPower> {
        self.paths
            .iter()
            .map(|g| PathPower {
                kind: g.kind,
                power: g.base + tx_cb.gain(tx_beam, g.tx_dir) + rx_cb.gain(rx_beam, g.rx_dir),
                blockage: g.blockage,
            })
            .collect()
    }

    pub fn sample(&self, tx_cb: &BeamCodebook, rx_cb: &BeamCodebook, tx_beam: usize, rx_beam: usize) -> RssSample {
        let paths = self.path_powers(tx_cb, rx_cb, tx_beam, rx_beam);
        let rss = power_sum(paths.iter().map(|p| p.power));
        let path = paths
            .iter()
            .filter(|p| p.power.is_finite())
            .fold(None::<&PathPower>, |best, p| match best {
                Some(b) if b.power >= p.power => Some(b),
                _ => Some(p),
            })
            .map_or(PathKind::None, |p| p.kind);
        RssSample {
            t: self.t,
            tx_beam,
            rx_beam,
            rss,
            snr: rss - self.noise_floor,
            path,
        }
    }
}

/// Per-path powers for one beam pair.
#[allow(clippy::too_many_arguments)]
pub fn path_powers(
    env: &Environment,
    budget: &LinkBudget,
    tx_cb: &BeamCodebook,
    rx_cb: &BeamCodebook,
    tx_beam: usize,
    rx_beam: usize,
    state: &MobileState,
    t: f64,
) -> Vec<PathPower> {
    Snapshot::new(env, budget, state, t).path_powers(tx_cb, rx_cb, tx_beam, rx_beam)
}

/// RSS of one beam pair: power sum over LoS and first-order reflections,
/// labelled with the strongest contributor.
#[allow(clippy::too_many_arguments)]
pub fn compute_rss(
    env: &Environment,
    budget: &LinkBudget,
    tx_cb: &BeamCodebook,
    rx_cb: &BeamCodebook,
    tx_beam: usize,
    rx_beam: usize,
    state: &MobileState,
    t: f64,
) -> RssSample {
    Snapshot::new(env, budget, state, t).sample(tx_cb, rx_cb, tx_beam, rx_beam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxScan {
    pub samples: Vec<RssSample>,
    /// Airtime consumed by the scan, ms.
    pub elapsed: f64,
}

impl RxScan {
    /// Strongest sample, lower RX index on ties.
    pub fn best(&self) -> Option<&RssSample> {
        self.samples.iter().fold(None, |best: Option<&RssSample>, s| match best {
            Some(b) if b.rss >= s.rss => Some(b),
            _ => Some(s),
        })
    }
}

/// Probes every RX beam against `tx_beam`, sample `i` taken at `t + i` slots.
pub fn scan_rx_beams(link: &Link, tx_beam: usize, motion: &MotionModel, t: f64) -> RxScan {
    let samples: Vec<RssSample> = (0..link.rx_codebook.len())
        .map(|i| {
            let at = t + i as f64 * PROBE_SLOT_MS;
            link.rss(tx_beam, i, &motion.sample_state(at), at)
        })
        .collect();
    let elapsed = samples.len() as f64 * PROBE_SLOT_MS;
    RxScan { samples, elapsed }
}

/// RSS per RX beam (rows) per time (columns) for a fixed TX beam.
pub fn rx_heatmap(link: &Link, motion: &MotionModel, tx_beam: usize, times: &[f64]) -> Vec<Vec<f64>> {
    let states: Vec<MobileState> = times.iter().map(|t| motion.sample_state(*t)).collect();
    (0..link.rx_codebook.len())
        .map(|rx| {
            times
                .iter()
                .zip(&states)
                .map(|(t, s)| link.rss(tx_beam, rx, s, *t).rss)
                .collect()
        })
        .collect()
}

/// Writes a heatmap as CSV: header `rx_beam,t_<ms>...`, one row per RX beam.
pub fn write_heatmap_csv(mut w: impl Write, times: &[f64], grid: &[Vec<f64>]) -> std::io::Result<()> {
    write!(w, "rx_beam")?;
    for t in times {
        write!(w, ",{t}")?;
    }
    writeln!(w)?;
    for (i, row) in grid.iter().enumerate() {
        write!(w, "{i}")?;
        for v in row {
            write!(w, ",{v:.4}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Distance from the transmitter to a point, used for nominal calibration.
pub fn nominal_distance(env: &Environment, at: Point) -> f64 {
    env.tx_position.distance(at)
}
