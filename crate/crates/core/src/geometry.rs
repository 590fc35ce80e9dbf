//! 2-D azimuth-plane scene: transmitter pose, reflecting walls and blockers.
//!
//! Reflections are first order only and use the image-source construction.
//! Blockers are disks whose attenuation ramps in and out linearly over
//! `onset_ramp_ms` once they start or stop cutting a path.

use serde::{Deserialize, Serialize};

use crate::motion::MotionModel;

/// Default reflection loss of a wall, dB.
pub const DEFAULT_REFLECTION_LOSS_DB: f64 = 8.0;
/// Range the reflection loss is expected to fall in when not overridden.
pub const REFLECTION_LOSS_RANGE_DB: (f64, f64) = (8.0, 10.0);
/// Smallest attenuation that qualifies as blockage, dB.
pub const MIN_BLOCKER_ATTENUATION_DB: f64 = 10.0;
pub const DEFAULT_ONSET_RAMP_MS: f64 = 30.0;

/// Sub-step used when integrating the ramp of a moving blocker, ms.
const RAMP_STEP_MS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (other.x - self.x).hypot(other.y - self.y)
    }

    /// Bearing from `self` toward `other`, degrees, counter-clockwise from +x.
    pub fn bearing_to(self, other: Point) -> f64 {
        (other.y - self.y).atan2(other.x - self.x).to_degrees()
    }

    pub fn offset(self, bearing_deg: f64, length: f64) -> Point {
        let r = bearing_deg.to_radians();
        Point::new(self.x + length * r.cos(), self.y + length * r.sin())
    }

    fn sub(self, o: Point) -> (f64, f64) {
        (self.x - o.x, self.y - o.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub const fn new(a: Point, b: Point) -> Self {
        Self { a, b }
    }

    /// Shortest distance from `p` to any point of the segment.
    pub fn distance_to(&self, p: Point) -> f64 {
        let (dx, dy) = self.b.sub(self.a);
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            return p.distance(self.a);
        }
        let (px, py) = p.sub(self.a);
        let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
        p.distance(Point::new(self.a.x + t * dx, self.a.y + t * dy))
    }

    /// Mirror image of `p` across the infinite line through the segment.
    pub fn mirror(&self, p: Point) -> Point {
        let (dx, dy) = self.b.sub(self.a);
        let len2 = dx * dx + dy * dy;
        let (px, py) = p.sub(self.a);
        let t = (px * dx + py * dy) / len2;
        let foot = Point::new(self.a.x + t * dx, self.a.y + t * dy);
        Point::new(2.0 * foot.x - p.x, 2.0 * foot.y - p.y)
    }

    /// Signed side of `p` relative to the directed line a->b.
    fn side(&self, p: Point) -> f64 {
        let (dx, dy) = self.b.sub(self.a);
        let (px, py) = p.sub(self.a);
        dx * py - dy * px
    }

    /// Intersection of the segment with segment `p`-`q`, if any.
    pub fn intersect(&self, p: Point, q: Point) -> Option<Point> {
        let (rx, ry) = self.b.sub(self.a);
        let (sx, sy) = q.sub(p);
        let denom = rx * sy - ry * sx;
        if denom.abs() < 1e-12 {
            return None;
        }
        let (qpx, qpy) = p.sub(self.a);
        let t = (qpx * sy - qpy * sx) / denom;
        let u = (qpx * ry - qpy * rx) / denom;
        const EPS: f64 = 1e-9;
        if (-EPS..=1.0 + EPS).contains(&t) && (-EPS..=1.0 + EPS).contains(&u) {
            Some(Point::new(self.a.x + t * rx, self.a.y + t * ry))
        } else {
            None
        }
    }
}

/// A reflecting surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wall {
    pub segment: Segment,
    #[serde(default = "default_reflection_loss")]
    pub reflection_loss: f64,
}

fn default_reflection_loss() -> f64 {
    DEFAULT_REFLECTION_LOSS_DB
}

/// Closed time interval, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Window {
    fn overlap(&self, from: f64, to: f64) -> f64 {
        (self.end_ms.min(to) - self.start_ms.max(from)).max(0.0)
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.start_ms && t <= self.end_ms
    }
}

/// A disk-shaped obstruction (hand, head, body, board).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blocker {
    pub center: Point,
    /// Moves the blocker over time; `center` is ignored when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionModel>,
    pub radius: f64,
    pub attenuation: f64,
    #[serde(default = "default_onset_ramp")]
    pub onset_ramp_ms: f64,
    /// Intervals during which the blocker is present; empty means always.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<Window>,
}

fn default_onset_ramp() -> f64 {
    DEFAULT_ONSET_RAMP_MS
}

impl Blocker {
    pub fn fixed(center: Point, radius: f64, attenuation: f64) -> Self {
        Self {
            center,
            motion: None,
            radius,
            attenuation,
            onset_ramp_ms: DEFAULT_ONSET_RAMP_MS,
            schedule: Vec::new(),
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<Window>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn center_at(&self, t_ms: f64) -> Point {
        match &self.motion {
            Some(m) => m.sample_state(t_ms.max(0.0)).position,
            None => self.center,
        }
    }

    fn present(&self, t_ms: f64) -> bool {
        self.schedule.is_empty() || self.schedule.iter().any(|w| w.contains(t_ms))
    }

    fn cuts(&self, seg: &Segment, t_ms: f64) -> bool {
        self.present(t_ms) && seg.distance_to(self.center_at(t_ms)) <= self.radius
    }

    /// Fraction in [0, 1] of the attenuation applied to `seg` at `t_ms`: the
    /// share of the trailing ramp window during which the blocker cut the path.
    pub fn ramp(&self, seg: &Segment, t_ms: f64) -> f64 {
        let ramp = self.onset_ramp_ms;
        if ramp <= 0.0 {
            return if self.cuts(seg, t_ms) { 1.0 } else { 0.0 };
        }
        let from = t_ms - ramp;
        if self.motion.is_none() {
            if seg.distance_to(self.center) > self.radius {
                return 0.0;
            }
            if self.schedule.is_empty() {
                return 1.0;
            }
            let covered: f64 = self.schedule.iter().map(|w| w.overlap(from, t_ms)).sum();
            return (covered / ramp).min(1.0);
        }
        let steps = (ramp / RAMP_STEP_MS).ceil().max(1.0) as usize;
        let dt = ramp / steps as f64;
        let hits = (0..steps)
            .filter(|i| self.cuts(seg, from + (*i as f64 + 0.5) * dt))
            .count();
        hits as f64 / steps as f64
    }
}

/// The scene seen by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tx_position: Point,
    /// Heading of the transmitter's array normal, degrees.
    pub tx_boresight: f64,
    #[serde(default)]
    pub walls: Vec<Wall>,
    #[serde(default)]
    pub blockers: Vec<Blocker>,
}

impl Environment {
    pub fn free_space(tx_position: Point, tx_boresight: f64) -> Self {
        Self {
            tx_position,
            tx_boresight,
            walls: Vec::new(),
            blockers: Vec::new(),
        }
    }

    /// Whether any blocker currently attenuates the segment.
    pub fn blocked(&self, a: Point, b: Point, t_ms: f64) -> bool {
        blockage_attenuation(self, a, b, t_ms) > 0.0
    }
}

/// Total blocker attenuation along `tx`-`rx` at time `t_ms`, dB.
pub fn blockage_attenuation(env: &Environment, tx: Point, rx: Point, t_ms: f64) -> f64 {
    let seg = Segment::new(tx, rx);
    env.blockers
        .iter()
        .map(|b| b.attenuation * b.ramp(&seg, t_ms))
        .sum()
}

/// One first-order specular reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectedPath {
    pub wall: usize,
    pub reflection_point: Point,
    pub total_length: f64,
    pub reflection_loss: f64,
    /// World bearing from the transmitter toward the reflection point.
    pub departure_angle: f64,
    /// World bearing from the receiver toward the reflection point.
    pub arrival_angle: f64,
}

/// Image-source reflections of `tx` off every wall that reach `rx`.
pub fn reflected_paths(env: &Environment, tx: Point, rx: Point) -> Vec<ReflectedPath> {
    env.walls
        .iter()
        .enumerate()
        .filter_map(|(i, wall)| {
            let seg = &wall.segment;
            let (s_tx, s_rx) = (seg.side(tx), seg.side(rx));
            // both ends must face the reflecting side, strictly off the wall line
            if s_tx * s_rx <= 0.0 {
                return None;
            }
            let image = seg.mirror(tx);
            let point = seg.intersect(image, rx)?;
            Some(ReflectedPath {
                wall: i,
                reflection_point: point,
                total_length: tx.distance(point) + point.distance(rx),
                reflection_loss: wall.reflection_loss,
                departure_angle: tx.bearing_to(point),
                arrival_angle: rx.bearing_to(point),
            })
        })
        .collect()
}
