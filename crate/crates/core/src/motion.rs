//! Mobile trajectories. Every state is a pure function of the model and `t`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::beam::wrap_deg;
use crate::geometry::Point;
use crate::rng::{stream_rng, MOTION};

pub const DEFAULT_LATERAL_SPEED: f64 = 1.4;
pub const DEFAULT_PATH_LENGTH: f64 = 3.0;
pub const DEFAULT_ANGULAR_SPEED: f64 = 120.0;
pub const DEFAULT_SWEEP: f64 = 120.0;
pub const DEFAULT_JITTER_STD: f64 = 60.0;
/// Time constant pulling the jitter offset back to zero, ms.
pub const DEFAULT_JITTER_REVERSION_MS: f64 = 1000.0;

/// Jitter rate is redrawn at this interval, ms.
const JITTER_BLOCK_MS: f64 = 100.0;
/// Stream offset separating jitter draws from waypoint draws.
const JITTER_INDEX_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobileState {
    pub position: Point,
    /// Heading of the array normal, degrees.
    pub orientation: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    /// Back-and-forth translation along `direction` (degrees) over `path_length`.
    Lateral {
        speed: f64,
        path_length: f64,
        direction: f64,
    },
    /// Fixed position; orientation sweeps a triangle wave of width `sweep`
    /// centred on the start heading, moving positive first.
    Rotational { angular_speed: f64, sweep: f64 },
    /// Random waypoints inside `bounds`; the array faces `look_at` plus a
    /// mean-reverting jitter whose rate has std `orientation_jitter` deg/s.
    RandomWalk {
        speed: f64,
        bounds: Bounds,
        orientation_jitter: f64,
        #[serde(default = "default_reversion")]
        jitter_reversion_ms: f64,
        look_at: Point,
        #[serde(default = "default_jitter_limit")]
        jitter_limit: f64,
    },
}

fn default_reversion() -> f64 {
    DEFAULT_JITTER_REVERSION_MS
}

fn default_jitter_limit() -> f64 {
    DEFAULT_SWEEP / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    #[serde(flatten)]
    pub kind: MotionKind,
    pub start: Point,
    /// Initial array heading, degrees.
    pub heading: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Triangle wave with unit slope that starts at 0 and rises to `amp`, then
/// falls to `-amp` and back, period `4 * amp`.
fn centered_triangle(x: f64, amp: f64) -> f64 {
    if amp <= 0.0 {
        return 0.0;
    }
    let u = x.rem_euclid(4.0 * amp);
    if u <= amp {
        u
    } else if u <= 3.0 * amp {
        2.0 * amp - u
    } else {
        u - 4.0 * amp
    }
}

/// Triangle wave from 0 up to `len` and back, period `2 * len`.
fn shuttle(x: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return 0.0;
    }
    let u = x.rem_euclid(2.0 * len);
    if u <= len {
        u
    } else {
        2.0 * len - u
    }
}

impl MotionModel {
    pub fn fixed(start: Point, heading: f64) -> Self {
        Self {
            kind: MotionKind::Static,
            start,
            heading,
            seed: 0,
        }
    }

    pub fn lateral(start: Point, heading: f64, speed: f64, path_length: f64, direction: f64) -> Self {
        Self {
            kind: MotionKind::Lateral {
                speed,
                path_length,
                direction,
            },
            start,
            heading,
            seed: 0,
        }
    }

    pub fn rotational(start: Point, heading: f64, angular_speed: f64) -> Self {
        Self {
            kind: MotionKind::Rotational {
                angular_speed,
                sweep: DEFAULT_SWEEP,
            },
            start,
            heading,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// State at `t_ms` (clamped to `t >= 0`).
    pub fn sample_state(&self, t_ms: f64) -> MobileState {
        let t = t_ms.max(0.0);
        let secs = t / 1000.0;
        let (position, orientation) = match &self.kind {
            MotionKind::Static => (self.start, self.heading),
            MotionKind::Lateral {
                speed,
                path_length,
                direction,
            } => {
                let d = shuttle(speed * secs, *path_length);
                (self.start.offset(*direction, d), self.heading)
            }
            MotionKind::Rotational {
                angular_speed,
                sweep,
            } => (
                self.start,
                wrap_deg(self.heading + centered_triangle(angular_speed * secs, sweep / 2.0)),
            ),
            MotionKind::RandomWalk {
                speed,
                bounds,
                orientation_jitter,
                jitter_reversion_ms,
                look_at,
                jitter_limit,
            } => {
                let pos = self.waypoint_position(*speed, bounds, t);
                let jitter = self.jitter(*orientation_jitter, *jitter_reversion_ms, *jitter_limit, t);
                (pos, wrap_deg(pos.bearing_to(*look_at) + jitter))
            }
        };
        MobileState {
            position,
            orientation,
            time: t,
        }
    }

    fn waypoint(&self, bounds: &Bounds, i: u64) -> Point {
        let mut rng = stream_rng(self.seed, MOTION, i);
        let x = bounds.min.x + rng.random::<f64>() * (bounds.max.x - bounds.min.x);
        let y = bounds.min.y + rng.random::<f64>() * (bounds.max.y - bounds.min.y);
        Point::new(x, y)
    }

    fn waypoint_position(&self, speed: f64, bounds: &Bounds, t: f64) -> Point {
        if speed <= 0.0 {
            return self.start;
        }
        let mut from = self.start;
        let mut elapsed = 0.0;
        let mut i = 0;
        loop {
            let to = self.waypoint(bounds, i);
            let leg_ms = from.distance(to) / speed * 1000.0;
            if elapsed + leg_ms >= t {
                let frac = if leg_ms > 0.0 { (t - elapsed) / leg_ms } else { 1.0 };
                return Point::new(from.x + frac * (to.x - from.x), from.y + frac * (to.y - from.y));
            }
            elapsed += leg_ms;
            from = to;
            i += 1;
        }
    }

    fn jitter_rate(&self, std: f64, block: u64) -> f64 {
        if std <= 0.0 {
            return 0.0;
        }
        let mut rng = stream_rng(self.seed, MOTION, JITTER_INDEX_BASE + block);
        Normal::new(0.0, std).expect("finite std").sample(&mut rng)
    }

    /// Orientation offset: integrates a piecewise-constant random rate with
    /// linear decay toward zero, clipped to `±limit`.
    fn jitter(&self, std: f64, reversion_ms: f64, limit: f64, t: f64) -> f64 {
        let decay = if reversion_ms > 0.0 {
            (JITTER_BLOCK_MS / reversion_ms).min(1.0)
        } else {
            0.0
        };
        let whole = (t / JITTER_BLOCK_MS).floor();
        let mut offset = 0.0;
        for b in 0..whole as u64 {
            offset = (offset * (1.0 - decay) + self.jitter_rate(std, b) * JITTER_BLOCK_MS / 1000.0)
                .clamp(-limit, limit);
        }
        let frac = (t - whole * JITTER_BLOCK_MS) / JITTER_BLOCK_MS;
        let next = (offset * (1.0 - decay)
            + self.jitter_rate(std, whole as u64) * JITTER_BLOCK_MS / 1000.0)
            .clamp(-limit, limit);
        offset + frac * (next - offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn walk(seed: u64) -> MotionModel {
        MotionModel {
            kind: MotionKind::RandomWalk {
                speed: 1.4,
                bounds: Bounds {
                    min: Point::new(3.0, -1.8),
                    max: Point::new(5.0, 1.8),
                },
                orientation_jitter: DEFAULT_JITTER_STD,
                jitter_reversion_ms: DEFAULT_JITTER_REVERSION_MS,
                look_at: Point::new(0.0, 0.0),
                jitter_limit: 60.0,
            },
            start: Point::new(4.5, 0.0),
            heading: 180.0,
            seed,
        }
    }

    #[test]
    fn lateral_examples() {
        let m = MotionModel::lateral(Point::new(4.5, -1.5), 180.0, 1.4, 3.0, 90.0);
        let s0 = m.sample_state(0.0);
        assert_eq!(s0.position, Point::new(4.5, -1.5));
        let s1 = m.sample_state(1000.0);
        assert!((s1.position.distance(s0.position) - 1.4).abs() < 1e-12);
        // turns around at the end of the path
        let s3 = m.sample_state(3000.0);
        assert!((s3.position.y - (-1.5 + 1.8)).abs() < 1e-9);
        assert_eq!(s1.orientation, 180.0);
    }

    #[test]
    fn rotational_examples() {
        let m = MotionModel::rotational(Point::new(4.5, 0.0), 0.0, 120.0);
        assert_eq!(m.sample_state(0.0).orientation, 0.0);
        assert!((m.sample_state(500.0).orientation - 60.0).abs() < 1e-9);
        assert!((m.sample_state(1000.0).orientation - 0.0).abs() < 1e-9);
        assert!((m.sample_state(1500.0).orientation + 60.0).abs() < 1e-9);
        assert_eq!(m.sample_state(700.0).position, Point::new(4.5, 0.0));
    }

    #[test]
    fn random_walk_stays_in_bounds_and_limits_jitter() {
        let m = walk(11);
        for i in 0..200 {
            let s = m.sample_state(i as f64 * 50.0);
            assert!(s.position.x >= 3.0 - 1e-9 && s.position.x <= 5.0 + 1e-9 || i == 0);
            let facing = s.position.bearing_to(Point::new(0.0, 0.0));
            assert!(crate::beam::angular_offset(s.orientation, facing) <= 60.0 + 1e-9);
        }
    }

    #[test]
    fn random_walk_speed_is_respected() {
        let m = walk(3);
        for i in 0..100 {
            let a = m.sample_state(i as f64 * 10.0).position;
            let b = m.sample_state(i as f64 * 10.0 + 10.0).position;
            assert!(a.distance(b) <= 1.4 * 0.010 + 1e-9);
        }
    }

    #[test]
    fn seeds_change_random_walk() {
        assert_ne!(walk(1).sample_state(2000.0), walk(2).sample_state(2000.0));
    }

    #[test]
    fn serde_shape() {
        let m = MotionModel::lateral(Point::new(1.0, 2.0), 90.0, 1.4, 3.0, 0.0);
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"kind\":\"lateral\""));
        let back: MotionModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn resampling_is_bit_exact(seed in 0u64..1000, t in 0.0f64..10_000.0) {
            let m = walk(seed);
            prop_assert_eq!(m.sample_state(t), m.sample_state(t));
            prop_assert_eq!(m.sample_state(t).time, t);
        }

        #[test]
        fn rotation_stays_in_sweep(t in 0.0f64..20_000.0, w in 10.0f64..400.0) {
            let m = MotionModel::rotational(Point::new(0.0, 0.0), 0.0, w);
            prop_assert!(m.sample_state(t).orientation.abs() <= 60.0 + 1e-9);
        }
    }
}
