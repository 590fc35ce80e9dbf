//! Ready-made experiment configurations: the default room, the three
//! mobility patterns, randomized blockage trials and coherence-time series.

use rand::Rng;

use crate::baselines::oracle_best_pair;
use crate::beam::BeamCodebook;
use crate::channel::{Link, LinkBudget, CALIBRATION_TARGET_DBM};
use crate::config::ScenarioConfig;
use crate::geometry::{Blocker, Environment, Point, Segment, Wall, Window, DEFAULT_REFLECTION_LOSS_DB};
use crate::metrics::{compute_bct, Bct, MetricsError};
use crate::motion::{Bounds, MotionKind, MotionModel, DEFAULT_JITTER_REVERSION_MS, DEFAULT_JITTER_STD};
use crate::rng::{stream_rng, SCENARIO};

/// Distance from the TX to the mobile's home position, m.
pub const ROOM_DISTANCE_M: f64 = 4.5;
/// Offset of the reflecting wall from the TX boresight line, m.
pub const WALL_OFFSET_M: f64 = 2.0;
pub const SERIES_STEP_MS: f64 = 10.0;

/// TX at the origin facing +x with a wall running parallel to the boresight.
pub fn default_scene() -> Environment {
    let mut env = Environment::free_space(Point::new(0.0, 0.0), 0.0);
    env.walls.push(Wall {
        segment: Segment {
            a: Point::new(-2.0, -WALL_OFFSET_M),
            b: Point::new(15.0, -WALL_OFFSET_M),
        },
        reflection_loss: DEFAULT_REFLECTION_LOSS_DB,
    });
    env
}

/// Back-and-forth walk across the boresight, facing the TX.
pub fn lateral(speed: f64, seed: u64) -> ScenarioConfig {
    let m = MotionModel::lateral(Point::new(ROOM_DISTANCE_M, -1.5), 180.0, speed, 3.0, 90.0);
    with_seed(ScenarioConfig::new(default_scene(), m), seed)
}

/// In-place rotation on the boresight, starting aligned.
pub fn rotational(angular_speed: f64, seed: u64) -> ScenarioConfig {
    let m = MotionModel::rotational(Point::new(ROOM_DISTANCE_M, 0.0), 180.0, angular_speed);
    with_seed(ScenarioConfig::new(default_scene(), m), seed)
}

/// Walk between random waypoints while loosely facing the TX.
pub fn random_walk(speed: f64, seed: u64) -> ScenarioConfig {
    let m = MotionModel {
        kind: MotionKind::RandomWalk {
            speed,
            bounds: Bounds {
                min: Point::new(3.0, -1.5),
                max: Point::new(5.0, 1.5),
            },
            orientation_jitter: DEFAULT_JITTER_STD,
            jitter_reversion_ms: DEFAULT_JITTER_REVERSION_MS,
            look_at: Point::new(0.0, 0.0),
            jitter_limit: 60.0,
        },
        start: Point::new(ROOM_DISTANCE_M, 0.0),
        heading: 180.0,
        seed: 0,
    };
    with_seed(ScenarioConfig::new(default_scene(), m), seed)
}

fn with_seed(mut c: ScenarioConfig, seed: u64) -> ScenarioConfig {
    c.seed = seed;
    c
}

/// A stationary mobile near the wall whose LoS is cut once by a body-sized
/// blocker. Placement, size, depth and timing are drawn from `seed`.
pub fn blockage_trial(seed: u64) -> ScenarioConfig {
    let mut rng = stream_rng(seed, SCENARIO, 0);
    let rx = Point::new(rng.random_range(4.0..5.0), rng.random_range(-1.9..-1.65));
    let tx = Point::new(0.0, 0.0);
    let toward_tx = rx.bearing_to(tx);
    let center = rx.offset(toward_tx, rng.random_range(0.3..0.6));
    let start = rng.random_range(1000.0..3000.0);
    let length = rng.random_range(500.0..2000.0);
    let blocker = Blocker::fixed(center, rng.random_range(0.1..0.2), rng.random_range(20.0..30.0))
        .with_schedule(vec![Window {
            start_ms: start,
            end_ms: start + length,
        }]);
    let mut env = default_scene();
    env.blockers.push(blocker);
    let mut c = ScenarioConfig::new(env, MotionModel::fixed(rx, toward_tx));
    c.duration_ms = 6000.0;
    c.seed = seed;
    c
}

/// RSS of the pair aligned at t = 0, held fixed while the mobile moves.
pub fn aligned_pair_series(link: &Link, motion: &MotionModel, duration_ms: f64, step_ms: f64) -> Vec<(f64, f64)> {
    let init = oracle_best_pair(link, &motion.sample_state(0.0), 0.0);
    let steps = (duration_ms / step_ms).round() as usize;
    (0..=steps)
        .map(|i| {
            let t = i as f64 * step_ms;
            (t, link.rss(init.tx_beam, init.rx_beam, &motion.sample_state(t), t).rss)
        })
        .collect()
}

/// Unobstructed link with `codebook` at both ends, calibrated at `distance`.
pub fn free_space_link(codebook: &BeamCodebook, distance: f64) -> Link {
    Link {
        env: Environment::free_space(Point::new(0.0, 0.0), 0.0),
        budget: LinkBudget::default()
            .calibrated(codebook, codebook, distance, CALIBRATION_TARGET_DBM)
            .expect("positive distance"),
        tx_codebook: codebook.clone(),
        rx_codebook: codebook.clone(),
    }
}

/// Coherence time of a walk across the boresight at `distance`.
pub fn lateral_bct(codebook: &BeamCodebook, speed: f64, distance: f64) -> Result<Bct, MetricsError> {
    let horizon = 6000.0;
    let m = MotionModel::lateral(Point::new(distance, 0.0), 180.0, speed, speed * horizon / 1000.0, 90.0);
    compute_bct(&aligned_pair_series(&free_space_link(codebook, distance), &m, horizon, SERIES_STEP_MS))
}

/// Coherence time of an in-place rotation at `angular_speed` deg/s.
pub fn rotational_bct(codebook: &BeamCodebook, angular_speed: f64, distance: f64) -> Result<Bct, MetricsError> {
    let m = MotionModel::rotational(Point::new(distance, 0.0), 180.0, angular_speed);
    let horizon = 30.0 * 1000.0 / angular_speed;
    compute_bct(&aligned_pair_series(&free_space_link(codebook, distance), &m, horizon, SERIES_STEP_MS / 10.0))
}
