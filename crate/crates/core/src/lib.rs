//! Deterministic simulator of in-band mm-wave beam tracking with
//! neighbor-beam surfing and reflected-path blockage recovery.

pub mod beam;
pub mod geometry;
pub mod motion;
pub mod rng;
pub mod channel;
pub mod protocol;
pub mod baselines;
pub mod trace;
pub mod metrics;
pub mod config;
pub mod engine;
pub mod scenarios;
