//! Scenario configuration: one JSON document describing a reproducible run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::SsbSchedule;
use crate::beam::{
    BeamCodebook, BeamError, SidelobeModel, DEFAULT_BEAM_COUNT, DEFAULT_PEAK_GAIN_DBI,
    DEFAULT_SECTOR_WIDTH_DEG, NARROW_10_BEAMWIDTH_DEG,
};
use crate::channel::{Link, LinkBudget, CALIBRATION_TARGET_DBM, DEFAULT_BANDWIDTH_HZ, DEFAULT_CARRIER_HZ, DEFAULT_NOISE_FLOOR_DBM};
use crate::geometry::{Environment, MIN_BLOCKER_ATTENUATION_DB};
use crate::metrics::McsLadder;
use crate::motion::MotionModel;
use crate::protocol::ProtocolConfig;
use crate::rng;
use crate::trace::Policy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {what}: {source}")]
    Parse {
        what: String,
        source: serde_json::Error,
    },
    #[error("scene file {0} not found")]
    MissingScene(PathBuf),
    #[error("codebook has zero beams")]
    ZeroBeams,
    #[error("codebook error: {0}")]
    Codebook(#[from] BeamError),
    #[error("duration must be positive, got {0} ms")]
    NonPositiveDuration(f64),
    #[error("decision epoch ({epoch_ms} ms) is smaller than a slot ({slot_ms} ms)")]
    EpochSmallerThanSlot { epoch_ms: f64, slot_ms: f64 },
    #[error("{what} ({value} ms) must be a whole multiple of {unit} ({unit_ms} ms)")]
    NotMultiple {
        what: &'static str,
        value: f64,
        unit: &'static str,
        unit_ms: f64,
    },
    #[error("no policies selected")]
    NoPolicies,
    #[error("blocker {index} attenuation {value} dB is below the {min} dB blockage floor")]
    WeakBlocker { index: usize, value: f64, min: f64 },
    #[error("mobile starts on top of the transmitter")]
    CoLocated,
    #[error("invalid MCS ladder: {0}")]
    Ladder(String),
}

/// A scene given inline or as a path relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneRef {
    Path(PathBuf),
    Inline(Environment),
}

/// A codebook given by preset name (`narrow`, `wide`, `narrow10`), path, or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodebookRef {
    Named(String),
    Inline(crate::beam::CodebookFile),
}

impl Default for CodebookRef {
    fn default() -> Self {
        CodebookRef::Named("narrow".into())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Codebooks {
    #[serde(default)]
    pub tx: CodebookRef,
    #[serde(default)]
    pub rx: CodebookRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Fixed transmit power; calibrated automatically when absent.
    pub tx_power: Option<f64>,
    pub noise_floor: f64,
    pub carrier: f64,
    pub bandwidth: f64,
    /// Distance used for calibration; defaults to the mobile's start distance.
    pub calibration_distance: Option<f64>,
    pub target_rss: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            tx_power: None,
            noise_floor: DEFAULT_NOISE_FLOOR_DBM,
            carrier: DEFAULT_CARRIER_HZ,
            bandwidth: DEFAULT_BANDWIDTH_HZ,
            calibration_distance: None,
            target_rss: CALIBRATION_TARGET_DBM,
        }
    }
}

fn default_policies() -> Vec<Policy> {
    vec![Policy::Beamsurfer, Policy::Oracle]
}
fn default_duration() -> f64 {
    10_000.0
}
fn default_epoch() -> f64 {
    100.0
}
fn default_slot_us() -> f64 {
    100.0
}
fn default_frame() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scene: SceneRef,
    pub motion: MotionModel,
    #[serde(default)]
    pub codebooks: Codebooks,
    #[serde(default)]
    pub sidelobe: SidelobeModel,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub ssb: SsbSchedule,
    #[serde(default = "default_policies")]
    pub policies: Vec<Policy>,
    #[serde(default = "default_duration")]
    pub duration_ms: f64,
    #[serde(default = "default_epoch")]
    pub decision_epoch_ms: f64,
    #[serde(default = "default_slot_us")]
    pub slot_us: f64,
    #[serde(default = "default_frame")]
    pub frame_ms: f64,
    #[serde(default)]
    pub seed: u64,
    /// Std of Gaussian noise added to every protocol measurement, dB.
    #[serde(default)]
    pub measurement_noise_db: f64,
    #[serde(default)]
    pub mcs_ladder: McsLadder,
}

/// A validated, fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub link: Link,
    pub motion: MotionModel,
    pub config_hash: String,
    /// Directory relative paths in the config were resolved against.
    pub base_dir: PathBuf,
}

fn is_whole_multiple(value: f64, unit: f64) -> bool {
    let r = value / unit;
    (r - r.round()).abs() < 1e-9
}

fn load_codebook(r: &CodebookRef, base: &Path) -> Result<BeamCodebook, ConfigError> {
    let cb = match r {
        CodebookRef::Named(name) => match name.as_str() {
            "narrow" => BeamCodebook::narrow(),
            "wide" => BeamCodebook::wide(),
            "narrow10" => BeamCodebook::uniform(
                DEFAULT_BEAM_COUNT,
                DEFAULT_SECTOR_WIDTH_DEG,
                NARROW_10_BEAMWIDTH_DEG,
                DEFAULT_PEAK_GAIN_DBI,
            )?,
            path => {
                let p = base.join(path);
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                BeamCodebook::from_json(&text)?
            }
        },
        CodebookRef::Inline(file) => {
            BeamCodebook::from_json(&serde_json::to_string(file).expect("codebook serializes"))?
        }
    };
    if cb.is_empty() {
        return Err(ConfigError::ZeroBeams);
    }
    Ok(cb)
}

impl ScenarioConfig {
    /// Defaults for everything except the scene and the motion.
    pub fn new(scene: Environment, motion: MotionModel) -> Self {
        Self {
            scene: SceneRef::Inline(scene),
            motion,
            codebooks: Codebooks::default(),
            sidelobe: SidelobeModel::default(),
            budget: BudgetConfig::default(),
            protocol: ProtocolConfig::default(),
            ssb: SsbSchedule::default(),
            policies: default_policies(),
            duration_ms: default_duration(),
            decision_epoch_ms: default_epoch(),
            slot_us: default_slot_us(),
            frame_ms: default_frame(),
            seed: 0,
            measurement_noise_db: 0.0,
            mcs_ladder: McsLadder::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            what: "config".into(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text)?.resolve(base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the configuration with the seed left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Validates the configuration and builds the scenario. Relative paths are
    /// resolved against `base`.
    pub fn resolve(mut self, base: &Path) -> Result<Scenario, ConfigError> {
        if let SceneRef::Path(p) = &self.scene {
            let full = base.join(p);
            let text = std::fs::read_to_string(&full).map_err(|_| ConfigError::MissingScene(full.clone()))?;
            let env: Environment = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                what: full.display().to_string(),
                source,
            })?;
            self.scene = SceneRef::Inline(env);
        }
        let SceneRef::Inline(env) = &self.scene else {
            unreachable!("scene resolved above")
        };
        let mut env = env.clone();

        if !(self.duration_ms > 0.0) {
            return Err(ConfigError::NonPositiveDuration(self.duration_ms));
        }
        let slot_ms = self.slot_us / 1000.0;
        if !(self.decision_epoch_ms >= slot_ms) || slot_ms <= 0.0 {
            return Err(ConfigError::EpochSmallerThanSlot {
                epoch_ms: self.decision_epoch_ms,
                slot_ms,
            });
        }
        if !is_whole_multiple(self.decision_epoch_ms, slot_ms) {
            return Err(ConfigError::NotMultiple {
                what: "decision epoch",
                value: self.decision_epoch_ms,
                unit: "slot",
                unit_ms: slot_ms,
            });
        }
        if !(self.frame_ms > 0.0) || !is_whole_multiple(self.decision_epoch_ms, self.frame_ms) {
            return Err(ConfigError::NotMultiple {
                what: "decision epoch",
                value: self.decision_epoch_ms,
                unit: "frame",
                unit_ms: self.frame_ms,
            });
        }
        if self.policies.is_empty() {
            return Err(ConfigError::NoPolicies);
        }
        for (index, b) in env.blockers.iter().enumerate() {
            if b.attenuation < MIN_BLOCKER_ATTENUATION_DB {
                return Err(ConfigError::WeakBlocker {
                    index,
                    value: b.attenuation,
                    min: MIN_BLOCKER_ATTENUATION_DB,
                });
            }
        }
        self.mcs_ladder
            .validate()
            .map_err(|e| ConfigError::Ladder(e.to_string()))?;

        let tx_cb = load_codebook(&self.codebooks.tx, base)?.with_sidelobe(self.sidelobe, self.seed, rng::RIPPLE_TX);
        let rx_cb = load_codebook(&self.codebooks.rx, base)?.with_sidelobe(self.sidelobe, self.seed, rng::RIPPLE_RX);

        let motion = self.motion.clone().with_seed(self.seed);
        for (i, b) in env.blockers.iter_mut().enumerate() {
            if let Some(m) = b.motion.take() {
                let seed = self.seed ^ (rng::BLOCKERS << 48) ^ i as u64;
                b.motion = Some(m.with_seed(seed));
            }
        }
        let start = motion.sample_state(0.0).position;
        let distance = env.tx_position.distance(start);
        if distance <= 0.0 {
            return Err(ConfigError::CoLocated);
        }
        let budget = LinkBudget {
            tx_power: 0.0,
            noise_floor: self.budget.noise_floor,
            carrier: self.budget.carrier,
            bandwidth: self.budget.bandwidth,
        };
        let budget = match self.budget.tx_power {
            Some(p) => LinkBudget { tx_power: p, ..budget },
            None => budget.calibrated(
                &tx_cb,
                &rx_cb,
                self.budget.calibration_distance.unwrap_or(distance),
                self.budget.target_rss,
            )?,
        };
        self.protocol.frame_ms = self.frame_ms;
        self.protocol.probe_slot_ms = slot_ms;
        self.protocol.neighbor_bound = tx_cb.neighbor_bound().max(rx_cb.neighbor_bound()).max(8);
        let config_hash = self.hash();
        Ok(Scenario {
            link: Link {
                env,
                budget,
                tx_codebook: tx_cb,
                rx_codebook: rx_cb,
            },
            motion,
            config_hash,
            base_dir: base.to_path_buf(),
            config: self,
        })
    }
}

impl Scenario {
    pub fn with_seed(&self, seed: u64) -> Result<Scenario, ConfigError> {
        let mut c = self.config.clone();
        c.seed = seed;
        c.resolve(&self.base_dir)
    }
}
