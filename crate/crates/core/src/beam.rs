//! Directional beam codebooks and the gain pattern used for every beam.
//!
//! A beam's main lobe is quadratic in dB over the normalized offset from
//! boresight, so the -3 dB point sits exactly at half the beamwidth. Past one
//! full beamwidth the pattern drops to a flat sidelobe floor, optionally
//! perturbed by a seeded ripple that is fixed per (beam, offset bucket).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light used for path loss, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

/// Default peak gain for a 12-element array, 10*log10(12) dBi.
pub const DEFAULT_PEAK_GAIN_DBI: f64 = 10.791_812_460_476_248;

pub const DEFAULT_SECTOR_WIDTH_DEG: f64 = 120.0;
pub const DEFAULT_BEAM_COUNT: usize = 25;
pub const NARROW_BEAMWIDTH_DEG: f64 = 20.0;
pub const WIDE_BEAMWIDTH_DEG: f64 = 30.0;
/// Narrow preset mentioned for an alternative testbed configuration.
pub const NARROW_10_BEAMWIDTH_DEG: f64 = 10.0;
pub const DEFAULT_SIDELOBE_SUPPRESSION_DB: f64 = 20.0;

const RIPPLE_BUCKET_DEG: f64 = 5.0;
const RIPPLE_BUCKETS: usize = 37;

#[derive(Debug, Error)]
pub enum BeamError {
    #[error("distance must be positive and finite, got {0}")]
    InvalidDistance(f64),
    #[error("frequency must be positive and finite, got {0}")]
    InvalidFrequency(f64),
    #[error("beam index {index} out of range for a codebook of {count} beams")]
    InvalidIndex { index: usize, count: usize },
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("failed to read codebook file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse codebook file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One directional beam of a phased-array codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub index: usize,
    /// Degrees relative to the array normal.
    pub boresight: f64,
    /// Full width at -3 dB, degrees.
    pub beamwidth: f64,
    /// dBi.
    pub peak_gain: f64,
}

impl Beam {
    /// Main-lobe gain, or the flat sidelobe floor beyond one beamwidth.
    pub fn gain(&self, direction: f64, sidelobe_suppression: f64) -> f64 {
        let offset = angular_offset(direction, self.boresight);
        if offset <= self.beamwidth {
            let normalized = 2.0 * offset / self.beamwidth;
            self.peak_gain - 3.0 * normalized * normalized
        } else {
            self.peak_gain - sidelobe_suppression
        }
    }
}

/// Gain of `beam` toward `direction` (degrees, array frame) with the default
/// 20 dB sidelobe floor and no ripple.
pub fn beam_gain(beam: &Beam, direction: f64) -> f64 {
    beam.gain(direction, DEFAULT_SIDELOBE_SUPPRESSION_DB)
}

/// Absolute angular difference wrapped to [0, 180].
pub fn angular_offset(a: f64, b: f64) -> f64 {
    wrap_deg(a - b).abs()
}

/// Wrap an angle in degrees to (-180, 180].
pub fn wrap_deg(angle: f64) -> f64 {
    let mut a = angle % 360.0;
    if a > 180.0 {
        a -= 360.0;
    } else if a <= -180.0 {
        a += 360.0;
    }
    a
}

/// Free-space path loss in dB, 20*log10(4*pi*d*f/c).
pub fn fspl(distance_m: f64, frequency_hz: f64) -> Result<f64, BeamError> {
    if !(distance_m > 0.0 && distance_m.is_finite()) {
        return Err(BeamError::InvalidDistance(distance_m));
    }
    if !(frequency_hz > 0.0 && frequency_hz.is_finite()) {
        return Err(BeamError::InvalidFrequency(frequency_hz));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance_m * frequency_hz / SPEED_OF_LIGHT).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Steering {
    #[default]
    Azimuth,
    FullSpace,
}

impl Steering {
    /// Neighbor count of one beam: two in a 1-D azimuth sweep, eight on a 2-D grid.
    pub fn neighbor_bound(self) -> usize {
        match self {
            Steering::Azimuth => 2,
            Steering::FullSpace => 8,
        }
    }
}

/// Parameters of the region outside the main lobe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SidelobeModel {
    pub suppression_db: f64,
    /// Peak amplitude of the seeded ripple; 0 disables it.
    pub ripple_db: f64,
}

impl Default for SidelobeModel {
    fn default() -> Self {
        Self {
            suppression_db: DEFAULT_SIDELOBE_SUPPRESSION_DB,
            ripple_db: 0.0,
        }
    }
}

/// Ordered, equally spaced set of beams covering a sector.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCodebook {
    beams: Vec<Beam>,
    sector_width: f64,
    steering: Steering,
    sidelobe: SidelobeModel,
    ripple: Vec<f64>,
}

/// On-disk codebook: either a bare list of beams or a list with options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodebookFile {
    Beams(Vec<Beam>),
    Full {
        beams: Vec<Beam>,
        #[serde(default)]
        steering: Steering,
        #[serde(default)]
        sidelobe: SidelobeModel,
    },
}

impl BeamCodebook {
    /// `count` beams spread evenly across `sector_width`, centered on the array normal.
    pub fn uniform(
        count: usize,
        sector_width: f64,
        beamwidth: f64,
        peak_gain: f64,
    ) -> Result<Self, BeamError> {
        if count == 0 {
            return Err(BeamError::InvalidCodebook("codebook needs at least one beam".into()));
        }
        let spacing = if count > 1 {
            sector_width / (count - 1) as f64
        } else {
            0.0
        };
        let start = if count > 1 { -sector_width / 2.0 } else { 0.0 };
        let beams = (0..count)
            .map(|index| Beam {
                index,
                boresight: start + spacing * index as f64,
                beamwidth,
                peak_gain,
            })
            .collect();
        Self::from_beams(beams, Steering::Azimuth, SidelobeModel::default())
    }

    /// 25 beams of 20 degrees over 120 degrees.
    pub fn narrow() -> Self {
        Self::uniform(
            DEFAULT_BEAM_COUNT,
            DEFAULT_SECTOR_WIDTH_DEG,
            NARROW_BEAMWIDTH_DEG,
            DEFAULT_PEAK_GAIN_DBI,
        )
        .expect("preset codebook is valid")
    }

    /// 25 beams of 30 degrees over 120 degrees.
    pub fn wide() -> Self {
        Self::uniform(
            DEFAULT_BEAM_COUNT,
            DEFAULT_SECTOR_WIDTH_DEG,
            WIDE_BEAMWIDTH_DEG,
            DEFAULT_PEAK_GAIN_DBI,
        )
        .expect("preset codebook is valid")
    }

    pub fn from_beams(
        beams: Vec<Beam>,
        steering: Steering,
        sidelobe: SidelobeModel,
    ) -> Result<Self, BeamError> {
        if beams.is_empty() {
            return Err(BeamError::InvalidCodebook("codebook needs at least one beam".into()));
        }
        for (i, b) in beams.iter().enumerate() {
            if b.index != i {
                return Err(BeamError::InvalidCodebook(format!(
                    "beam at position {i} has index {}",
                    b.index
                )));
            }
            if !(b.beamwidth > 0.0 && b.beamwidth.is_finite()) {
                return Err(BeamError::InvalidCodebook(format!(
                    "beam {i} has non-positive beamwidth {}",
                    b.beamwidth
                )));
            }
            if !b.peak_gain.is_finite() || !b.boresight.is_finite() {
                return Err(BeamError::InvalidCodebook(format!("beam {i} has non-finite fields")));
            }
        }
        let sector_width = beams[beams.len() - 1].boresight - beams[0].boresight;
        if beams.len() > 1 {
            let spacing = sector_width / (beams.len() - 1) as f64;
            if spacing <= 0.0 {
                return Err(BeamError::InvalidCodebook("beams must be sorted by boresight".into()));
            }
            for pair in beams.windows(2) {
                let step = pair[1].boresight - pair[0].boresight;
                if (step - spacing).abs() > 1e-6 * spacing.max(1.0) {
                    return Err(BeamError::InvalidCodebook(format!(
                        "beams {} and {} are {step} degrees apart, expected {spacing}",
                        pair[0].index, pair[1].index
                    )));
                }
            }
        }
        Ok(Self {
            beams,
            sector_width,
            steering,
            sidelobe,
            ripple: Vec::new(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BeamError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, BeamError> {
        match serde_json::from_str::<CodebookFile>(text)? {
            CodebookFile::Beams(beams) => {
                Self::from_beams(beams, Steering::Azimuth, SidelobeModel::default())
            }
            CodebookFile::Full {
                beams,
                steering,
                sidelobe,
            } => Self::from_beams(beams, steering, sidelobe),
        }
    }

    pub fn to_file(&self) -> CodebookFile {
        CodebookFile::Full {
            beams: self.beams.clone(),
            steering: self.steering,
            sidelobe: self.sidelobe,
        }
    }

    /// Replace the sidelobe model. A non-zero ripple is drawn once here from
    /// `seed` on the given stream and stays fixed for the codebook's lifetime.
    pub fn with_sidelobe(mut self, sidelobe: SidelobeModel, seed: u64, stream: u64) -> Self {
        self.sidelobe = sidelobe;
        self.ripple.clear();
        if sidelobe.ripple_db > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            self.ripple = (0..self.beams.len() * RIPPLE_BUCKETS)
                .map(|_| rng.random_range(-sidelobe.ripple_db..=sidelobe.ripple_db))
                .collect();
        }
        self
    }

    pub fn beams(&self) -> &[Beam] {
        &self.beams
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn sector_width(&self) -> f64 {
        self.sector_width
    }

    /// Boresight spacing between adjacent beams, 0 for a single beam.
    pub fn spacing(&self) -> f64 {
        if self.beams.len() > 1 {
            self.sector_width / (self.beams.len() - 1) as f64
        } else {
            0.0
        }
    }

    pub fn steering(&self) -> Steering {
        self.steering
    }

    pub fn neighbor_bound(&self) -> usize {
        self.steering.neighbor_bound()
    }

    pub fn sidelobe(&self) -> SidelobeModel {
        self.sidelobe
    }

    pub fn beam(&self, index: usize) -> Result<&Beam, BeamError> {
        self.beams.get(index).ok_or(BeamError::InvalidIndex {
            index,
            count: self.beams.len(),
        })
    }

    /// Gain of beam `index` toward `direction` (degrees, array frame).
    ///
    /// Panics if `index` is out of range; callers validate indices up front.
    pub fn gain(&self, index: usize, direction: f64) -> f64 {
        let beam = &self.beams[index];
        let offset = angular_offset(direction, beam.boresight);
        let base = beam.gain(direction, self.sidelobe.suppression_db);
        if offset > beam.beamwidth && !self.ripple.is_empty() {
            let bucket = ((offset / RIPPLE_BUCKET_DEG) as usize).min(RIPPLE_BUCKETS - 1);
            base + self.ripple[index * RIPPLE_BUCKETS + bucket]
        } else {
            base
        }
    }

    /// Index of the beam whose boresight is closest to `direction`, lower index on ties.
    pub fn closest(&self, direction: f64) -> usize {
        let mut best = 0;
        let mut best_offset = f64::INFINITY;
        for b in &self.beams {
            let off = angular_offset(direction, b.boresight);
            if off < best_offset {
                best = b.index;
                best_offset = off;
            }
        }
        best
    }

    pub fn contains(&self, index: usize) -> bool {
        index < self.beams.len()
    }
}

/// Azimuth neighbors of beam `index`: `index - 1` and `index + 1`, clamped to
/// the sector. Beam 0 and beam N-1 face opposite sector edges and are not
/// neighbors of each other.
pub fn neighbors(codebook: &BeamCodebook, index: usize) -> Result<Vec<usize>, BeamError> {
    if !codebook.contains(index) {
        return Err(BeamError::InvalidIndex {
            index,
            count: codebook.len(),
        });
    }
    let mut out = Vec::with_capacity(2);
    if index > 0 {
        out.push(index - 1);
    }
    if index + 1 < codebook.len() {
        out.push(index + 1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beam20() -> Beam {
        Beam {
            index: 0,
            boresight: 0.0,
            beamwidth: 20.0,
            peak_gain: 10.0,
        }
    }

    #[test]
    fn gain_examples() {
        let b = beam20();
        assert_eq!(beam_gain(&b, 0.0), 10.0);
        assert!((beam_gain(&b, 10.0) - 7.0).abs() < 1e-12);
        assert!((beam_gain(&b, -10.0) - 7.0).abs() < 1e-12);
        assert!((beam_gain(&b, 20.0) - (10.0 - 12.0)).abs() < 1e-12);
        assert!((beam_gain(&b, 90.0) - (10.0 - 20.0)).abs() < 1e-12);
    }

    #[test]
    fn offsets_wrap_across_180() {
        assert!((angular_offset(179.0, -179.0) - 2.0).abs() < 1e-12);
        assert!((angular_offset(-90.0, 90.0) - 180.0).abs() < 1e-12);
        let b = Beam {
            boresight: 175.0,
            ..beam20()
        };
        assert!((beam_gain(&b, -175.0) - beam_gain(&b, 165.0)).abs() < 1e-12);
    }

    #[test]
    fn fspl_examples() {
        assert!((fspl(10.0, 28e9).unwrap() - 81.4).abs() < 0.1);
        assert!((fspl(5.0, 60e9).unwrap() - 82.0).abs() < 0.1);
        let f = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI);
        assert!(fspl(1.0, f).unwrap().abs() < 1e-9);
    }

    #[test]
    fn fspl_rejects_non_positive() {
        assert!(matches!(fspl(0.0, 1e9), Err(BeamError::InvalidDistance(_))));
        assert!(matches!(fspl(-1.0, 1e9), Err(BeamError::InvalidDistance(_))));
        assert!(matches!(fspl(1.0, 0.0), Err(BeamError::InvalidFrequency(_))));
        assert!(matches!(fspl(f64::NAN, 1e9), Err(BeamError::InvalidDistance(_))));
    }

    #[test]
    fn default_codebook_layout() {
        let cb = BeamCodebook::narrow();
        assert_eq!(cb.len(), 25);
        assert_eq!(cb.beams()[0].boresight, -60.0);
        assert_eq!(cb.beams()[24].boresight, 60.0);
        assert!((cb.spacing() - 5.0).abs() < 1e-12);
        assert_eq!(cb.neighbor_bound(), 2);
        assert_eq!(cb.closest(0.0), 12);
        assert_eq!(cb.closest(2.5), 12);
        assert_eq!(cb.closest(-200.0), cb.closest(160.0));
    }

    #[test]
    fn neighbor_examples() {
        let cb = BeamCodebook::narrow();
        assert_eq!(neighbors(&cb, 12).unwrap(), vec![11, 13]);
        assert_eq!(neighbors(&cb, 0).unwrap(), vec![1]);
        assert_eq!(neighbors(&cb, 24).unwrap(), vec![23]);
        assert!(matches!(
            neighbors(&cb, 25),
            Err(BeamError::InvalidIndex { index: 25, count: 25 })
        ));
        let single = BeamCodebook::uniform(1, 120.0, 20.0, 10.0).unwrap();
        assert!(neighbors(&single, 0).unwrap().is_empty());
    }

    #[test]
    fn codebook_validation() {
        let mut beams = BeamCodebook::narrow().beams().to_vec();
        beams[3].boresight += 1.0;
        assert!(BeamCodebook::from_beams(beams, Steering::Azimuth, SidelobeModel::default()).is_err());
        assert!(BeamCodebook::uniform(0, 120.0, 20.0, 10.0).is_err());
        assert!(BeamCodebook::uniform(5, 120.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn codebook_json_list_and_object() {
        let json = r#"[
            {"index":0,"boresight":-10.0,"beamwidth":20.0,"peak_gain":10.0},
            {"index":1,"boresight":0.0,"beamwidth":20.0,"peak_gain":10.0},
            {"index":2,"boresight":10.0,"beamwidth":20.0,"peak_gain":10.0}
        ]"#;
        let cb = BeamCodebook::from_json(json).unwrap();
        assert_eq!(cb.len(), 3);
        assert_eq!(cb.sector_width(), 20.0);
        let full = serde_json::to_string(&cb.to_file()).unwrap();
        let back = BeamCodebook::from_json(&full).unwrap();
        assert_eq!(back.beams(), cb.beams());
    }

    #[test]
    fn ripple_is_seeded_and_bounded() {
        let model = SidelobeModel {
            suppression_db: 20.0,
            ripple_db: 5.0,
        };
        let a = BeamCodebook::narrow().with_sidelobe(model, 7, 1);
        let b = BeamCodebook::narrow().with_sidelobe(model, 7, 1);
        let c = BeamCodebook::narrow().with_sidelobe(model, 8, 1);
        let peak = DEFAULT_PEAK_GAIN_DBI;
        let mut differs = false;
        for idx in 0..25 {
            for dir in [-170.0, -100.0, 95.0, 150.0] {
                let g = a.gain(idx, dir);
                assert_eq!(g, b.gain(idx, dir));
                assert!(g >= peak - 25.0 && g <= peak - 15.0);
                differs |= g != c.gain(idx, dir);
            }
            // main lobe untouched
            let bore = a.beams()[idx].boresight;
            assert_eq!(a.gain(idx, bore), peak);
        }
        assert!(differs);
    }
}
