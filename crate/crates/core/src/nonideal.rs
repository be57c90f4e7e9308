//! Device non-idealities: programming-stage faults and variability, and
//! read-stage random telegraph noise (RTN).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{ConductanceTile, DeviceModel, DeviceStates};
use crate::rng::{self, Rng};

/// Fractions of faulty and reduced-range devices in a crossbar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DevicePopulationSpec {
    pub fraction_stuck_high: f64,
    pub fraction_stuck_low: f64,
    pub fraction_reduced_range: f64,
    /// Reduced-range devices top out uniformly in `[alpha·g_on, g_on]`.
    pub reduced_range_alpha: f64,
    /// Relative standard deviation of multiplicative programming noise.
    pub sigma_prog: f64,
}

impl Default for DevicePopulationSpec {
    fn default() -> Self {
        Self {
            fraction_stuck_high: 0.0,
            fraction_stuck_low: 0.0,
            fraction_reduced_range: 0.0,
            reduced_range_alpha: 0.6,
            sigma_prog: 0.0,
        }
    }
}

impl DevicePopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [
            self.fraction_stuck_high,
            self.fraction_stuck_low,
            self.fraction_reduced_range,
        ];
        if f.iter().any(|&x| !(x >= 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "population fractions must be ≥ 0 and sum to ≤ 1, got {f:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.reduced_range_alpha) || !(self.sigma_prog >= 0.0) {
            return Err(Error::Config("alpha must lie in [0, 1] and sigma_prog ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellCategory {
    Normal,
    ReducedRange,
    StuckHigh,
    StuckLow,
}

/// Achievable conductance range of every cell of one crossbar.
#[derive(Debug, Clone, PartialEq)]
pub struct DevicePopulation {
    pub rows: usize,
    pub cols: usize,
    pub categories: Vec<CellCategory>,
    /// `(g_lo, g_hi)` per cell, row-major.
    pub ranges: Vec<(f64, f64)>,
}

impl DevicePopulation {
    pub fn range(&self, r: usize, c: usize) -> (f64, f64) {
        self.ranges[r * self.cols + c]
    }

    pub fn count(&self, cat: CellCategory) -> usize {
        self.categories.iter().filter(|&&c| c == cat).count()
    }
}

/// Assigns every cell a behaviour category and its achievable range.
/// Stuck cells sit in the top (high) or bottom (low) decile of
/// `[g_off, g_on]`.
pub fn sample_population(
    rows: usize,
    cols: usize,
    spec: &DevicePopulationSpec,
    device: &DeviceModel,
    rng: &mut Rng,
) -> Result<DevicePopulation> {
    spec.validate()?;
    let (g_off, g_on) = (device.g_off(), device.g_on);
    let decile = 0.1 * (g_on - g_off);
    let t_high = spec.fraction_stuck_high;
    let t_low = t_high + spec.fraction_stuck_low;
    let t_red = t_low + spec.fraction_reduced_range;
    let n = rows * cols;
    let mut categories = Vec::with_capacity(n);
    let mut ranges = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let (cat, range) = if u < t_high {
            let g = rng.random_range(g_on - decile..=g_on);
            (CellCategory::StuckHigh, (g, g))
        } else if u < t_low {
            let g = rng.random_range(g_off..=g_off + decile);
            (CellCategory::StuckLow, (g, g))
        } else if u < t_red {
            let hi = rng
                .random_range(spec.reduced_range_alpha * g_on..=g_on)
                .max(g_off);
            (CellCategory::ReducedRange, (g_off, hi))
        } else {
            (CellCategory::Normal, (g_off, g_on))
        };
        categories.push(cat);
        ranges.push(range);
    }
    Ok(DevicePopulation {
        rows,
        cols,
        categories,
        ranges,
    })
}

/// Programs one cell: the target is clamped into the cell's range, perturbed
/// by `(1 + ε)`, `ε ~ N(0, σ_prog)`, and clamped again. Zero targets stay
/// unelectroformed.
pub fn program(target: f64, range: (f64, f64), sigma_prog: f64, rng: &mut Rng) -> f64 {
    if target == 0.0 {
        return 0.0;
    }
    let (lo, hi) = range;
    let g = target.clamp(lo, hi);
    if sigma_prog == 0.0 {
        return g;
    }
    let eps: f64 = Normal::new(0.0, sigma_prog)
        .expect("finite sigma")
        .sample(rng);
    (g * (1.0 + eps)).clamp(lo, hi)
}

/// Programs a whole tile against a freshly sampled population.
pub fn program_tile(
    tile: &ConductanceTile,
    spec: &DevicePopulationSpec,
    device: &DeviceModel,
    master: u64,
    path: &[u64],
) -> Result<ConductanceTile> {
    let (rows, cols) = tile.g.shape();
    let mut pop_path = vec![rng::tag::POPULATION];
    pop_path.extend_from_slice(path);
    let pop = sample_population(rows, cols, spec, device, &mut rng::stream(master, &pop_path))?;
    pop_path[0] = rng::tag::PROGRAM;
    let mut prng = rng::stream(master, &pop_path);
    let mut out = tile.clone();
    for r in 0..rows {
        for c in 0..cols {
            let g = program(tile.g.get(r, c), pop.range(r, c), spec.sigma_prog, &mut prng);
            out.g.set(r, c, g);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtnSign {
    #[default]
    Symmetric,
    NegativeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtnLevel {
    /// Level resistance (Ω).
    pub resistance: f64,
    /// Probability that a device at this level shows RTN.
    pub probability: f64,
    /// Lognormal location of the relative current deviation.
    pub mu: f64,
    /// Lognormal scale of the relative current deviation.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtnModel {
    pub levels: Vec<RtnLevel>,
    #[serde(default)]
    pub sign: RtnSign,
}

pub const RTN_FLOOR: f64 = 0.01;

impl RtnModel {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::EmptyInput("RTN model has no levels"));
        }
        for w in self.levels.windows(2) {
            if !(w[0].resistance < w[1].resistance) {
                return Err(Error::Config("RTN levels must be sorted by resistance".into()));
            }
        }
        for l in &self.levels {
            if !(0.0..=1.0).contains(&l.probability) || !(l.sigma > 0.0) || !l.mu.is_finite() {
                return Err(Error::Config(format!("invalid RTN level {l:?}")));
            }
        }
        Ok(())
    }

    /// Level whose resistance is nearest to `1/g`.
    pub fn nearest_level(&self, g: f64) -> Result<&RtnLevel> {
        let r = 1.0 / g;
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::NoRtnLevel { conductance: g });
        }
        self.levels
            .iter()
            .min_by(|a, b| (a.resistance - r).abs().total_cmp(&(b.resistance - r).abs()))
            .ok_or(Error::EmptyInput("RTN model has no levels"))
    }

    /// Disturbs one conductance.
    pub fn disturb(&self, g: f64, rng: &mut Rng) -> Result<f64> {
        if g == 0.0 {
            return Ok(0.0);
        }
        let level = self.nearest_level(g)?;
        if rng.random::<f64>() >= level.probability {
            return Ok(g);
        }
        let delta = LogNormal::new(level.mu, level.sigma)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(rng);
        let sign = match self.sign {
            RtnSign::Symmetric if rng.random::<bool>() => 1.0,
            _ => -1.0,
        };
        Ok(g * (1.0 + sign * delta).max(RTN_FLOOR))
    }
}

/// Applies RTN independently to every nonzero cell of a tile.
pub fn apply_rtn(tile: &ConductanceTile, model: &RtnModel, rng: &mut Rng) -> Result<ConductanceTile> {
    model.validate()?;
    let mut out = tile.clone();
    for g in out.g.as_mut_slice() {
        *g = model.disturb(*g, rng)?;
    }
    Ok(out)
}

/// A named device description with optional population statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub device: DeviceModel,
    pub population: Option<DevicePopulationSpec>,
}

#[derive(Deserialize)]
struct ProfileFile {
    name: String,
    device: DeviceSection,
    rtn: Option<RtnModel>,
    population: Option<DevicePopulationSpec>,
}

#[derive(Deserialize)]
struct DeviceSection {
    v_read: f64,
    resistances: Option<Vec<f64>>,
    g_on: Option<f64>,
    hrs_lrs_ratio: Option<f64>,
}

const BUNDLED_PROFILES: &[(&str, &str)] = &[
    ("hfo2-default", include_str!("../profiles/hfo2-default.toml")),
    ("ta2o5-default", include_str!("../profiles/ta2o5-default.toml")),
    ("avmco-default", include_str!("../profiles/avmco-default.toml")),
];

impl DeviceProfile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: ProfileFile = toml::from_str(text)?;
        let mut device = match (f.device.resistances, f.device.g_on, f.device.hrs_lrs_ratio) {
            (Some(r), None, None) => DeviceModel::from_resistances(&r, f.device.v_read)?,
            (None, Some(g_on), Some(ratio)) => DeviceModel::continuous(g_on, ratio, f.device.v_read),
            _ => {
                return Err(Error::Config(format!(
                    "profile `{}` needs either `resistances` or `g_on` + `hrs_lrs_ratio`",
                    f.name
                )))
            }
        };
        device.validate()?;
        if let Some(rtn) = &f.rtn {
            rtn.validate()?;
        }
        if let Some(p) = &f.population {
            p.validate()?;
        }
        device.rtn = f.rtn;
        Ok(Self {
            name: f.name,
            device,
            population: f.population,
        })
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED_PROFILES.iter().map(|(n, _)| *n)
    }

    /// A bundled profile by name, or a profile file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some((_, text)) = BUNDLED_PROFILES.iter().find(|(n, _)| *n == name_or_path) {
            return Self::parse(text);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::parse(&text);
        }
        Err(Error::Unknown {
            kind: "device profile",
            name: name_or_path.into(),
        })
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.device.states, DeviceStates::Discrete(_))
    }
}
