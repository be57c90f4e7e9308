//! Weight-to-conductance mapping.
//!
//! Weights are clipped to `±w_max`, then each weight is made proportional to
//! one device of a (positive, negative) bit-line pair while the other device
//! is left unelectroformed (`g = 0`). The layer is then tiled onto
//! fixed-geometry crossbars, inputs filling word lines from the sense edge
//! upwards.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mnist::IntensityProfile;
use crate::net::NetworkParams;
use crate::nonideal::RtnModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStates {
    /// Any conductance in `[g_off, g_on]`.
    Continuous,
    /// A finite ascending list of conductances (S).
    Discrete(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    /// Maximum conductance (S).
    pub g_on: f64,
    /// HRS/LRS ratio; `g_off = g_on / ratio`. Infinity selects the ideal
    /// `g_off → 0` limit.
    pub hrs_lrs_ratio: f64,
    pub states: DeviceStates,
    /// Read voltage (V) corresponding to an input of 1.0.
    pub v_read: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtn: Option<RtnModel>,
}

impl DeviceModel {
    pub fn continuous(g_on: f64, hrs_lrs_ratio: f64, v_read: f64) -> Self {
        Self {
            g_on,
            hrs_lrs_ratio,
            states: DeviceStates::Continuous,
            v_read,
            rtn: None,
        }
    }

    /// Discrete device whose states are the given resistances (Ω).
    pub fn from_resistances(resistances: &[f64], v_read: f64) -> Result<Self> {
        let mut g: Vec<f64> = resistances.iter().map(|r| 1.0 / r).collect();
        g.sort_by(f64::total_cmp);
        let (lo, hi) = match (g.first(), g.last()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return Err(Error::Config("no resistance states".into())),
        };
        let dev = Self {
            g_on: hi,
            hrs_lrs_ratio: hi / lo,
            states: DeviceStates::Discrete(g),
            v_read,
            rtn: None,
        };
        dev.validate()?;
        Ok(dev)
    }

    pub fn g_off(&self) -> f64 {
        if let DeviceStates::Discrete(states) = &self.states {
            return states[0];
        }
        self.g_on / self.hrs_lrs_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_on > 0.0 && self.hrs_lrs_ratio > 1.0 && self.v_read > 0.0) {
            return Err(Error::Config(format!(
                "device needs g_on > 0, ratio > 1, v_read > 0 (got {}, {}, {})",
                self.g_on, self.hrs_lrs_ratio, self.v_read
            )));
        }
        if let DeviceStates::Discrete(states) = &self.states {
            let sorted = states.windows(2).all(|w| w[0] < w[1]);
            let tol = 1e-12 * self.g_on;
            let ends = states.first().is_some_and(|&lo| lo > 0.0)
                && states
                    .last()
                    .is_some_and(|&hi| (hi - self.g_on).abs() <= tol)
                && (states[0] - self.g_on / self.hrs_lrs_ratio).abs() <= tol;
            if !sorted || !ends {
                return Err(Error::Config(
                    "discrete states must ascend and span [g_off, g_on]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Whether `g` is 0 or an achievable programmed conductance.
    pub fn is_allowed(&self, g: f64) -> bool {
        if g == 0.0 {
            return true;
        }
        match &self.states {
            DeviceStates::Continuous => g >= self.g_off() && g <= self.g_on,
            DeviceStates::Discrete(states) => states.contains(&g),
        }
    }

    /// Closest achievable conductance for a mapping target.
    pub fn clamp_to_allowed(&self, target: f64) -> f64 {
        match &self.states {
            DeviceStates::Continuous => {
                if target <= 0.0 {
                    0.0
                } else {
                    target.clamp(self.g_off(), self.g_on)
                }
            }
            DeviceStates::Discrete(_) => quantize(target, self),
        }
    }
}

/// Nearest member of `{0} ∪ states`; exact ties go to the lower conductance.
/// Continuous devices pass the target through [`DeviceModel::clamp_to_allowed`].
pub fn quantize(target: f64, device: &DeviceModel) -> f64 {
    let states = match &device.states {
        DeviceStates::Discrete(s) => s,
        DeviceStates::Continuous => return device.clamp_to_allowed(target),
    };
    let mut best = 0.0;
    let mut best_d = target.abs();
    for &s in states {
        let d = (target - s).abs();
        if d < best_d {
            best = s;
            best_d = d;
        }
    }
    best
}

/// Clipping bound: with `|w|` sorted ascending as `a_1..a_N`, returns
/// `a_{N − ceil(p_L·N)}`.
pub fn compute_wmax(weights: impl IntoIterator<Item = f64>, p_l: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p_l) {
        return Err(Error::Config(format!("p_L = {p_l} outside [0, 1)")));
    }
    let mut mags: Vec<f64> = weights.into_iter().map(f64::abs).collect();
    if mags.is_empty() {
        return Err(Error::DegenerateNetwork);
    }
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let excluded = ((p_l * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n - 1);
    let w_max = mags[n - 1 - excluded];
    if !(w_max > 0.0) || !w_max.is_finite() {
        return Err(Error::DegenerateNetwork);
    }
    Ok(w_max)
}

/// How `w_max` is chosen across the layers of a network. Per-layer bounds
/// keep first-layer conductances well above `g_off`; a single global bound
/// lets the larger output-layer weights push most first-layer devices down
/// to the clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WmaxScope {
    Global,
    #[default]
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingSpec {
    pub p_l: f64,
    pub w_max: f64,
    pub device: DeviceModel,
}

impl MappingSpec {
    pub fn new(device: DeviceModel, p_l: f64, w_max: f64) -> Result<Self> {
        device.validate()?;
        if !(w_max > 0.0) {
            return Err(Error::Config("w_max must be positive".into()));
        }
        Ok(Self { p_l, w_max, device })
    }

    /// Amperes of differential current per unit of weighted sum.
    pub fn descale(&self) -> f64 {
        self.device.g_on * self.device.v_read / self.w_max
    }
}

/// Proportional mapping of one weight matrix onto `(G_pos, G_neg)`.
pub fn map_layer(weights: &Matrix, spec: &MappingSpec) -> (Matrix, Matrix) {
    let (rows, cols) = weights.shape();
    let mut pos = Matrix::zeros(rows, cols);
    let mut neg = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let (p, n) = map_weight(weights.get(i, j), spec);
            pos.set(i, j, p);
            neg.set(i, j, n);
        }
    }
    (pos, neg)
}

pub fn map_weight(w: f64, spec: &MappingSpec) -> (f64, f64) {
    if w == 0.0 {
        return (0.0, 0.0);
    }
    let clipped = w.clamp(-spec.w_max, spec.w_max);
    let target = clipped.abs() / spec.w_max * spec.device.g_on;
    let g = spec.device.clamp_to_allowed(target);
    if w > 0.0 {
        (g, 0.0)
    } else {
        (0.0, g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossbarGeometry {
    /// Word lines.
    pub rows: usize,
    /// Bit lines.
    pub cols: usize,
    /// Interconnect resistance per word-line segment (Ω).
    pub r_word: f64,
    /// Interconnect resistance per bit-line segment (Ω).
    pub r_bit: f64,
}

impl CrossbarGeometry {
    pub fn new(rows: usize, cols: usize, r_word: f64, r_bit: f64) -> Result<Self> {
        let g = Self {
            rows,
            cols,
            r_word,
            r_bit,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("crossbar needs at least one row and column".into()));
        }
        if !(self.r_word >= 0.0 && self.r_bit >= 0.0) {
            return Err(Error::Config("interconnect resistances must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn with_resistance_scale(mut self, factor: f64) -> Self {
        self.r_word *= factor;
        self.r_bit *= factor;
        self
    }

    pub fn is_ideal(&self) -> bool {
        self.r_word == 0.0 && self.r_bit == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Positive(usize),
    Negative(usize),
    Unused,
}

/// One crossbar's conductances. Row 0 is the word line farthest from the
/// sense edge; sources drive word lines from the left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductanceTile {
    pub geometry: CrossbarGeometry,
    /// `rows × cols` conductances (S); 0 means unelectroformed.
    pub g: Matrix,
    pub used_rows: Range<usize>,
    pub column_roles: Vec<ColumnRole>,
    /// Global input index carried by each used row, top to bottom.
    pub row_map: Vec<usize>,
}

impl ConductanceTile {
    pub fn used_row_count(&self) -> usize {
        self.used_rows.len()
    }

    /// Input index driving physical row `r`, if the row is used.
    pub fn input_for_row(&self, r: usize) -> Option<usize> {
        self.used_rows
            .contains(&r)
            .then(|| self.row_map[r - self.used_rows.start])
    }

    pub fn used_columns(&self) -> impl Iterator<Item = (usize, ColumnRole)> + '_ {
        self.column_roles
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, r)| *r != ColumnRole::Unused)
    }
}

/// Row counts per tile: `ceil(n / rows)` tiles, sizes as even as possible
/// with the larger tiles first.
pub fn tile_row_counts(n_inputs: usize, rows: usize) -> Vec<usize> {
    let n_tiles = n_inputs.div_ceil(rows).max(1);
    let base = n_inputs / n_tiles;
    let extra = n_inputs % n_tiles;
    (0..n_tiles).map(|t| base + usize::from(t < extra)).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TilingOptions {
    /// Split outputs across several crossbars when `2·fan_out` exceeds the
    /// bit-line count instead of failing.
    pub split_columns: bool,
    /// Conductance assigned to cells outside the used region (S).
    pub leakage: f64,
}

/// Tiles a mapped layer. `permutation[s]` is the input placed in slot `s`;
/// slots fill each tile from its bottom word line upwards, tile by tile.
pub fn tile_layer(
    g_pos: &Matrix,
    g_neg: &Matrix,
    geometry: &CrossbarGeometry,
    permutation: Option<&[usize]>,
) -> Result<Vec<ConductanceTile>> {
    tile_layer_with(g_pos, g_neg, geometry, permutation, &TilingOptions::default())
}

pub fn tile_layer_with(
    g_pos: &Matrix,
    g_neg: &Matrix,
    geometry: &CrossbarGeometry,
    permutation: Option<&[usize]>,
    options: &TilingOptions,
) -> Result<Vec<ConductanceTile>> {
    geometry.validate()?;
    if g_pos.shape() != g_neg.shape() {
        return Err(Error::Dimension {
            context: "G_pos/G_neg shape",
            expected: g_pos.rows() * g_pos.cols(),
            actual: g_neg.rows() * g_neg.cols(),
        });
    }
    let (n_in, fan_out) = g_pos.shape();
    let order: Vec<usize> = match permutation {
        Some(p) => {
            check_permutation(p, n_in)?;
            p.to_vec()
        }
        None => (0..n_in).collect(),
    };

    let per_block = geometry.cols / 2;
    let column_blocks: Vec<Range<usize>> = if 2 * fan_out <= geometry.cols {
        vec![0..fan_out]
    } else if options.split_columns && per_block > 0 {
        let counts = tile_row_counts(fan_out, per_block);
        let mut start = 0;
        counts
            .into_iter()
            .map(|c| {
                start += c;
                start - c..start
            })
            .collect()
    } else {
        return Err(Error::TooWide {
            fan_out,
            needed: 2 * fan_out,
            cols: geometry.cols,
        });
    };

    let mut tiles = Vec::new();
    let mut slot = 0;
    for count in tile_row_counts(n_in, geometry.rows) {
        let slots = &order[slot..slot + count];
        slot += count;
        let used_rows = geometry.rows - count..geometry.rows;
        // Slot q sits on physical row rows-1-q, so top-to-bottom is reversed.
        let row_map: Vec<usize> = slots.iter().rev().copied().collect();
        for outputs in &column_blocks {
            let mut g = Matrix::from_fn(geometry.rows, geometry.cols, |_, _| options.leakage);
            let mut column_roles = vec![ColumnRole::Unused; geometry.cols];
            for (local, k) in outputs.clone().enumerate() {
                column_roles[2 * local] = ColumnRole::Positive(k);
                column_roles[2 * local + 1] = ColumnRole::Negative(k);
                for (offset, &input) in row_map.iter().enumerate() {
                    let r = used_rows.start + offset;
                    g.set(r, 2 * local, g_pos.get(input, k));
                    g.set(r, 2 * local + 1, g_neg.get(input, k));
                }
            }
            tiles.push(ConductanceTile {
                geometry: *geometry,
                g,
                used_rows: used_rows.clone(),
                column_roles,
                row_map: row_map.clone(),
            });
        }
    }
    Ok(tiles)
}

fn check_permutation(p: &[usize], n: usize) -> Result<()> {
    if p.len() != n {
        return Err(Error::Dimension {
            context: "input permutation",
            expected: n,
            actual: p.len(),
        });
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!("not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Row counts of each tile, in slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingPlan {
    pub row_counts: Vec<usize>,
}

impl TilingPlan {
    pub fn new(n_inputs: usize, geometry: &CrossbarGeometry) -> Self {
        Self {
            row_counts: tile_row_counts(n_inputs, geometry.rows),
        }
    }

    pub fn inputs(&self) -> usize {
        self.row_counts.iter().sum()
    }
}

/// Orders inputs by descending mean intensity so the brightest inputs land
/// on the word lines nearest the sense edge. Ties keep the lower index first.
pub fn intensity_permutation(profile: &IntensityProfile, plan: &TilingPlan) -> Result<Vec<usize>> {
    if profile.len() != plan.inputs() {
        return Err(Error::Dimension {
            context: "intensity profile",
            expected: plan.inputs(),
            actual: profile.len(),
        });
    }
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| profile.means[b].total_cmp(&profile.means[a]));
    Ok(order)
}

/// One synaptic layer realized on crossbars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedLayer {
    pub spec: MappingSpec,
    /// Inputs including the bias unit.
    pub inputs: usize,
    pub outputs: usize,
    pub tiles: Vec<ConductanceTile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedNetwork {
    pub layers: Vec<MappedLayer>,
}

impl MappedNetwork {
    pub fn device_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.inputs * l.outputs).sum()
    }
}

/// Settings for [`map_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMapping {
    pub device: DeviceModel,
    pub p_l: f64,
    pub scope: WmaxScope,
    pub geometry: CrossbarGeometry,
    pub tiling: TilingOptions,
    /// Input order for the first layer.
    pub first_layer_permutation: Option<Vec<usize>>,
}

pub fn map_network(net: &NetworkParams, m: &NetworkMapping) -> Result<MappedNetwork> {
    net.validate()?;
    let global = match m.scope {
        WmaxScope::Global => Some(compute_wmax(net.all_weights(), m.p_l)?),
        WmaxScope::PerLayer => None,
    };
    let mut layers = Vec::with_capacity(net.layers.len());
    for (l, w) in net.layers.iter().enumerate() {
        let w_max = match global {
            Some(v) => v,
            None => compute_wmax(w.as_slice().iter().copied(), m.p_l)?,
        };
        let spec = MappingSpec::new(m.device.clone(), m.p_l, w_max)?;
        let (pos, neg) = map_layer(w, &spec);
        let perm = if l == 0 {
            m.first_layer_permutation.as_deref()
        } else {
            None
        };
        let tiles = tile_layer_with(&pos, &neg, &m.geometry, perm, &m.tiling)?;
        layers.push(MappedLayer {
            spec,
            inputs: w.rows(),
            outputs: w.cols(),
            tiles,
        });
    }
    Ok(MappedNetwork { layers })
}

/// Writes tiles as a JSON array (geometry, row_map, column_roles, dense `g`
/// in siemens).
pub fn write_tile_dump(path: impl AsRef<Path>, tiles: &[ConductanceTile]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_vec_pretty(tiles)?).map_err(|e| Error::io(path, e))
}

pub fn read_tile_dump(path: impl AsRef<Path>) -> Result<Vec<ConductanceTile>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
