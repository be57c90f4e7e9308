//! Bit-line currents of conductance tiles, ideally (`I = Σ g·V`) or by nodal
//! analysis of the crossbar's resistive network, and inference through
//! tiled layers.
//!
//! Circuit model: source `V_i` drives word line `i` through one `r_word`
//! segment at the left edge; neighbouring word-line nodes are joined by
//! `r_word`; device `g_ij` joins `W(i,j)` to `B(i,j)`; neighbouring bit-line
//! nodes are joined by `r_bit`; bit line `j` reaches the ideal 0 V sense at
//! the bottom edge through one `r_bit` segment. Unused word lines sit at 0 V.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{ColumnRole, ConductanceTile, MappedLayer, MappedNetwork, MappingSpec};
use crate::matrix::Matrix;
use crate::mnist::LabeledSet;
use crate::net::{self, Architecture, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    Ideal,
    Nodal,
}

fn check_voltages(tile: &ConductanceTile, voltages: &[f64]) -> Result<()> {
    if voltages.len() != tile.used_row_count() {
        return Err(Error::Dimension {
            context: "tile voltages",
            expected: tile.used_row_count(),
            actual: voltages.len(),
        });
    }
    Ok(())
}

/// `I_j = Σ_i g_ij·V_i`, with `voltages` given per used row, top to bottom.
pub fn ideal_tile_currents(tile: &ConductanceTile, voltages: &[f64]) -> Result<Vec<f64>> {
    check_voltages(tile, voltages)?;
    let mut out = vec![0.0; tile.geometry.cols];
    for (k, &v) in voltages.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let row = tile.g.row(tile.used_rows.start + k);
        for (o, &g) in out.iter_mut().zip(row) {
            *o += g * v;
        }
    }
    Ok(out)
}

/// Physical-row voltage vector for a tile (zeros on unused rows).
fn physical_voltages(tile: &ConductanceTile, voltages: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; tile.geometry.rows];
    v[tile.used_rows.clone()].copy_from_slice(voltages);
    v
}

/// Value of a circuit node: a solved unknown, a source voltage, or ground.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Unknown(usize),
    Source(usize),
    Ground,
}

/// Symmetric positive-definite nodal equations `K x = S v` over the active
/// region of one tile, stored as a lower band and factorized in place.
///
/// The active region spans from the topmost row holding a device down to the
/// sense edge, and from column 0 to the last column holding a device; nodes
/// outside it sit on dead-end branches that carry no current. Nodes with a
/// known voltage (whole lines when a line resistance is zero) are eliminated.
pub struct NodalSystem {
    rows: usize,
    cols: usize,
    /// First active row and one past the last active column.
    r0: usize,
    c1: usize,
    g_word: Option<f64>,
    g_bit: Option<f64>,
    word: Vec<Node>,
    bit: Vec<Node>,
    n: usize,
    bw: usize,
    /// Row `i` holds entries `(i, i−bw ..= i)`.
    band: Vec<f64>,
    /// Right-hand side couplings `(unknown, source row, conductance)`.
    injections: Vec<(usize, usize, f64)>,
    g: Matrix,
}

impl NodalSystem {
    pub fn new(tile: &ConductanceTile) -> Result<Self> {
        let geo = tile.geometry;
        geo.validate()?;
        let (rows, cols) = tile.g.shape();
        let g = &tile.g;
        if g.as_slice().iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("conductances must be finite and ≥ 0".into()));
        }
        let r0 = (0..rows).find(|&r| g.row(r).iter().any(|&x| x > 0.0));
        let c1 = (0..cols).rev().find(|&c| (0..rows).any(|r| g.get(r, c) > 0.0));
        let (r0, c1) = match (r0, c1) {
            (Some(r0), Some(c)) => (r0, c + 1),
            _ => return Err(Error::Singular("tile has no conducting device".into())),
        };
        let inv = |r: f64| (r > 0.0).then(|| 1.0 / r);
        let (g_word, g_bit) = (inv(geo.r_word), inv(geo.r_bit));

        // Number unknowns in whichever of row-major or column-major cell
        // order gives the narrower band.
        let ar = rows - r0;
        let per_cell = usize::from(g_word.is_some()) + usize::from(g_bit.is_some());
        let column_major = ar < c1;
        let mut word = vec![Node::Ground; rows * cols];
        let mut bit = vec![Node::Ground; rows * cols];
        let mut n = 0;
        let mut number = |i: usize, j: usize| {
            let at = i * cols + j;
            word[at] = match g_word {
                Some(_) => {
                    n += 1;
                    Node::Unknown(n - 1)
                }
                None => Node::Source(i),
            };
            if g_bit.is_some() {
                bit[at] = Node::Unknown(n);
                n += 1;
            }
        };
        if column_major {
            for j in 0..c1 {
                for i in r0..rows {
                    number(i, j);
                }
            }
        } else {
            for i in r0..rows {
                for j in 0..c1 {
                    number(i, j);
                }
            }
        }
        let bw = match per_cell {
            0 => 0,
            _ => per_cell * if column_major { ar } else { c1 },
        };

        let mut sys = Self {
            rows,
            cols,
            r0,
            c1,
            g_word,
            g_bit,
            word,
            bit,
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
            injections: Vec::new(),
            g: g.clone(),
        };
        for (a, b, c) in sys.edges() {
            sys.stamp(a, b, c);
        }
        sys.factorize()?;
        Ok(sys)
    }

    fn w(&self, i: usize, j: usize) -> Node {
        self.word[i * self.cols + j]
    }

    fn b(&self, i: usize, j: usize) -> Node {
        self.bit[i * self.cols + j]
    }

    /// Every two-terminal element of the active region.
    fn edges(&self) -> Vec<(Node, Node, f64)> {
        let mut e = Vec::new();
        for i in self.r0..self.rows {
            for j in 0..self.c1 {
                if let Some(gw) = self.g_word {
                    let left = if j == 0 { Node::Source(i) } else { self.w(i, j - 1) };
                    e.push((left, self.w(i, j), gw));
                }
                let g = self.g.get(i, j);
                if g > 0.0 {
                    e.push((self.w(i, j), self.b(i, j), g));
                }
                if let Some(gb) = self.g_bit {
                    let below = if i + 1 == self.rows { Node::Ground } else { self.b(i + 1, j) };
                    e.push((self.b(i, j), below, gb));
                }
            }
        }
        e
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(j <= i && i - j <= self.bw);
        &mut self.band[i * (self.bw + 1) + self.bw + j - i]
    }

    fn stamp(&mut self, a: Node, b: Node, g: f64) {
        match (a, b) {
            (Node::Unknown(p), Node::Unknown(q)) => {
                *self.at(p, p) += g;
                *self.at(q, q) += g;
                *self.at(p.max(q), p.min(q)) -= g;
            }
            (Node::Unknown(p), other) | (other, Node::Unknown(p)) => {
                *self.at(p, p) += g;
                if let Node::Source(i) = other {
                    self.injections.push((p, i, g));
                }
            }
            _ => {}
        }
    }

    fn factorize(&mut self) -> Result<()> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw));
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                let mut s = self.band[ri + j];
                for k in k0..j {
                    s -= self.band[ri + k] * self.band[rj + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Singular(format!(
                            "nodal matrix not positive definite at unknown {i}"
                        )));
                    }
                    self.band[ri + i] = s.sqrt();
                } else {
                    self.band[ri + j] = s / self.band[rj + j];
                }
            }
        }
        Ok(())
    }

    /// Solves `K x = rhs` in place using the stored factor.
    fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let ri = i * w + bw - i;
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[ri + k] * x[k];
            }
            x[i] = s / self.band[ri + i];
        }
        for i in (0..n).rev() {
            let ri = i * w + bw - i;
            let xi = x[i] / self.band[ri + i];
            x[i] = xi;
            for k in i.saturating_sub(bw)..i {
                x[k] -= self.band[ri + k] * xi;
            }
        }
    }

    pub fn unknowns(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    fn value(&self, node: Node, x: &[f64], v: &[f64]) -> f64 {
        match node {
            Node::Unknown(p) => x[p],
            Node::Source(i) => v[i],
            Node::Ground => 0.0,
        }
    }

    /// Output current of column `j` as a combination of node values.
    fn output_terms(&self, j: usize) -> Vec<(Node, f64)> {
        match self.g_bit {
            Some(gb) if j < self.c1 => vec![(self.b(self.rows - 1, j), gb)],
            None if j < self.c1 => (self.r0..self.rows)
                .filter(|&i| self.g.get(i, j) > 0.0)
                .map(|i| (self.w(i, j), self.g.get(i, j)))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Solves for every node voltage with physical-row sources `v`.
    pub fn solve(&self, v: &[f64]) -> NodalSolution {
        let mut x = vec![0.0; self.n];
        for &(p, i, g) in &self.injections {
            x[p] += g * v[i];
        }
        self.solve_in_place(&mut x);

        let (rows, cols) = (self.rows, self.cols);
        let mut word = Matrix::zeros(rows, cols);
        let mut bit = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let wv = if i < self.r0 {
                    v[i]
                } else {
                    self.value(self.w(i, j.min(self.c1 - 1)), &x, v)
                };
                word.set(i, j, wv);
                if j < self.c1 {
                    bit.set(i, j, self.value(self.b(i.max(self.r0), j), &x, v));
                }
            }
        }
        let currents = (0..cols)
            .map(|j| {
                self.output_terms(j)
                    .into_iter()
                    .map(|(node, c)| c * self.value(node, &x, v))
                    .sum()
            })
            .collect();
        let source_currents = (0..rows)
            .map(|i| match (self.g_word, i >= self.r0) {
                (Some(gw), true) => gw * (v[i] - word.get(i, 0)),
                (None, true) => (0..self.c1)
                    .map(|j| self.g.get(i, j) * (v[i] - bit.get(i, j)))
                    .sum(),
                (_, false) => 0.0,
            })
            .collect();
        let residual = self.residual(&x, v);
        NodalSolution {
            word,
            bit,
            currents,
            source_currents,
            residual,
        }
    }

    /// Largest net current into any solved node (KCL residual).
    fn residual(&self, x: &[f64], v: &[f64]) -> f64 {
        let mut net = vec![0.0; self.n];
        for (a, b, g) in self.edges() {
            let i = g * (self.value(a, x, v) - self.value(b, x, v));
            if let Node::Unknown(p) = a {
                net[p] -= i;
            }
            if let Node::Unknown(q) = b {
                net[q] += i;
            }
        }
        net.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Effective `cols × rows` transfer matrix: `I = T·V` over physical rows.
    /// One adjoint solve per active output column.
    pub fn transfer(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        let mut y = vec![0.0; self.n];
        for j in 0..self.c1 {
            y.iter_mut().for_each(|e| *e = 0.0);
            let mut any = false;
            for (node, c) in self.output_terms(j) {
                match node {
                    Node::Unknown(p) => {
                        y[p] += c;
                        any = true;
                    }
                    Node::Source(i) => *t.get_mut(j, i) += c,
                    Node::Ground => {}
                }
            }
            if !any {
                continue;
            }
            self.solve_in_place(&mut y);
            for &(p, i, g) in &self.injections {
                *t.get_mut(j, i) += y[p] * g;
            }
        }
        t
    }
}

/// Node voltages and branch currents of one nodal solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalSolution {
    /// Word-line node voltages `W(i,j)`.
    pub word: Matrix,
    /// Bit-line node voltages `B(i,j)`.
    pub bit: Matrix,
    /// Current into the sense node of each bit line (A).
    pub currents: Vec<f64>,
    /// Current delivered by each word-line source (A).
    pub source_currents: Vec<f64>,
    /// Largest KCL imbalance over the solved nodes (A).
    pub residual: f64,
}

/// Solves the full resistive network of a tile with `voltages` per used row.
pub fn solve_tile_nodal(tile: &ConductanceTile, voltages: &[f64]) -> Result<NodalSolution> {
    check_voltages(tile, voltages)?;
    let sys = NodalSystem::new(tile)?;
    let sol = sys.solve(&physical_voltages(tile, voltages));
    let total: f64 = sol.source_currents.iter().map(|c| c.abs()).sum();
    if sol.residual > KCL_TOLERANCE * total.max(f64::MIN_POSITIVE) && sol.residual > 1e-18 {
        return Err(Error::Singular(format!(
            "KCL residual {:.3e} A exceeds tolerance",
            sol.residual
        )));
    }
    Ok(sol)
}

/// Relative KCL residual bound accepted from a nodal solve.
pub const KCL_TOLERANCE: f64 = 1e-9;

/// `cols × rows` matrix mapping physical-row voltages to bit-line currents.
pub fn tile_transfer(tile: &ConductanceTile, mode: SolverMode) -> Result<Matrix> {
    match mode {
        SolverMode::Nodal if !tile.geometry.is_ideal() => Ok(NodalSystem::new(tile)?.transfer()),
        _ => Ok(tile.g.transpose()),
    }
}

/// Reconstructed weighted sums of one layer and the raw currents behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOutputs {
    /// `(ΣI⁺ − ΣI⁻)/c` per output neuron.
    pub values: Vec<f64>,
    /// Positive-column current per output, summed over tiles (A).
    pub i_pos: Vec<f64>,
    /// Negative-column current per output, summed over tiles (A).
    pub i_neg: Vec<f64>,
    /// Raw bit-line currents of every tile (A).
    pub tile_currents: Vec<Vec<f64>>,
}

fn layer_outputs_count(tiles: &[ConductanceTile]) -> usize {
    tiles
        .iter()
        .flat_map(|t| t.column_roles.iter())
        .filter_map(|r| match r {
            ColumnRole::Positive(k) | ColumnRole::Negative(k) => Some(k + 1),
            ColumnRole::Unused => None,
        })
        .max()
        .unwrap_or(0)
}

fn layer_inputs_count(tiles: &[ConductanceTile]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    tiles.iter().flat_map(|t| t.row_map.iter()).for_each(|&i| {
        seen.insert(i);
    });
    seen.len()
}

/// Runs one activation vector (bias included) through a tiled layer.
///
/// In ideal mode the per-output sums run over inputs in their canonical
/// order, so any input permutation of the tiling gives identical results.
pub fn layer_outputs(
    tiles: &[ConductanceTile],
    input: &[f64],
    spec: &MappingSpec,
    mode: SolverMode,
) -> Result<LayerOutputs> {
    let n_in = layer_inputs_count(tiles);
    if input.len() != n_in {
        return Err(Error::Dimension {
            context: "layer input",
            expected: n_in,
            actual: input.len(),
        });
    }
    let n_out = layer_outputs_count(tiles);
    let v_read = spec.device.v_read;
    let mut tile_currents = Vec::with_capacity(tiles.len());
    let mut i_pos = vec![0.0; n_out];
    let mut i_neg = vec![0.0; n_out];
    let mut ideal_pos = Matrix::zeros(n_in, n_out);
    let mut ideal_neg = Matrix::zeros(n_in, n_out);
    for (t, tile) in tiles.iter().enumerate() {
        let v: Vec<f64> = tile.row_map.iter().map(|&i| input[i] * v_read).collect();
        let currents = match mode {
            SolverMode::Ideal => ideal_tile_currents(tile, &v)?,
            SolverMode::Nodal => solve_tile_nodal(tile, &v)
                .map_err(|e| Error::TileSolve {
                    tile: t,
                    iteration: None,
                    source: Box::new(e),
                })?
                .currents,
        };
        for (c, role) in tile.column_roles.iter().enumerate() {
            match (mode, *role) {
                (SolverMode::Nodal, ColumnRole::Positive(k)) => i_pos[k] += currents[c],
                (SolverMode::Nodal, ColumnRole::Negative(k)) => i_neg[k] += currents[c],
                (SolverMode::Ideal, ColumnRole::Positive(k)) => {
                    for (r, &inp) in tile.row_map.iter().enumerate() {
                        let g = tile.g.get(tile.used_rows.start + r, c);
                        ideal_pos.set(inp, k, g * v[r]);
                    }
                }
                (SolverMode::Ideal, ColumnRole::Negative(k)) => {
                    for (r, &inp) in tile.row_map.iter().enumerate() {
                        let g = tile.g.get(tile.used_rows.start + r, c);
                        ideal_neg.set(inp, k, g * v[r]);
                    }
                }
                (_, ColumnRole::Unused) => {}
            }
        }
        tile_currents.push(currents);
    }
    if mode == SolverMode::Ideal {
        for k in 0..n_out {
            i_pos[k] = (0..n_in).map(|i| ideal_pos.get(i, k)).sum();
            i_neg[k] = (0..n_in).map(|i| ideal_neg.get(i, k)).sum();
        }
    }
    let c = spec.descale();
    let values = i_pos.iter().zip(&i_neg).map(|(p, n)| (p - n) / c).collect();
    Ok(LayerOutputs {
        values,
        i_pos,
        i_neg,
        tile_currents,
    })
}

/// A layer collapsed to per-input effective conductances. Because each
/// (input, output) pair lives on exactly one tile, the layer's response is
/// `I⁺_k = Σ_n G⁺_eff(n,k)·V_n` (likewise for `I⁻`), exactly linear in the
/// activations.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLayer {
    /// `inputs × outputs` effective conductances of the positive columns.
    pub g_pos: Matrix,
    pub g_neg: Matrix,
    pub v_read: f64,
    pub descale: f64,
}

impl EffectiveLayer {
    pub fn new(layer: &MappedLayer, mode: SolverMode) -> Result<Self> {
        let transfers: Vec<Matrix> = layer
            .tiles
            .par_iter()
            .enumerate()
            .map(|(t, tile)| {
                tile_transfer(tile, mode).map_err(|e| Error::TileSolve {
                    tile: t,
                    iteration: None,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let mut g_pos = Matrix::zeros(layer.inputs, layer.outputs);
        let mut g_neg = Matrix::zeros(layer.inputs, layer.outputs);
        for (tile, t) in layer.tiles.iter().zip(&transfers) {
            for (c, role) in tile.used_columns() {
                let (dst, k) = match role {
                    ColumnRole::Positive(k) => (&mut g_pos, k),
                    ColumnRole::Negative(k) => (&mut g_neg, k),
                    ColumnRole::Unused => unreachable!(),
                };
                for (r, &inp) in tile.row_map.iter().enumerate() {
                    dst.set(inp, k, t.get(c, tile.used_rows.start + r));
                }
            }
        }
        Ok(Self {
            g_pos,
            g_neg,
            v_read: layer.spec.device.v_read,
            descale: layer.spec.descale(),
        })
    }

    /// Equivalent digital weights `(G⁺ − G⁻)·v_read / c`, bias row last.
    pub fn weights(&self) -> Matrix {
        let s = self.v_read / self.descale;
        let mut w = self.g_pos.clone();
        for (a, b) in w.as_mut_slice().iter_mut().zip(self.g_neg.as_slice()) {
            *a = (*a - b) * s;
        }
        w
    }
}

/// A mapped network reduced to the digital network it behaves as.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNetwork {
    pub layers: Vec<EffectiveLayer>,
    params: NetworkParams,
}

impl EffectiveNetwork {
    pub fn new(mapped: &MappedNetwork, mode: SolverMode) -> Result<Self> {
        let layers = mapped
            .layers
            .iter()
            .map(|l| EffectiveLayer::new(l, mode))
            .collect::<Result<Vec<_>>>()?;
        let mut sizes = vec![mapped
            .layers
            .first()
            .ok_or(Error::EmptyInput("mapped network"))?
            .inputs
            - 1];
        sizes.extend(mapped.layers.iter().map(|l| l.outputs));
        let params = NetworkParams {
            arch: Architecture::new(sizes)?,
            seed: 0,
            layers: layers.iter().map(EffectiveLayer::weights).collect(),
        };
        params.validate()?;
        Ok(Self { layers, params })
    }

    /// Sigmoid hidden units, softmax outputs; returns class probabilities.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.params.forward(input)
    }

    pub fn infer_set(&self, set: &LabeledSet) -> Result<Matrix> {
        self.params.forward_set(set)
    }

    pub fn logits_set(&self, set: &LabeledSet) -> Result<Matrix> {
        self.params.logits_set(set)
    }

    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64> {
        net::evaluate_accuracy(&self.params, set)
    }

    pub fn as_params(&self) -> &NetworkParams {
        &self.params
    }
}

/// Class probabilities of one 784-pixel input through a mapped network.
pub fn network_inference(mapped: &MappedNetwork, input: &[f64], mode: SolverMode) -> Result<Vec<f64>> {
    let last = mapped.layers.len().saturating_sub(1);
    let mut a = input.to_vec();
    for (l, layer) in mapped.layers.iter().enumerate() {
        a.push(1.0);
        let mut z = layer_outputs(&layer.tiles, &a, &layer.spec, mode)?.values;
        if l == last {
            net::softmax_in_place(&mut z);
        } else {
            z.iter_mut().for_each(|v| *v = net::sigmoid(*v));
        }
        a = z;
    }
    Ok(a)
}

/// Mean relative change `(I_nodal − I_ideal)/I_ideal` per tile and bit line.
/// Unused columns, and columns where every sample was excluded, hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `tiles × cols`.
    pub values: Matrix,
}

impl Heatmap {
    /// Mean over every defined entry.
    pub fn mean(&self) -> f64 {
        let v: Vec<f64> = self.values.as_slice().iter().copied().filter(|x| !x.is_nan()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Mean over tiles for each bit line (NaN where no tile defines it).
    pub fn column_means(&self) -> Vec<f64> {
        (0..self.values.cols())
            .map(|c| {
                let v: Vec<f64> = (0..self.values.rows())
                    .map(|t| self.values.get(t, c))
                    .filter(|x| !x.is_nan())
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let header: Vec<String> = (0..self.values.cols()).map(|c| format!("col{c}")).collect();
        out.push_str("tile,");
        out.push_str(&header.join(","));
        out.push('\n');
        for t in 0..self.values.rows() {
            out.push_str(&t.to_string());
            for &v in self.values.row(t) {
                out.push(',');
                if !v.is_nan() {
                    out.push_str(&format!("{v:e}"));
                }
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Relative current changes caused by line resistance on one mapped layer,
/// averaged over `activations` (one row per sample, bias included).
pub fn deviation_heatmap(layer: &MappedLayer, activations: &Matrix, spec: &MappingSpec) -> Result<Heatmap> {
    if activations.rows() == 0 {
        return Err(Error::EmptyInput("heatmap sample"));
    }
    if activations.cols() != layer.inputs {
        return Err(Error::Dimension {
            context: "heatmap activations",
            expected: layer.inputs,
            actual: activations.cols(),
        });
    }
    let cols = layer.tiles.iter().map(|t| t.geometry.cols).max().unwrap_or(0);
    let mut values = Matrix::from_fn(layer.tiles.len(), cols, |_, _| f64::NAN);
    let v_read = spec.device.v_read;
    let per_tile: Vec<Vec<f64>> = layer
        .tiles
        .par_iter()
        .map(|tile| -> Result<Vec<f64>> {
            let nodal = tile_transfer(tile, SolverMode::Nodal)?;
            let (rows, tc) = (tile.geometry.rows, tile.geometry.cols);
            let mut sum = vec![0.0; tc];
            let mut count = vec![0usize; tc];
            let mut v = vec![0.0; rows];
            for s in 0..activations.rows() {
                let a = activations.row(s);
                for (r, &inp) in tile.row_map.iter().enumerate() {
                    v[tile.used_rows.start + r] = a[inp] * v_read;
                }
                let ideal = tile.g.vec_mul(&v);
                for (c, _) in tile.used_columns() {
                    if ideal[c].abs() < 1e-12 {
                        continue;
                    }
                    let i_n: f64 = nodal.row(c).iter().zip(&v).map(|(t, x)| t * x).sum();
                    sum[c] += (i_n - ideal[c]) / ideal[c];
                    count[c] += 1;
                }
            }
            Ok(sum
                .iter()
                .zip(&count)
                .map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
                .collect())
        })
        .collect::<Result<_>>()?;
    for (t, row) in per_tile.iter().enumerate() {
        values.row_mut(t)[..row.len()].copy_from_slice(row);
    }
    if values.as_slice().iter().all(|x| x.is_nan()) {
        return Err(Error::DegenerateSample("every heatmap entry was excluded"));
    }
    Ok(Heatmap { values })
}
