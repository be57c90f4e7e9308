//! Experiment orchestration: scenario configs, base-network training and
//! caching, disturbance iterations, committee sampling, summary statistics
//! and result files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::committee::{
    committee_accuracy, optimize_weightings, CommitteePool, MemberId, OutputKind, PoolMember, Weightings,
};
use crate::error::{Error, Result};
use crate::mapping::{map_network, intensity_permutation, CrossbarGeometry, MappedNetwork, NetworkMapping, TilingOptions, TilingPlan, WmaxScope};
use crate::matrix::Matrix;
use crate::mnist::{mean_input_intensity, split_train_validation, LabeledSet, MnistFiles};
use crate::net::{init_network, train, Architecture, NetworkParams, TrainConfig, TrainHistory};
use crate::nonideal::{apply_rtn, program_tile, DevicePopulationSpec, DeviceProfile, RtnModel};
use crate::rng::{self, Rng};
use crate::solver::{EffectiveNetwork, SolverMode};

/// Which non-idealities a scenario applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Stuck-high and stuck-low devices.
    pub faults: bool,
    /// Device-to-device variability: reduced ranges and programming noise.
    pub d2d: bool,
    pub rtn: bool,
    pub line_resistance: bool,
    /// Multiplier on the geometry's interconnect resistances.
    pub resistance_scale: f64,
    /// Intensity-aware ordering of first-layer inputs.
    pub reorder: bool,
    /// Build committees from one base network disturbed several times
    /// instead of from distinct base networks.
    pub identical_networks: bool,
    pub averaging: Averaging,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            faults: false,
            d2d: false,
            rtn: false,
            line_resistance: false,
            resistance_scale: 1.0,
            reorder: false,
            identical_networks: false,
            averaging: Averaging::PostSoftmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    PostSoftmax,
    PreSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub rows: usize,
    pub cols: usize,
    /// Interconnect resistance per word-line segment (Ω).
    pub r_word: f64,
    /// Interconnect resistance per bit-line segment (Ω).
    pub r_bit: f64,
    pub split_columns: bool,
    /// Conductance of cells outside the used region (S).
    pub leakage: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            rows: 128,
            cols: 64,
            r_word: 0.35,
            r_bit: 0.32,
            split_columns: false,
            leakage: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub base_networks: usize,
    pub iterations: usize,
    pub committee_sizes: Vec<usize>,
    /// Committee accuracies recorded per size, across all iterations.
    pub samples_per_size: usize,
    /// Use only the first `n` test images (all when absent).
    pub eval_images: Option<usize>,
    /// Committees per size that also get numerically optimized weightings.
    pub optimized_samples_per_size: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            base_networks: 25,
            iterations: 20,
            committee_sizes: vec![1, 2, 3, 4, 5],
            samples_per_size: 10_000,
            eval_images: None,
            optimized_samples_per_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Leading training images used for fitting; the rest validate.
    pub train_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            patience: t.patience,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            train_size: 50_000,
        }
    }
}

impl TrainingConfig {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            patience: self.patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    pub device_profile: String,
    /// Overrides the profile's population statistics.
    #[serde(default)]
    pub population: Option<DevicePopulationSpec>,
    #[serde(default = "default_p_l")]
    pub p_l: f64,
    #[serde(default)]
    pub wmax_scope: WmaxScope,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub counts: Counts,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
}

fn default_architecture() -> Architecture {
    Architecture::mnist(25)
}

fn default_p_l() -> f64 {
    0.001
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

const BUNDLED_SCENARIOS: &[(&str, &str)] = &[
    ("hfo2-faulty-lr", include_str!("../scenarios/hfo2-faulty-lr.toml")),
    ("hfo2-faulty", include_str!("../scenarios/hfo2-faulty.toml")),
    ("hfo2-faulty-50", include_str!("../scenarios/hfo2-faulty-50.toml")),
    ("hfo2-lr-only", include_str!("../scenarios/hfo2-lr-only.toml")),
    ("hfo2-lr-5x", include_str!("../scenarios/hfo2-lr-5x.toml")),
    ("hfo2-reordered", include_str!("../scenarios/hfo2-reordered.toml")),
    ("ta2o5-rtn-lr", include_str!("../scenarios/ta2o5-rtn-lr.toml")),
    ("avmco-rtn-lr", include_str!("../scenarios/avmco-rtn-lr.toml")),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED_SCENARIOS.iter().map(|(n, _)| *n)
    }

    /// A bundled scenario by name, or a config file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some((_, text)) = BUNDLED_SCENARIOS.iter().find(|(n, _)| *n == name_or_path) {
            return Self::from_toml(text);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return Self::from_toml(&text);
        }
        Err(Error::Unknown {
            kind: "scenario",
            name: name_or_path.into(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.counts;
        if c.base_networks == 0 || c.iterations == 0 || c.samples_per_size == 0 {
            return Err(Error::Config("counts must be ≥ 1".into()));
        }
        let pool = if self.scenario.identical_networks {
            c.iterations
        } else {
            c.base_networks
        };
        if let Some(&k) = c.committee_sizes.iter().find(|&&k| k == 0 || k > pool) {
            return Err(Error::Config(format!(
                "committee size {k} must lie in 1..={pool}"
            )));
        }
        if !(0.0..1.0).contains(&self.p_l) {
            return Err(Error::Config(format!("p_l = {} outside [0, 1)", self.p_l)));
        }
        if !(self.scenario.resistance_scale >= 0.0) {
            return Err(Error::Config("resistance_scale must be ≥ 0".into()));
        }
        if let Some(p) = &self.population {
            p.validate()?;
        }
        self.crossbar()?;
        Ok(())
    }

    /// Crossbar geometry as simulated: interconnects scaled, or zeroed when
    /// line resistance is off.
    pub fn crossbar(&self) -> Result<CrossbarGeometry> {
        let g = &self.geometry;
        let scale = if self.scenario.line_resistance {
            self.scenario.resistance_scale
        } else {
            0.0
        };
        CrossbarGeometry::new(g.rows, g.cols, g.r_word * scale, g.r_bit * scale)
    }

    pub fn solver_mode(&self) -> Result<SolverMode> {
        Ok(if self.crossbar()?.is_ideal() {
            SolverMode::Ideal
        } else {
            SolverMode::Nodal
        })
    }

    pub fn profile(&self) -> Result<DeviceProfile> {
        DeviceProfile::resolve(&self.device_profile)
    }

    /// Programming-stage statistics implied by the scenario flags, if any.
    pub fn programming(&self, profile: &DeviceProfile) -> Result<Option<DevicePopulationSpec>> {
        let s = &self.scenario;
        if !s.faults && !s.d2d {
            return Ok(None);
        }
        let base = self
            .population
            .clone()
            .or_else(|| profile.population.clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "scenario `{}` needs population statistics; profile `{}` has none",
                    self.name, profile.name
                ))
            })?;
        let mut p = DevicePopulationSpec {
            reduced_range_alpha: base.reduced_range_alpha,
            ..Default::default()
        };
        if s.faults {
            p.fraction_stuck_high = base.fraction_stuck_high;
            p.fraction_stuck_low = base.fraction_stuck_low;
        }
        if s.d2d {
            p.fraction_reduced_range = base.fraction_reduced_range;
            p.sigma_prog = base.sigma_prog;
        }
        Ok(Some(p))
    }

    pub fn rtn_model<'a>(&self, profile: &'a DeviceProfile) -> Result<Option<&'a RtnModel>> {
        if !self.scenario.rtn {
            return Ok(None);
        }
        profile.device.rtn.as_ref().map(Some).ok_or_else(|| {
            Error::Config(format!("profile `{}` has no RTN model", profile.name))
        })
    }
}

/// Seed of base network `i`.
pub fn base_seed(master: u64, i: usize) -> u64 {
    rng::derive_seed(master, &[rng::tag::BASE, i as u64])
}

/// Devices needed to hold an architecture as positive/negative pairs.
pub fn memristor_count(arch: &Architecture) -> usize {
    2 * arch.weight_count()
}

/// MNIST split into fitting, validation and evaluation sets.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
}

impl ExperimentData {
    pub fn load(dir: impl AsRef<Path>, train_size: usize, eval_images: Option<usize>) -> Result<Self> {
        let files = MnistFiles::in_dir(dir)?;
        let full = files.load_train()?;
        let (train, validation) = split_train_validation(&full, train_size)?;
        let mut test = files.load_test()?;
        if let Some(n) = eval_images {
            test = test.head(n);
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }
}

/// Directory of trained-network checkpoints keyed by architecture, training
/// settings and seed.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    pub dir: PathBuf,
}

impl NetworkCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, arch: &Architecture, t: &TrainingConfig, seed: u64) -> PathBuf {
        let sizes: Vec<String> = arch.sizes().iter().map(|s| s.to_string()).collect();
        self.dir.join(format!(
            "net-{}-lr{}-p{}-b{}-e{}-n{}-s{seed:016x}.json",
            sizes.join("-"),
            t.learning_rate,
            t.patience,
            t.batch_size,
            t.max_epochs,
            t.train_size
        ))
    }
}

/// Trains the network for `seed`, or loads it from `cache` when present.
pub fn obtain_network(
    arch: &Architecture,
    training: &TrainingConfig,
    seed: u64,
    data: &ExperimentData,
    cache: Option<&NetworkCache>,
) -> Result<(NetworkParams, Option<TrainHistory>)> {
    let path = cache.map(|c| c.path(arch, training, seed));
    if let Some(p) = &path {
        if p.exists() {
            let net = NetworkParams::load(p)?;
            if net.arch == *arch && net.seed == seed {
                return Ok((net, None));
            }
        }
    }
    let init = init_network(arch, seed);
    let (net, history) = train(&init, &data.train, &data.validation, &training.with_seed(seed))?;
    if let Some(p) = &path {
        fs::create_dir_all(p.parent().unwrap()).map_err(|e| Error::io(p, e))?;
        let tmp = p.with_extension("json.tmp");
        net.save(&tmp)?;
        fs::rename(&tmp, p).map_err(|e| Error::io(p, e))?;
    }
    Ok((net, Some(history)))
}

/// `n_samples` uniformly drawn `k`-subsets of `0..pool`, each sorted.
pub fn sample_combinations(pool: usize, k: usize, n_samples: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > pool {
        return Err(Error::Config(format!("cannot draw {k} of {pool}")));
    }
    Ok((0..n_samples)
        .map(|_| {
            let mut s = index::sample(rng, pool, k).into_vec();
            s.sort_unstable();
            s
        })
        .collect())
}

/// Every `k`-subset of `0..n` in lexicographic order.
pub fn all_combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] < n - k + i) else {
            return out;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

pub fn n_choose_k(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Box-plot statistics with quartiles by linear interpolation at
/// `h = (N−1)·p` and whiskers at the most extreme data within 1.5·IQR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats> {
    if values.is_empty() {
        return Err(Error::EmptyInput("summary values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (
        quantile_sorted(&v, 0.25),
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75),
    );
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || v.iter().copied().filter(|&x| x >= lo && x <= hi);
    Ok(SummaryStats {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        median,
        q1,
        q3,
        iqr,
        whisker_low: inside().next().unwrap_or(q1),
        whisker_high: inside().last().unwrap_or(q3),
        outliers: v.iter().copied().filter(|&x| x < lo || x > hi).collect(),
    })
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    /// Software accuracy of a trained base network.
    Digital {
        base: usize,
        base_seed: u64,
        accuracy: f64,
        epochs: Option<usize>,
    },
    /// Accuracy after mapping alone: no disturbances, ideal currents.
    Mapped { base: usize, base_seed: u64, accuracy: f64 },
    /// One disturbed network.
    Individual {
        base: usize,
        base_seed: u64,
        iteration: usize,
        accuracy: f64,
    },
    Committee {
        size: usize,
        /// Iteration (distinct networks) or base network (identical
        /// networks) the members were drawn from.
        group: usize,
        sample: usize,
        members: Vec<MemberId>,
        accuracy: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        optimized_accuracy: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        weights: Option<Vec<f64>>,
    },
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub size: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: usize,
}

impl SummaryRow {
    fn new(group: &str, size: usize, s: &SummaryStats) -> Self {
        Self {
            group: group.into(),
            size,
            count: s.count,
            mean: s.mean,
            median: s.median,
            q1: s.q1,
            q3: s.q3,
            iqr: s.iqr,
            whisker_low: s.whisker_low,
            whisker_high: s.whisker_high,
            outliers: s.outliers.len(),
        }
    }
}

/// How the committee data points of one size were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingInfo {
    pub size: usize,
    pub groups: usize,
    pub per_group: usize,
    /// Every subset of each group was evaluated instead of sampling.
    pub enumerated: bool,
    pub total: usize,
    pub optimized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub config: ExperimentConfig,
    pub solver: SolverMode,
    pub memristors_per_network: usize,
    pub base_seeds: Vec<u64>,
    pub eval_images: usize,
    pub sampling: Vec<SamplingInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<Record>,
    pub summary: Vec<SummaryRow>,
    pub metadata: Metadata,
}

impl ExperimentResult {
    pub fn summary_row(&self, group: &str, size: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.group == group && r.size == size)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("records.jsonl");
        let io = |e| Error::io(&path, e);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;

        let path = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serde(e.to_string()))?;
        for row in &self.summary {
            w.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("metadata.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.metadata)?).map_err(|e| Error::io(&path, e))
    }
}

/// Where and how [`run_experiment`] persists things.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub network_cache: Option<NetworkCache>,
    /// Write each group's member outputs as a committee pool file.
    pub write_pools: bool,
}

/// Trained base networks of an experiment, with their digital records.
pub fn base_networks(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    cache: Option<&NetworkCache>,
) -> Result<Vec<(NetworkParams, Option<TrainHistory>)>> {
    (0..cfg.counts.base_networks)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed(cfg.master_seed, i);
            let r = obtain_network(&cfg.architecture, &cfg.training, seed, data, cache);
            if r.is_ok() {
                info!("base network {i} ready (seed {seed:016x})");
            }
            r
        })
        .collect()
}

/// Maps a network per the experiment's device, p_L and geometry.
pub fn map_for(cfg: &ExperimentConfig, net: &NetworkParams, data: &ExperimentData) -> Result<MappedNetwork> {
    let profile = cfg.profile()?;
    let geometry = cfg.crossbar()?;
    let permutation = if cfg.scenario.reorder {
        let profile = mean_input_intensity(&[&data.train, &data.validation])?;
        let plan = TilingPlan::new(cfg.architecture.inputs() + 1, &geometry);
        Some(intensity_permutation(&profile, &plan)?)
    } else {
        None
    };
    map_network(
        net,
        &NetworkMapping {
            device: profile.device.clone(),
            p_l: cfg.p_l,
            scope: cfg.wmax_scope,
            geometry,
            tiling: TilingOptions {
                split_columns: cfg.geometry.split_columns,
                leakage: cfg.geometry.leakage,
            },
            first_layer_permutation: permutation,
        },
    )
}

/// Applies one iteration's programming faults, variability and RTN.
pub fn disturb(
    mapped: &MappedNetwork,
    profile: &DeviceProfile,
    programming: Option<&DevicePopulationSpec>,
    rtn: Option<&RtnModel>,
    master: u64,
    base: usize,
    iteration: usize,
) -> Result<MappedNetwork> {
    let mut out = mapped.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (t, tile) in layer.tiles.iter_mut().enumerate() {
            let path = [base as u64, iteration as u64, l as u64, t as u64];
            if let Some(spec) = programming {
                *tile = program_tile(tile, spec, &profile.device, master, &path)?;
            }
            if let Some(model) = rtn {
                let mut r = rng::stream(master, &[rng::tag::RTN, path[0], path[1], path[2], path[3]]);
                *tile = apply_rtn(tile, model, &mut r)?;
            }
        }
    }
    Ok(out)
}

fn outputs_on(net: &EffectiveNetwork, set: &LabeledSet, averaging: Averaging) -> Result<Matrix> {
    match averaging {
        Averaging::PostSoftmax => net.infer_set(set),
        Averaging::PreSoftmax => net.logits_set(set),
    }
}

fn accuracy_of(outputs: &Matrix, labels: &[u8]) -> Result<f64> {
    committee_accuracy(&[outputs], &Weightings::equal(1), labels)
}

struct Member {
    id: MemberId,
    test: Matrix,
    validation: Option<Matrix>,
}

/// Runs a full experiment: base networks, mapping, disturbance iterations
/// and committee sampling. Results depend only on the config.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = ExperimentData::load(&cfg.data_dir, cfg.training.train_size, cfg.counts.eval_images)?;
    run_experiment_with(cfg, &data, opts)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, data: &ExperimentData, opts: &RunOptions) -> Result<ExperimentResult> {
    cfg.validate()?;
    let profile = cfg.profile()?;
    let programming = cfg.programming(&profile)?;
    let rtn = cfg.rtn_model(&profile)?;
    let mode = cfg.solver_mode()?;
    let counts = &cfg.counts;
    let master = cfg.master_seed;
    let test_labels = data.test.labels();
    let val_labels = data.validation.labels();
    let kind = match cfg.scenario.averaging {
        Averaging::PostSoftmax => OutputKind::Probabilities,
        Averaging::PreSoftmax => OutputKind::Logits,
    };

    let nets = base_networks(cfg, data, opts.network_cache.as_ref())?;
    let seeds: Vec<u64> = nets.iter().map(|(n, _)| n.seed).collect();
    let mut records = Vec::new();
    for (i, (net, hist)) in nets.iter().enumerate() {
        records.push(Record::Digital {
            base: i,
            base_seed: net.seed,
            accuracy: crate::net::evaluate_accuracy(net, &data.test)?,
            epochs: hist.as_ref().map(|h| h.best_epoch),
        });
    }
    let mapped: Vec<MappedNetwork> = nets
        .par_iter()
        .map(|(n, _)| map_for(cfg, n, data))
        .collect::<Result<_>>()?;
    for (i, m) in mapped.iter().enumerate() {
        let eff = EffectiveNetwork::new(m, SolverMode::Ideal)?;
        records.push(Record::Mapped {
            base: i,
            base_seed: seeds[i],
            accuracy: eff.accuracy(&data.test)?,
        });
    }

    // Members of one group are committee candidates for each other.
    let identical = cfg.scenario.identical_networks;
    let (groups, per_group_members) = if identical {
        (counts.base_networks, counts.iterations)
    } else {
        (counts.iterations, counts.base_networks)
    };
    let want_validation = counts.optimized_samples_per_size > 0;
    let sampling = plan_sampling(
        &counts.committee_sizes,
        counts.samples_per_size,
        counts.optimized_samples_per_size,
        groups,
        per_group_members,
    );

    let mut individuals = Vec::new();
    let mut committees = Vec::new();
    for g in 0..groups {
        let members: Vec<Member> = (0..per_group_members)
            .into_par_iter()
            .map(|m| -> Result<Member> {
                let (base, iteration) = if identical { (g, m) } else { (m, g) };
                let disturbed = disturb(&mapped[base], &profile, programming.as_ref(), rtn, master, base, iteration)?;
                let eff = EffectiveNetwork::new(&disturbed, mode).map_err(|e| with_iteration(e, iteration))?;
                Ok(Member {
                    id: MemberId {
                        base,
                        base_seed: seeds[base],
                        iteration,
                    },
                    test: outputs_on(&eff, &data.test, cfg.scenario.averaging)?,
                    validation: want_validation
                        .then(|| outputs_on(&eff, &data.validation, cfg.scenario.averaging))
                        .transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        for m in &members {
            individuals.push(Record::Individual {
                base: m.id.base,
                base_seed: m.id.base_seed,
                iteration: m.id.iteration,
                accuracy: accuracy_of(&m.test, test_labels)?,
            });
        }
        let ids: Vec<MemberId> = members.iter().map(|m| m.id).collect();
        let test: Vec<&Matrix> = members.iter().map(|m| &m.test).collect();
        let val: Option<Vec<&Matrix>> = members.iter().map(|m| m.validation.as_ref()).collect();
        committees.extend(group_committees(
            g,
            &ids,
            &test,
            test_labels,
            val.as_deref().map(|v| (v, val_labels)),
            &sampling,
            master,
        )?);
        if opts.write_pools {
            if let Some(dir) = &opts.out_dir {
                let pools = dir.join("pools");
                fs::create_dir_all(&pools).map_err(|e| Error::io(&pools, e))?;
                let pool_of = |outs: &[&Matrix], labels: &[u8]| {
                    CommitteePool::new(
                        kind,
                        labels.to_vec(),
                        ids.iter()
                            .zip(outs)
                            .map(|(&id, &o)| PoolMember { id, outputs: o.clone() })
                            .collect(),
                    )
                };
                pool_of(&test, test_labels)?.save(pools.join(format!("group-{g:04}.bin")))?;
                if let Some(v) = &val {
                    pool_of(v, val_labels)?.save(pools.join(format!("group-{g:04}.val.bin")))?;
                }
            }
        }
        info!("{}: group {}/{} done", cfg.name, g + 1, groups);
    }
    // Individual records in (base, iteration) order regardless of grouping.
    individuals.sort_by_key(|r| match r {
        Record::Individual { base, iteration, .. } => (*base, *iteration),
        _ => unreachable!(),
    });
    records.extend(individuals);
    records.extend(committees);

    let summary = summarize_records(&records)?;
    let result = ExperimentResult {
        records,
        summary,
        metadata: Metadata {
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            solver: mode,
            memristors_per_network: memristor_count(&cfg.architecture),
            base_seeds: seeds,
            eval_images: data.test.len(),
            sampling,
        },
    };
    if let Some(dir) = &opts.out_dir {
        result.write(dir)?;
    }
    Ok(result)
}

/// Per-size committee sampling over `groups` groups of `members` each: all
/// subsets when they number no more than the per-group quota, otherwise a
/// random draw of that many.
pub fn plan_sampling(
    sizes: &[usize],
    samples_per_size: usize,
    optimized_per_size: usize,
    groups: usize,
    members: usize,
) -> Vec<SamplingInfo> {
    sizes
        .iter()
        .map(|&k| {
            let quota = samples_per_size.div_ceil(groups);
            let subsets = n_choose_k(members, k);
            let enumerated = subsets <= quota as u128;
            let per_group = if enumerated { subsets as usize } else { quota };
            let optimized = optimized_per_size.div_ceil(groups).min(per_group);
            SamplingInfo {
                size: k,
                groups,
                per_group,
                enumerated,
                total: per_group * groups,
                optimized: optimized * groups,
            }
        })
        .collect()
}

/// Committee records of one group. The first `optimized / groups` samples
/// of each size also get weightings optimized on `validation`.
#[allow(clippy::too_many_arguments)]
pub fn group_committees(
    group: usize,
    ids: &[MemberId],
    test: &[&Matrix],
    test_labels: &[u8],
    validation: Option<(&[&Matrix], &[u8])>,
    sampling: &[SamplingInfo],
    master: u64,
) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for info in sampling {
        let k = info.size;
        let subsets = if info.enumerated {
            all_combinations(ids.len(), k)
        } else {
            let mut r = rng::stream(master, &[rng::tag::COMMITTEE, k as u64, group as u64]);
            sample_combinations(ids.len(), k, info.per_group, &mut r)?
        };
        let n_opt = info.optimized / info.groups;
        if n_opt > 0 && validation.is_none() {
            return Err(Error::Config("optimized weightings need validation outputs".into()));
        }
        let recs: Vec<Record> = subsets
            .par_iter()
            .enumerate()
            .map(|(s, subset)| -> Result<Record> {
                let outs: Vec<&Matrix> = subset.iter().map(|&i| test[i]).collect();
                let accuracy = committee_accuracy(&outs, &Weightings::equal(k), test_labels)?;
                let (optimized_accuracy, weights) = match validation {
                    Some((val, val_labels)) if s < n_opt => {
                        let v: Vec<&Matrix> = subset.iter().map(|&i| val[i]).collect();
                        let w = optimize_weightings(&v, val_labels)?;
                        let a = committee_accuracy(&outs, &w, test_labels)?;
                        (Some(a), Some(w.as_slice().to_vec()))
                    }
                    _ => (None, None),
                };
                Ok(Record::Committee {
                    size: k,
                    group,
                    sample: s,
                    members: subset.iter().map(|&i| ids[i]).collect(),
                    accuracy,
                    optimized_accuracy,
                    weights,
                })
            })
            .collect::<Result<_>>()?;
        out.extend(recs);
    }
    Ok(out)
}

/// Committee records resampled from saved pools, one pool per group, each
/// optionally paired with the same members' validation pool.
pub fn resample_pools(
    pools: &[(CommitteePool, Option<CommitteePool>)],
    sizes: &[usize],
    samples_per_size: usize,
    optimized_per_size: usize,
    seed: u64,
) -> Result<(Vec<Record>, Vec<SamplingInfo>)> {
    let members = pools.first().map(|(p, _)| p.len()).ok_or(Error::EmptyInput("pools"))?;
    if pools.iter().any(|(p, _)| p.len() != members) {
        return Err(Error::Config("pools differ in member count".into()));
    }
    if let Some(&k) = sizes.iter().find(|&&k| k == 0 || k > members) {
        return Err(Error::Config(format!("committee size {k} must lie in 1..={members}")));
    }
    let sampling = plan_sampling(sizes, samples_per_size, optimized_per_size, pools.len(), members);
    let mut records = Vec::new();
    for (g, (test, val)) in pools.iter().enumerate() {
        let ids: Vec<MemberId> = test.members.iter().map(|m| m.id).collect();
        if let Some(v) = val {
            if v.members.iter().map(|m| m.id).ne(ids.iter().copied()) {
                return Err(Error::Config(format!("validation pool {g} has different members")));
            }
        }
        let val_outs = val.as_ref().map(|v| (v.all_outputs(), v.labels.as_slice()));
        records.extend(group_committees(
            g,
            &ids,
            &test.all_outputs(),
            &test.labels,
            val_outs.as_ref().map(|(o, l)| (o.as_slice(), *l)),
            &sampling,
            seed,
        )?);
    }
    Ok((records, sampling))
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::TileSolve { tile, source, .. } => Error::TileSolve {
            tile,
            iteration: Some(iteration),
            source,
        },
        other => other,
    }
}

/// Summary rows: `digital`, `mapped`, `individual` (size 1), `committee`
/// per size and `optimized` per size where present.
pub fn summarize_records(records: &[Record]) -> Result<Vec<SummaryRow>> {
    let mut digital = Vec::new();
    let mut mapped = Vec::new();
    let mut individual = Vec::new();
    let mut committee: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut optimized: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in records {
        match r {
            Record::Digital { accuracy, .. } => digital.push(*accuracy),
            Record::Mapped { accuracy, .. } => mapped.push(*accuracy),
            Record::Individual { accuracy, .. } => individual.push(*accuracy),
            Record::Committee {
                size,
                accuracy,
                optimized_accuracy,
                ..
            } => {
                committee.entry(*size).or_default().push(*accuracy);
                if let Some(a) = optimized_accuracy {
                    optimized.entry(*size).or_default().push(*a);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (name, v) in [("digital", &digital), ("mapped", &mapped), ("individual", &individual)] {
        if !v.is_empty() {
            rows.push(SummaryRow::new(name, 1, &summarize(v)?));
        }
    }
    for (name, m) in [("committee", &committee), ("optimized", &optimized)] {
        for (k, v) in m {
            rows.push(SummaryRow::new(name, *k, &summarize(v)?));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_hand_case() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.iqr), (2.25, 3.5, 4.75, 2.5));
        assert_eq!(s.outliers, vec![100.0]);
        assert_eq!((s.whisker_low, s.whisker_high), (1.0, 5.0));
        let one = summarize(&[0.7]).unwrap();
        assert_eq!((one.median, one.q1, one.q3, one.whisker_low, one.whisker_high), (0.7, 0.7, 0.7, 0.7, 0.7));
        assert!(one.outliers.is_empty());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn memristor_counts() {
        assert_eq!(memristor_count(&Architecture::mnist(25)), 39_770);
        assert_eq!(memristor_count(&Architecture::mnist(50)), 79_520);
        assert_eq!(2 * memristor_count(&Architecture::mnist(25)), 79_540);
    }

    #[test]
    fn combinations() {
        assert_eq!(all_combinations(4, 2).len(), 6);
        assert_eq!(all_combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(n_choose_k(25, 5), 53_130);
        let mut r = rng::stream(0, &[]);
        let s = sample_combinations(5, 5, 3, &mut r).unwrap();
        assert!(s.iter().all(|c| c == &vec![0, 1, 2, 3, 4]));
        assert!(sample_combinations(3, 4, 1, &mut r).is_err());
    }

    #[test]
    fn bundled_scenarios_parse() {
        for name in ExperimentConfig::bundled_names() {
            let cfg = ExperimentConfig::resolve(name).unwrap();
            assert_eq!(cfg.name, name);
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
        let x5 = ExperimentConfig::resolve("hfo2-lr-5x").unwrap().crossbar().unwrap();
        assert!((x5.r_word - 1.75).abs() < 1e-12 && (x5.r_bit - 1.6).abs() < 1e-12);
    }
}
