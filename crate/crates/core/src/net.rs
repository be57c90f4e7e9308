//! Fully connected networks: sigmoid hidden layers, softmax output, trained
//! with mini-batch SGD on cross-entropy and early stopping on validation
//! accuracy.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mnist::LabeledSet;
use crate::rng;

/// Layer sizes without bias units, e.g. `[784, 25, 10]` for
/// `784(+1):25(+1):10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Architecture(format!(
                "need at least one hidden layer, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Architecture(format!("zero-width layer in {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn mnist(hidden: usize) -> Self {
        Self::new(vec![784, hidden, 10]).expect("valid")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// `(fan_in + 1, fan_out)` for every synaptic layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.sizes.windows(2).map(|w| (w[0] + 1, w[1])).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(a: Architecture) -> Self {
        a.sizes
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.sizes.len();
        for (i, s) in self.sizes.iter().enumerate() {
            if i + 1 < n {
                write!(f, "{s}(+1):")?;
            } else {
                write!(f, "{s}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `784:25:10` or `784(+1):25(+1):10`.
    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .split(':')
            .map(|p| {
                p.trim()
                    .trim_end_matches("(+1)")
                    .parse::<usize>()
                    .map_err(|_| Error::Architecture(format!("cannot parse `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `out = bias_row + Σ_i a[i]·W[i]`, skipping zero activations.
pub(crate) fn affine(w: &Matrix, a: &[f64], out: &mut [f64]) {
    let fan_in = w.rows() - 1;
    debug_assert_eq!(a.len(), fan_in);
    out.copy_from_slice(w.row(fan_in));
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            for (o, wij) in out.iter_mut().zip(w.row(i)) {
                *o += ai * wij;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub seed: u64,
    /// One `(fan_in + 1) × fan_out` matrix per synaptic layer; the last row
    /// holds the bias weights.
    pub layers: Vec<Matrix>,
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`, deterministic in `seed`.
pub fn init_network(arch: &Architecture, seed: u64) -> NetworkParams {
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let bound = 1.0 / ((rows - 1) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
        })
        .collect();
    NetworkParams {
        arch: arch.clone(),
        seed,
        layers,
    }
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        NetworkParams {
            arch: arch.clone(),
            seed: 0,
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn all_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|m| m.as_slice().iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Architecture(format!(
                "{} layers for architecture {}",
                self.layers.len(),
                self.arch
            )));
        }
        for (m, &(r, c)) in self.layers.iter().zip(&shapes) {
            if m.shape() != (r, c) {
                return Err(Error::Architecture(format!(
                    "layer shape {:?} does not match {}",
                    m.shape(),
                    self.arch
                )));
            }
        }
        if self.all_weights().any(|w| !w.is_finite()) {
            return Err(Error::Architecture("non-finite weight".into()));
        }
        Ok(())
    }

    /// Softmax output probabilities for one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.forward_logits(input)?;
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Output-layer weighted sums before the softmax.
    pub fn forward_logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.arch.inputs() {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.arch.inputs(),
                actual: input.len(),
            });
        }
        let mut a = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, w) in self.layers.iter().enumerate() {
            let mut z = vec![0.0; w.cols()];
            affine(w, &a, &mut z);
            if l != last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Output probabilities for every item, as an `N × outputs` matrix.
    pub fn forward_set(&self, set: &LabeledSet) -> Result<Matrix> {
        self.map_set(set, |x| self.forward(x))
    }

    /// Pre-softmax outputs for every item, as an `N × outputs` matrix.
    pub fn logits_set(&self, set: &LabeledSet) -> Result<Matrix> {
        self.map_set(set, |x| self.forward_logits(x))
    }

    fn map_set(&self, set: &LabeledSet, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
        let k = self.arch.outputs();
        let mut out = Matrix::zeros(set.len(), k);
        for (i, (x, _)) in set.iter().enumerate() {
            out.row_mut(i).copy_from_slice(&f(x)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                file: path.display().to_string(),
                field: "version",
                detail: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

pub const CHECKPOINT_FORMAT: &str = "xbarcm-network";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk network checkpoint (JSON). Weight matrices are row-major with the
/// bias row last.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    params: NetworkParams,
}

/// Fraction of items whose argmax output equals the label.
pub fn evaluate_accuracy(net: &NetworkParams, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut correct = 0usize;
    for (x, y) in set.iter() {
        if argmax(&net.forward(x)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            patience: 25,
            batch_size: 32,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("patience and batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// `-ln p`, with underflow clamped but NaN propagated.
fn cross_entropy(p: f64) -> f64 {
    if p.is_nan() {
        return p;
    }
    -p.max(f64::MIN_POSITIVE).ln()
}

/// Reusable per-sample buffers for backpropagation.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(arch: &Architecture) -> Self {
        Self {
            acts: arch.sizes().iter().map(|&n| vec![0.0; n]).collect(),
            deltas: arch.sizes().iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Adds the gradient of the cross-entropy loss for one sample into `grads`
/// and returns the sample loss.
fn accumulate_sample(
    net: &NetworkParams,
    x: &[f64],
    label: usize,
    ws: &mut Workspace,
    grads: &mut [Matrix],
) -> f64 {
    let n_layers = net.layers.len();
    ws.acts[0].copy_from_slice(x);
    for l in 0..n_layers {
        let (lo, hi) = ws.acts.split_at_mut(l + 1);
        affine(&net.layers[l], &lo[l], &mut hi[0]);
        if l + 1 == n_layers {
            softmax_in_place(&mut hi[0]);
        } else {
            hi[0].iter_mut().for_each(|v| *v = sigmoid(*v));
        }
    }
    let out = &ws.acts[n_layers];
    let loss = cross_entropy(out[label]);
    {
        let d = &mut ws.deltas[n_layers];
        d.copy_from_slice(out);
        d[label] -= 1.0;
    }
    for l in (0..n_layers).rev() {
        let w = &net.layers[l];
        let fan_in = w.rows() - 1;
        let (dlo, dhi) = ws.deltas.split_at_mut(l + 1);
        let delta = &dhi[0];
        let a = &ws.acts[l];
        let g = &mut grads[l];
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                for (gij, dj) in g.row_mut(i).iter_mut().zip(delta) {
                    *gij += ai * dj;
                }
            }
        }
        for (gb, dj) in g.row_mut(fan_in).iter_mut().zip(delta) {
            *gb += dj;
        }
        if l > 0 {
            let prev = &mut dlo[l];
            for (i, p) in prev.iter_mut().enumerate() {
                let s: f64 = w.row(i).iter().zip(delta).map(|(wij, dj)| wij * dj).sum();
                *p = s * a[i] * (1.0 - a[i]);
            }
        }
    }
    loss
}

/// Mean cross-entropy loss and its gradient over `batch` (indices into `set`).
pub fn loss_and_gradient(
    net: &NetworkParams,
    set: &LabeledSet,
    batch: &[usize],
) -> (f64, Vec<Matrix>) {
    let mut ws = Workspace::new(&net.arch);
    let mut grads: Vec<Matrix> = net
        .layers
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut loss = 0.0;
    for &i in batch {
        loss += accumulate_sample(net, set.input(i), set.label(i), &mut ws, &mut grads);
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut grads {
        g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    }
    (loss * scale, grads)
}

/// Mean cross-entropy loss over `batch`.
pub fn loss(net: &NetworkParams, set: &LabeledSet, batch: &[usize]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|&i| {
            let p = net.forward(set.input(i)).expect("input dimension");
            cross_entropy(p[set.label(i)])
        })
        .sum();
    total / batch.len() as f64
}

pub fn apply_gradient(net: &mut NetworkParams, grads: &[Matrix], lr: f64) {
    for (w, g) in net.layers.iter_mut().zip(grads) {
        for (wi, gi) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *wi -= lr * gi;
        }
    }
}

/// Trains `net` and returns the snapshot with the best validation accuracy,
/// stopping once accuracy has not improved for `patience` consecutive epochs.
pub fn train(
    net: &NetworkParams,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyInput("training or validation set"));
    }
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((net.clone(), history));
    }
    let mut current = net.clone();
    let mut best = net.clone();
    history.best_val_accuracy = evaluate_accuracy(net, val_set)?;

    let mut ws = Workspace::new(&net.arch);
    let mut grads: Vec<Matrix> = net
        .layers
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads
                .iter_mut()
                .for_each(|g| g.as_mut_slice().iter_mut().for_each(|v| *v = 0.0));
            for &i in batch {
                epoch_loss += accumulate_sample(
                    &current,
                    train_set.input(i),
                    train_set.label(i),
                    &mut ws,
                    &mut grads,
                );
            }
            apply_gradient(&mut current, &grads, cfg.learning_rate / batch.len() as f64);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }
        let val_accuracy = evaluate_accuracy(&current, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            best.clone_from(&current);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}
