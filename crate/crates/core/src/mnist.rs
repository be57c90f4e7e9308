//! MNIST ingest: IDX parsing, train/validation split and per-input intensity
//! statistics.
//!
//! Pixel bytes `b` become intensities `b / 255`, so every input lies in
//! `[0, 1]` and maps directly onto a read-voltage fraction.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;
pub const NUM_CLASSES: usize = 10;

/// Inputs (row-major, `len × dim`) with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledSet {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("input dimension"));
        }
        if inputs.len() != dim * labels.len() {
            return Err(Error::Dimension {
                context: "labeled set inputs",
                expected: dim * labels.len(),
                actual: inputs.len(),
            });
        }
        if let Some(&x) = inputs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Format {
                file: "labeled set".into(),
                field: "intensity",
                detail: format!("{x} outside [0, 1]"),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format {
                file: "labeled set".into(),
                field: "label",
                detail: format!("{l} outside 0..=9"),
            });
        }
        Ok(Self {
            dim,
            inputs,
            labels,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&[f64], usize)> + '_ {
        self.inputs
            .chunks_exact(self.dim)
            .zip(self.labels.iter().map(|&l| l as usize))
    }

    /// First `n` items, in order.
    pub fn head(&self, n: usize) -> LabeledSet {
        let n = n.min(self.len());
        self.select(0..n)
    }

    pub fn select(&self, idx: impl IntoIterator<Item = usize>) -> LabeledSet {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in idx {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        LabeledSet {
            dim: self.dim,
            inputs,
            labels,
        }
    }

    /// Concatenation of two sets with the same dimension.
    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        if self.dim != other.dim {
            return Err(Error::Dimension {
                context: "concat",
                expected: self.dim,
                actual: other.dim,
            });
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Applies a column permutation: output column `s` is input column `perm[s]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<LabeledSet> {
        if perm.len() != self.dim {
            return Err(Error::Dimension {
                context: "column permutation",
                expected: self.dim,
                actual: perm.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.inputs.len());
        for row in self.inputs.chunks_exact(self.dim) {
            inputs.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(LabeledSet {
            dim: self.dim,
            inputs,
            labels: self.labels.clone(),
        })
    }

    /// Frequency of each label, as counts.
    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Per-input mean intensity plus a trailing bias entry fixed at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityProfile {
    pub means: Vec<f64>,
}

impl IntensityProfile {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let gz = path.extension().is_some_and(|ext| ext == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf)
    } else {
        BufReader::new(file).read_to_end(&mut buf)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct Header<'a> {
    file: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            file: self.file.clone(),
            field,
            detail: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn expect_magic(&mut self, want: u32) -> Result<()> {
        let magic = self.u32("magic")?;
        if magic != want {
            return Err(Error::Format {
                file: self.file.clone(),
                field: "magic",
                detail: format!("expected {want}, found {magic}"),
            });
        }
        Ok(())
    }

    fn payload(&self, expected: usize, field: &'static str) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < expected {
            return Err(Error::Format {
                file: self.file.clone(),
                field,
                detail: format!("truncated payload: expected {expected} bytes, found {}", rest.len()),
            });
        }
        Ok(&rest[..expected])
    }
}

/// Parses an IDX image container; returns `(rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut h = Header {
        file: name.to_string(),
        bytes,
        pos: 0,
    };
    h.expect_magic(IMAGES_MAGIC)?;
    let count = h.u32("count")? as usize;
    let rows = h.u32("rows")? as usize;
    let cols = h.u32("cols")? as usize;
    let payload = h.payload(count * rows * cols, "pixels")?;
    Ok((count, rows, cols, payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut h = Header {
        file: name.to_string(),
        bytes,
        pos: 0,
    };
    h.expect_magic(LABELS_MAGIC)?;
    let count = h.u32("count")? as usize;
    Ok(h.payload(count, "labels")?.to_vec())
}

/// Loads an MNIST-format image/label pair. Files ending in `.gz` are
/// decompressed transparently.
pub fn load_mnist(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (count, rows, cols, pixels) = parse_idx_images(&open_maybe_gz(ip)?, &ip.display().to_string())?;
    let labels = parse_idx_labels(&open_maybe_gz(lp)?, &lp.display().to_string())?;
    if labels.len() != count {
        return Err(Error::Format {
            file: lp.display().to_string(),
            field: "count",
            detail: format!("{} labels for {count} images", labels.len()),
        });
    }
    let inputs = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    LabeledSet::new(rows * cols, inputs, labels)
}

/// Serializes intensities back to an IDX image container using `round(i·255)`.
pub fn encode_idx_images(set: &LabeledSet, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != set.dim() {
        return Err(Error::Dimension {
            context: "idx image shape",
            expected: set.dim(),
            actual: rows * cols,
        });
    }
    let mut out = Vec::with_capacity(16 + set.inputs.len());
    for v in [IMAGES_MAGIC, set.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(set.inputs.iter().map(|&x| (x * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(set: &LabeledSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

pub fn write_idx(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// First `n_train` items form the training set, the remainder validation.
pub fn split_train_validation(set: &LabeledSet, n_train: usize) -> Result<(LabeledSet, LabeledSet)> {
    if n_train > set.len() {
        return Err(Error::Bounds {
            index: n_train,
            len: set.len(),
        });
    }
    Ok((set.select(0..n_train), set.select(n_train..set.len())))
}

/// Like [`split_train_validation`] but over a seeded shuffle of the items.
pub fn split_shuffled(set: &LabeledSet, n_train: usize, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
    if n_train > set.len() {
        return Err(Error::Bounds {
            index: n_train,
            len: set.len(),
        });
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT]));
    Ok((
        set.select(order[..n_train].iter().copied()),
        set.select(order[n_train..].iter().copied()),
    ))
}

/// Mean of every input over the union of `sets`, with a bias entry of 1.0
/// appended.
pub fn mean_input_intensity(sets: &[&LabeledSet]) -> Result<IntensityProfile> {
    let dim = sets.first().map(|s| s.dim()).ok_or(Error::EmptyInput("no sets"))?;
    let mut sums = vec![0.0; dim];
    let mut n = 0usize;
    for s in sets {
        if s.dim() != dim {
            return Err(Error::Dimension {
                context: "intensity profile",
                expected: dim,
                actual: s.dim(),
            });
        }
        for (x, _) in s.iter() {
            for (acc, v) in sums.iter_mut().zip(x) {
                *acc += v;
            }
        }
        n += s.len();
    }
    if n == 0 {
        return Err(Error::EmptyInput("all sets empty"));
    }
    let mut means: Vec<f64> = sums.into_iter().map(|s| (s / n as f64).clamp(0.0, 1.0)).collect();
    means.push(1.0);
    Ok(IntensityProfile { means })
}

/// Locations of the four standard MNIST files inside one directory.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Resolves the standard file names in `dir`, accepting both the
    /// `-idx3-ubyte` and `.idx3-ubyte` spellings, gzipped or not.
    pub fn in_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let find = |stem: &str, kind: &str| -> Result<PathBuf> {
            for sep in ["-", "."] {
                for ext in ["", ".gz"] {
                    let p = dir.join(format!("{stem}{sep}{kind}-ubyte{ext}"));
                    if p.exists() {
                        return Ok(p);
                    }
                }
            }
            Err(Error::io(
                dir.join(format!("{stem}-{kind}-ubyte")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            ))
        };
        Ok(Self {
            train_images: find("train-images", "idx3")?,
            train_labels: find("train-labels", "idx1")?,
            test_images: find("t10k-images", "idx3")?,
            test_labels: find("t10k-labels", "idx1")?,
        })
    }

    pub fn load_train(&self) -> Result<LabeledSet> {
        load_mnist(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<LabeledSet> {
        load_mnist(&self.test_images, &self.test_labels)
    }
}
