//! Committee machines: averaging the outputs of several networks, with
//! equal or numerically optimized weightings.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::argmax;

/// What a pool's output matrices hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Softmax probabilities; rows sum to 1.
    #[default]
    Probabilities,
    /// Weighted sums entering the softmax.
    Logits,
}

/// Provenance of one pool member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemberId {
    /// Index of the base network within the experiment.
    pub base: usize,
    /// Seed the base network was trained from.
    pub base_seed: u64,
    /// Disturbance iteration.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolMember {
    pub id: MemberId,
    /// `N × classes` outputs on the pool's evaluation set.
    pub outputs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitteePool {
    pub kind: OutputKind,
    pub labels: Vec<u8>,
    pub members: Vec<PoolMember>,
}

const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl CommitteePool {
    pub fn new(kind: OutputKind, labels: Vec<u8>, members: Vec<PoolMember>) -> Result<Self> {
        let pool = Self { kind, labels, members };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let classes = self.members.first().map_or(0, |m| m.outputs.cols());
        for m in &self.members {
            if m.outputs.shape() != (n, classes) {
                return Err(Error::Dimension {
                    context: "pool member outputs",
                    expected: n * classes,
                    actual: m.outputs.rows() * m.outputs.cols(),
                });
            }
            if self.kind == OutputKind::Probabilities {
                for i in 0..n {
                    let s: f64 = m.outputs.row(i).iter().sum();
                    if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Config(format!(
                            "member {:?} row {i} sums to {s}",
                            m.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn outputs(&self, idx: &[usize]) -> Vec<&Matrix> {
        idx.iter().map(|&i| &self.members[i].outputs).collect()
    }

    pub fn all_outputs(&self) -> Vec<&Matrix> {
        self.members.iter().map(|m| &m.outputs).collect()
    }

    /// Accuracy of each member on its own.
    pub fn member_accuracies(&self) -> Result<Vec<f64>> {
        self.members
            .iter()
            .map(|m| committee_accuracy(&[&m.outputs], &Weightings::equal(1), &self.labels))
            .collect()
    }

    /// Writes the pool as a little-endian binary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let classes = self.members.first().map_or(0, |m| m.outputs.cols());
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(POOL_MAGIC);
        buf.extend_from_slice(&POOL_VERSION.to_le_bytes());
        buf.push(match self.kind {
            OutputKind::Probabilities => 0,
            OutputKind::Logits => 1,
        });
        for v in [self.labels.len(), classes, self.members.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.write_all(&self.labels).map_err(io)?;
        for m in &self.members {
            for v in [m.id.base as u64, m.id.base_seed, m.id.iteration as u64] {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            for x in m.outputs.as_slice() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = path.display().to_string();
        let mut r = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let bad = |field: &'static str, detail: String| Error::Format {
            file: file.clone(),
            field,
            detail,
        };
        let mut read = |n: usize, field: &'static str| -> Result<Vec<u8>> {
            let mut b = vec![0; n];
            r.read_exact(&mut b).map_err(|e| bad(field, e.to_string()))?;
            Ok(b)
        };
        if read(8, "magic")? != POOL_MAGIC {
            return Err(bad("magic", "not a committee pool file".into()));
        }
        let version = u32::from_le_bytes(read(4, "version")?.try_into().unwrap());
        if version != POOL_VERSION {
            return Err(bad("version", format!("unsupported version {version}")));
        }
        let kind = match read(1, "kind")?[0] {
            0 => OutputKind::Probabilities,
            1 => OutputKind::Logits,
            k => return Err(bad("kind", format!("unknown output kind {k}"))),
        };
        let mut u64s = |n: usize, field| -> Result<Vec<u64>> {
            Ok(read(8 * n, field)?
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let h = u64s(3, "header")?;
        let (n, classes, count) = (h[0] as usize, h[1] as usize, h[2] as usize);
        let labels = read(n, "labels")?;
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let id = read(24, "member id")?;
            let id: Vec<u64> = id
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let data: Vec<f64> = read(8 * n * classes, "member outputs")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            members.push(PoolMember {
                id: MemberId {
                    base: id[0] as usize,
                    base_seed: id[1],
                    iteration: id[2] as usize,
                },
                outputs: Matrix::from_vec(n, classes, data)?,
            });
        }
        Self::new(kind, labels, members)
    }
}

const POOL_MAGIC: &[u8; 8] = b"XBCMPOOL";
const POOL_VERSION: u32 = 1;

/// Non-negative member weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weightings(Vec<f64>);

impl Weightings {
    pub fn equal(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalizes `alpha`; fails on negative entries or a zero sum.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let s: f64 = alpha.iter().sum();
        if alpha.iter().any(|&a| !(a >= 0.0)) || !(s > 0.0) {
            return Err(Error::Config(format!("invalid weightings {alpha:?}")));
        }
        Ok(Self(alpha.into_iter().map(|a| a / s).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn is_uniform(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

fn check_members(outputs: &[&Matrix], alpha: &Weightings) -> Result<(usize, usize)> {
    let first = outputs.first().ok_or(Error::EmptyInput("committee"))?;
    if alpha.len() != outputs.len() {
        return Err(Error::Dimension {
            context: "committee weightings",
            expected: outputs.len(),
            actual: alpha.len(),
        });
    }
    for m in outputs {
        if m.shape() != first.shape() {
            return Err(Error::Dimension {
                context: "committee member outputs",
                expected: first.rows() * first.cols(),
                actual: m.rows() * m.cols(),
            });
        }
    }
    Ok(first.shape())
}

/// Predicted labels of the averaged output `Σ_k α_k·out_k` (ties go to the
/// lowest class). Equal weights reduce to the plain sum of outputs.
pub fn ensemble_predict(outputs: &[&Matrix], alpha: &Weightings) -> Result<Vec<usize>> {
    let (n, classes) = check_members(outputs, alpha)?;
    let uniform = alpha.is_uniform();
    let mut v = vec![0.0; classes];
    Ok((0..n)
        .map(|i| {
            v.iter_mut().for_each(|x| *x = 0.0);
            for (m, &a) in outputs.iter().zip(alpha.as_slice()) {
                let a = if uniform { 1.0 } else { a };
                for (x, y) in v.iter_mut().zip(m.row(i)) {
                    *x += a * y;
                }
            }
            argmax(&v)
        })
        .collect())
}

pub fn committee_accuracy(outputs: &[&Matrix], alpha: &Weightings, labels: &[u8]) -> Result<f64> {
    let pred = ensemble_predict(outputs, alpha)?;
    if pred.len() != labels.len() {
        return Err(Error::Dimension {
            context: "committee labels",
            expected: pred.len(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("committee labels"));
    }
    let hits = pred.iter().zip(labels).filter(|(p, &l)| **p == l as usize).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Settings of the coordinate search in [`optimize_weightings`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSearch {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_iterations: usize,
}

impl Default for WeightSearch {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            min_step: 1e-3,
            max_iterations: 200,
        }
    }
}

/// Coordinate ascent on the weight simplex from equal weights: each
/// iteration tries raising and lowering every weight by the current step
/// (renormalizing), keeps only strict accuracy improvements, and halves the
/// step after a pass without one.
pub fn optimize_weightings(outputs: &[&Matrix], labels: &[u8]) -> Result<Weightings> {
    optimize_weightings_with(outputs, labels, &WeightSearch::default())
}

pub fn optimize_weightings_with(outputs: &[&Matrix], labels: &[u8], search: &WeightSearch) -> Result<Weightings> {
    let k = outputs.len();
    let mut best = Weightings::equal(k);
    let mut best_acc = committee_accuracy(outputs, &best, labels)?;
    if k == 1 {
        return Ok(best);
    }
    let mut step = search.initial_step;
    for _ in 0..search.max_iterations {
        if step < search.min_step {
            break;
        }
        let mut improved = false;
        for j in 0..k {
            for dir in [1.0, -1.0] {
                let mut a = best.as_slice().to_vec();
                a[j] = (a[j] + dir * step).max(0.0);
                let Ok(cand) = Weightings::new(a) else { continue };
                if cand == best {
                    continue;
                }
                let acc = committee_accuracy(outputs, &cand, labels)?;
                if acc > best_acc {
                    best = cand;
                    best_acc = acc;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[[f64; 3]]) -> Matrix {
        Matrix::from_vec(rows.len(), 3, rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn hand_average() {
        let a = m(&[[0.6, 0.3, 0.1]]);
        let b = m(&[[0.1, 0.5, 0.4]]);
        assert_eq!(ensemble_predict(&[&a, &b], &Weightings::equal(2)).unwrap(), vec![1]);
        assert_eq!(ensemble_predict(&[&a], &Weightings::equal(1)).unwrap(), vec![0]);
        let w = Weightings::new(vec![3.0, 1.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.75, 0.25]);
        assert_eq!(ensemble_predict(&[&a, &b], &w).unwrap(), vec![0]);
    }

    #[test]
    fn mismatches_are_errors() {
        let a = m(&[[0.6, 0.3, 0.1]]);
        let b = m(&[[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]]);
        assert!(ensemble_predict(&[&a, &b], &Weightings::equal(2)).is_err());
        assert!(ensemble_predict(&[&a], &Weightings::equal(2)).is_err());
        assert!(ensemble_predict(&[], &Weightings::equal(0)).is_err());
        assert!(committee_accuracy(&[&a], &Weightings::equal(1), &[0, 1]).is_err());
        assert!(Weightings::new(vec![-0.1, 1.0]).is_err());
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let a = m(&[[0.4, 0.4, 0.2]]);
        assert_eq!(ensemble_predict(&[&a], &Weightings::equal(1)).unwrap(), vec![0]);
    }

    #[test]
    fn single_and_identical_members() {
        let a = m(&[[0.6, 0.3, 0.1], [0.1, 0.1, 0.8]]);
        let labels = [0, 1];
        assert_eq!(optimize_weightings(&[&a], &labels).unwrap().as_slice(), &[1.0]);
        let w = optimize_weightings(&[&a, &a, &a], &labels).unwrap();
        assert_eq!(w, Weightings::equal(3));
    }

    #[test]
    fn pool_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let pool = CommitteePool::new(
            OutputKind::Probabilities,
            vec![0, 2],
            vec![PoolMember {
                id: MemberId {
                    base: 3,
                    base_seed: 42,
                    iteration: 7,
                },
                outputs: m(&[[0.6, 0.3, 0.1], [0.1, 0.1, 0.8]]),
            }],
        )
        .unwrap();
        pool.save(&path).unwrap();
        assert_eq!(CommitteePool::load(&path).unwrap(), pool);
        assert_eq!(pool.member_accuracies().unwrap(), vec![1.0]);

        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(CommitteePool::load(&path), Err(Error::Format { .. })));

        let bad = CommitteePool::new(
            OutputKind::Probabilities,
            vec![0],
            vec![PoolMember {
                id: pool.members[0].id,
                outputs: m(&[[0.6, 0.3, 0.2]]),
            }],
        );
        assert!(bad.is_err());
    }
}
