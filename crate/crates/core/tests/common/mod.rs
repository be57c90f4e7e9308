#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xbarcm::mapping::{tile_layer, ConductanceTile, CrossbarGeometry};
use xbarcm::mnist::LabeledSet;
use xbarcm::Matrix;
use xbarcm::net::{init_network, loss, loss_and_gradient, Architecture};

/// Noisy class prototypes in `[0, 1]^dim`; roughly linearly separable.
pub fn synthetic_set(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledSet {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(1234);
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| if proto_rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &p in &protos[c] {
            let x: f64 = if rng.random::<f64>() < 0.15 { rng.random() } else { p };
            inputs.push(x);
        }
        labels.push(c as u8);
    }
    LabeledSet::new(dim, inputs, labels).unwrap()
}

/// Central-difference gradient check on `n` random 4:3:2 networks.
pub fn max_gradient_error(n: u64) -> f64 {
    let arch = Architecture::new(vec![4, 3, 2]).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = init_network(&arch, seed);
        for w in net.layers.iter_mut().flat_map(|m| m.as_mut_slice()) {
            *w = rng.random_range(-2.0..2.0);
        }
        let inputs: Vec<f64> = (0..5 * 4).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..5).map(|_| rng.random_range(0..2)).collect();
        let set = LabeledSet::new(4, inputs, labels).unwrap();
        let batch: Vec<usize> = (0..5).collect();
        let (_, grads) = loss_and_gradient(&net, &set, &batch);
        let h = 1e-5;
        for l in 0..net.layers.len() {
            for k in 0..net.layers[l].as_slice().len() {
                let mut plus = net.clone();
                plus.layers[l].as_mut_slice()[k] += h;
                let mut minus = net.clone();
                minus.layers[l].as_mut_slice()[k] -= h;
                let fd = (loss(&plus, &set, &batch) - loss(&minus, &set, &batch)) / (2.0 * h);
                let bp = grads[l].as_slice()[k];
                let err = (fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
    }
    worst
}


/// Builds a tile whose physical cell (i, j) holds `g[i][j]`.
pub fn tile_from(g: &Matrix, r_word: f64, r_bit: f64) -> ConductanceTile {
    let (rows, cols) = g.shape();
    let geo = CrossbarGeometry::new(rows, cols, r_word, r_bit).unwrap();
    let half = cols.div_ceil(2);
    let at = |i: usize, j: usize| if j < cols { g.get(rows - 1 - i, j) } else { 0.0 };
    let pos = Matrix::from_fn(rows, half, |i, k| at(i, 2 * k));
    let neg = Matrix::from_fn(rows, half, |i, k| at(i, 2 * k + 1));
    let geo_wide = CrossbarGeometry { cols: 2 * half, ..geo };
    let mut t = tile_layer(&pos, &neg, &geo_wide, None).unwrap().remove(0);
    assert_eq!(t.g.get(0, 0), g.get(0, 0));
    t.geometry = geo_wide;
    t
}

/// Full `2·R·C` nodal system, assembled and solved densely. Nodes tied to
/// a source or to ground by a zero-resistance line are fixed. Returns
/// `(W, B, output currents)`; outputs are summed device currents per column.
pub fn dense_oracle(g: &Matrix, r_word: f64, r_bit: f64, v: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = g.shape();
    let n = 2 * rows * cols;
    let w = |i: usize, j: usize| 2 * (i * cols + j);
    let b = |i: usize, j: usize| 2 * (i * cols + j) + 1;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for i in 0..rows {
        for j in 0..cols {
            if r_word == 0.0 {
                fixed[w(i, j)] = Some(v[i]);
            }
            if r_bit == 0.0 {
                fixed[b(i, j)] = Some(0.0);
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&p| fixed[p].is_none()).collect();
    let mut slot = vec![usize::MAX; n];
    for (s, &p) in free.iter().enumerate() {
        slot[p] = s;
    }
    let m = free.len();
    let mut k = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    // Conductance `c` between node `p` and node `q` (or a fixed potential).
    let mut link = |p: usize, q: Option<usize>, fixed_v: f64, c: f64| {
        let mut stamp = |a: usize, other: Option<usize>, other_v: f64| {
            if slot[a] == usize::MAX {
                return;
            }
            k[(slot[a], slot[a])] += c;
            match other {
                Some(o) if slot[o] != usize::MAX => k[(slot[a], slot[o])] -= c,
                Some(o) => rhs[slot[a]] += c * fixed[o].unwrap(),
                None => rhs[slot[a]] += c * other_v,
            }
        };
        stamp(p, q, fixed_v);
        if let Some(q) = q {
            stamp(q, Some(p), 0.0);
        }
    };
    for i in 0..rows {
        for j in 0..cols {
            if r_word > 0.0 {
                if j == 0 {
                    link(w(i, 0), None, v[i], 1.0 / r_word);
                } else {
                    link(w(i, j - 1), Some(w(i, j)), 0.0, 1.0 / r_word);
                }
            }
            if g.get(i, j) > 0.0 {
                link(w(i, j), Some(b(i, j)), 0.0, g.get(i, j));
            }
            if r_bit > 0.0 {
                if i + 1 == rows {
                    link(b(i, j), None, 0.0, 1.0 / r_bit);
                } else {
                    link(b(i, j), Some(b(i + 1, j)), 0.0, 1.0 / r_bit);
                }
            }
        }
    }
    let x = if m == 0 {
        DVector::zeros(0)
    } else {
        k.lu().solve(&rhs).expect("nonsingular")
    };
    let at = |p: usize| fixed[p].unwrap_or_else(|| x[slot[p]]);
    let wm = Matrix::from_fn(rows, cols, |i, j| at(w(i, j)));
    let bm = Matrix::from_fn(rows, cols, |i, j| at(b(i, j)));
    let out = (0..cols)
        .map(|j| (0..rows).map(|i| g.get(i, j) * (wm.get(i, j) - bm.get(i, j))).sum())
        .collect();
    (wm, bm, out)
}
