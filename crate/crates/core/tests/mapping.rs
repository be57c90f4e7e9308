use proptest::prelude::*;
use xbarcm::mapping::{
    compute_wmax, map_network, map_weight, quantize, read_tile_dump, tile_layer, write_tile_dump, CrossbarGeometry,
    DeviceModel, MappingSpec, NetworkMapping, TilingOptions, WmaxScope,
};
use xbarcm::net::{init_network, Architecture, NetworkParams};
use xbarcm::solver::{layer_outputs, network_inference, SolverMode};
use xbarcm::Matrix;

fn ta2o5() -> DeviceModel {
    let r: Vec<f64> = (1..=8).map(|k| 25e3 * k as f64).collect();
    DeviceModel::from_resistances(&r, 0.1).unwrap()
}

fn devices() -> Vec<DeviceModel> {
    vec![
        DeviceModel::continuous(1e-3, 10.48, 0.1),
        ta2o5(),
        DeviceModel::continuous(1e-6, 7.5, 3.0),
    ]
}

fn mapping(device: DeviceModel, p_l: f64, geometry: CrossbarGeometry, perm: Option<Vec<usize>>) -> NetworkMapping {
    NetworkMapping {
        device,
        p_l,
        scope: WmaxScope::Global,
        geometry,
        tiling: TilingOptions::default(),
        first_layer_permutation: perm,
    }
}

fn ideal_geometry() -> CrossbarGeometry {
    CrossbarGeometry::new(128, 64, 0.0, 0.0).unwrap()
}

#[test]
fn nearest_discrete_state_by_scan() {
    let d = ta2o5();
    let target = 33.3e-6;
    // Independent scan over {0} ∪ states.
    let candidates: Vec<f64> = std::iter::once(0.0).chain((1..=8).map(|k| 1.0 / (25e3 * k as f64))).collect();
    let best = candidates
        .iter()
        .copied()
        .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
        .unwrap();
    assert_eq!(quantize(target, &d), best);
    assert!((best - 40e-6).abs() < 1e-15);
    assert_eq!(quantize(0.0, &d), 0.0);
}

#[test]
fn tiles_follow_the_layer_shapes() {
    let geo = CrossbarGeometry::new(128, 64, 0.35, 0.32).unwrap();
    let pos = Matrix::from_fn(785, 25, |i, k| 1e-4 * (1 + (i + k) % 9) as f64);
    let neg = Matrix::from_fn(785, 25, |i, k| 1e-4 * (1 + (i * k) % 7) as f64);
    let tiles = tile_layer(&pos, &neg, &geo, None).unwrap();
    let counts: Vec<usize> = tiles.iter().map(|t| t.used_row_count()).collect();
    assert_eq!(counts, [113, 112, 112, 112, 112, 112, 112]);
    assert_eq!(tiles[0].used_rows, 15..128);
    // Slot 0 is the bottom word line of the first tile.
    assert_eq!(tiles[0].input_for_row(127), Some(0));
    assert_eq!(tiles[0].g.get(127, 2), pos.get(0, 1));
    assert_eq!(tiles[0].g.get(127, 3), neg.get(0, 1));
    assert_eq!(tiles[0].used_columns().count(), 50);
    let mut seen: Vec<usize> = tiles.iter().flat_map(|t| t.row_map.clone()).collect();
    seen.sort();
    assert_eq!(seen, (0..785).collect::<Vec<_>>());

    let second = tile_layer(&Matrix::zeros(26, 10), &Matrix::zeros(26, 10), &geo, None).unwrap();
    assert_eq!(second.len(), 1);
    assert_eq!(second[0].used_rows, 102..128);
    assert!(tile_layer(&Matrix::zeros(26, 33), &Matrix::zeros(26, 33), &geo, None).is_err());
}

#[test]
fn tile_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let net = init_network(&Architecture::new(vec![20, 6, 3]).unwrap(), 8);
    let geo = CrossbarGeometry::new(8, 16, 0.35, 0.32).unwrap();
    let m = map_network(&net, &mapping(ta2o5(), 0.0, geo, None)).unwrap();
    let p = dir.path().join("tiles.json");
    write_tile_dump(&p, &m.layers[0].tiles).unwrap();
    assert_eq!(read_tile_dump(&p).unwrap(), m.layers[0].tiles);
}

/// Digital `Σ wᵢxᵢ` (bias last) and `Σ |wᵢxᵢ|` for one layer.
fn preactivation(w: &Matrix, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (0..w.cols())
        .map(|k| {
            (0..w.rows()).fold((0.0, 0.0), |(s, a), i| {
                let t = w.get(i, k) * input[i];
                (s + t, a + t.abs())
            })
        })
        .unzip()
}

fn random_net(arch: Vec<usize>, seed: u64) -> NetworkParams {
    init_network(&Architecture::new(arch).unwrap(), seed)
}

fn assert_exact_recovery(net: &NetworkParams, input: &[f64]) {
    let exact = DeviceModel::continuous(1e-3, f64::INFINITY, 0.1);
    let m = map_network(net, &mapping(exact, 0.0, ideal_geometry(), None)).unwrap();
    let mut a = input.to_vec();
    a.push(1.0);
    let layer = &m.layers[0];
    let got = layer_outputs(&layer.tiles, &a, &layer.spec, SolverMode::Ideal).unwrap();
    let (want, scale) = preactivation(&net.layers[0], &a);
    for k in 0..want.len() {
        assert!(
            (got.values[k] - want[k]).abs() <= 1e-9 * scale[k].max(1e-300),
            "output {k}: {} vs {}",
            got.values[k],
            want[k]
        );
    }
    // The same holds through the nodal solver when line resistance is zero.
    let nodal = layer_outputs(&layer.tiles, &a, &layer.spec, SolverMode::Nodal).unwrap();
    for k in 0..want.len() {
        assert!((nodal.values[k] - want[k]).abs() <= 1e-9 * scale[k].max(1e-300));
    }
}

#[test]
fn exact_recovery_on_full_size_layer() {
    let net = random_net(vec![784, 25, 10], 17);
    let input: Vec<f64> = (0..784).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    assert_exact_recovery(&net, &input);
}

proptest! {
    #[test]
    fn mapped_conductances_are_allowed(
        w in prop::collection::vec(-3.0..3.0f64, 1..200),
        p_l in 0.0..0.2f64,
        d in 0usize..3,
    ) {
        let device = devices().swap_remove(d);
        let w_max = compute_wmax(w.iter().copied(), p_l).unwrap();
        let spec = MappingSpec::new(device.clone(), p_l, w_max).unwrap();
        for &x in &w {
            let (p, n) = map_weight(x, &spec);
            prop_assert!(device.is_allowed(p) && device.is_allowed(n));
            prop_assert!(p == 0.0 || n == 0.0);
        }
    }

    #[test]
    fn quantize_is_idempotent(t in 0.0..2e-3f64, d in 0usize..3) {
        let device = devices().swap_remove(d);
        let q = quantize(t, &device);
        prop_assert!(device.is_allowed(q));
        prop_assert_eq!(quantize(q, &device), q);
    }

    #[test]
    fn mapping_preserves_order_within_a_sign(a in 1e-6..4.0f64, b in 1e-6..4.0f64, neg in any::<bool>(), d in 0usize..3) {
        let device = devices().swap_remove(d);
        let spec = MappingSpec::new(device, 0.0, 2.0).unwrap();
        let s = if neg { -1.0 } else { 1.0 };
        let (lo, hi) = ((s * a).min(s * b), (s * a).max(s * b));
        let diff = |w: f64| { let (p, n) = map_weight(w, &spec); p - n };
        prop_assert!(diff(lo) <= diff(hi));
    }

    #[test]
    fn tiles_partition_the_inputs(n_in in 1usize..400, rows in 1usize..64, seed in any::<u64>()) {
        let geo = CrossbarGeometry::new(rows, 8, 0.1, 0.1).unwrap();
        let mut perm: Vec<usize> = (0..n_in).collect();
        let mut r = xbarcm::rng::stream(seed, &[]);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let g = Matrix::zeros(n_in, 3);
        let tiles = tile_layer(&g, &g, &geo, Some(&perm)).unwrap();
        prop_assert_eq!(tiles.len(), n_in.div_ceil(rows));
        let mut seen: Vec<usize> = tiles.iter().flat_map(|t| t.row_map.clone()).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..n_in).collect::<Vec<_>>());
        prop_assert!(tiles.iter().all(|t| t.used_rows.end == rows));
    }

    #[test]
    fn exact_recovery_on_random_layers(
        n_in in 1usize..300,
        n_out in 1usize..20,
        seed in any::<u64>(),
        x in prop::collection::vec(0.0..=1.0f64, 300),
    ) {
        let net = random_net(vec![n_in, n_out, 2], seed);
        assert_exact_recovery(&net, &x[..n_in]);
    }

    #[test]
    fn reordering_leaves_ideal_outputs_unchanged(seed in any::<u64>(), x in prop::collection::vec(0.0..=1.0f64, 200)) {
        let net = random_net(vec![200, 12, 4], seed);
        let geo = CrossbarGeometry::new(32, 32, 0.35, 0.32).unwrap();
        let mut perm: Vec<usize> = (0..201).collect();
        let mut r = xbarcm::rng::stream(seed, &[1]);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let plain = map_network(&net, &mapping(ta2o5(), 0.001, geo, None)).unwrap();
        let moved = map_network(&net, &mapping(ta2o5(), 0.001, geo, Some(perm))).unwrap();
        let a = network_inference(&plain, &x, SolverMode::Ideal).unwrap();
        let b = network_inference(&moved, &x, SolverMode::Ideal).unwrap();
        prop_assert_eq!(a, b);
    }
}
