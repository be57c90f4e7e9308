mod common;

use proptest::prelude::*;
use common::{dense_oracle, tile_from};
use xbarcm::mapping::{map_network, CrossbarGeometry, DeviceModel, NetworkMapping, TilingOptions, WmaxScope};
use xbarcm::net::{init_network, Architecture};
use xbarcm::nonideal::{program_tile, DevicePopulationSpec};
use xbarcm::solver::{
    ideal_tile_currents, network_inference, solve_tile_nodal, tile_transfer, EffectiveNetwork, SolverMode,
};
use xbarcm::Matrix;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn dense_oracle_agrees_on_fixed_tile() {
    let g = Matrix::from_fn(5, 6, |i, j| if (i + 2 * j) % 4 == 0 { 0.0 } else { 1e-4 * (1 + (i * j) % 9) as f64 });
    let v = [0.1, 0.0, 0.05, 0.1, 0.03];
    let t = tile_from(&g, 0.35, 0.32);
    let s = solve_tile_nodal(&t, &v).unwrap();
    let (wm, bm, out) = dense_oracle(&g, 0.35, 0.32, &v);
    for i in 0..5 {
        for j in 0..6 {
            assert!(rel_close(s.word.get(i, j), wm.get(i, j), 1e-8), "W({i},{j})");
            assert!(rel_close(s.bit.get(i, j), bm.get(i, j), 1e-8), "B({i},{j})");
        }
    }
    for j in 0..6 {
        assert!(rel_close(s.currents[j], out[j], 1e-8));
    }
}

#[test]
fn uniform_tile_currents_decrease_left_to_right() {
    let g = Matrix::from_fn(8, 8, |_, _| 1e-3);
    let (_, _, out) = dense_oracle(&g, 0.35, 0.32, &[0.1; 8]);
    assert!(out.windows(2).all(|w| w[1] < w[0]));

    let full = Matrix::from_fn(128, 64, |_, _| 1e-3);
    let t = tile_from(&full, 0.35, 0.32);
    let s = solve_tile_nodal(&t, &[0.1; 128]).unwrap();
    assert!(s.currents.windows(2).all(|w| w[1] < w[0]));
    let ideal = 128.0 * 1e-3 * 0.1;
    assert!(s.currents.iter().all(|&i| i < ideal && i > 0.2 * ideal));
}

#[test]
fn full_size_transfer_matches_direct_solve() {
    let g = Matrix::from_fn(128, 64, |i, j| 1e-4 * (1 + (i * 31 + j * 17) % 10) as f64);
    let t = tile_from(&g, 0.35, 0.32);
    let v: Vec<f64> = (0..128).map(|i| 0.1 * ((i * 13) % 7) as f64 / 6.0).collect();
    let s = solve_tile_nodal(&t, &v).unwrap();
    let tr = tile_transfer(&t, SolverMode::Nodal).unwrap();
    for j in 0..64 {
        let via: f64 = tr.row(j).iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(rel_close(via, s.currents[j], 1e-10));
    }
    let total_in: f64 = s.source_currents.iter().sum();
    let total_out: f64 = s.currents.iter().sum();
    assert!(rel_close(total_in, total_out, 1e-9));
}

#[test]
fn effective_network_matches_per_image_solves() {
    let net = init_network(&Architecture::new(vec![60, 12, 4]).unwrap(), 21);
    let device = DeviceModel::continuous(1e-3, 10.48, 0.1);
    let mapping = NetworkMapping {
        device: device.clone(),
        p_l: 0.01,
        scope: WmaxScope::PerLayer,
        geometry: CrossbarGeometry::new(16, 16, 0.35, 0.32).unwrap(),
        tiling: TilingOptions {
            split_columns: true,
            leakage: 0.0,
        },
        first_layer_permutation: None,
    };
    let mut mapped = map_network(&net, &mapping).unwrap();
    let spec = DevicePopulationSpec {
        fraction_stuck_high: 0.05,
        fraction_stuck_low: 0.05,
        fraction_reduced_range: 0.2,
        sigma_prog: 0.05,
        ..Default::default()
    };
    for (l, layer) in mapped.layers.iter_mut().enumerate() {
        for (t, tile) in layer.tiles.iter_mut().enumerate() {
            *tile = program_tile(tile, &spec, &device, 5, &[0, 0, l as u64, t as u64]).unwrap();
        }
    }
    let eff = EffectiveNetwork::new(&mapped, SolverMode::Nodal).unwrap();
    for s in 0..5 {
        let x: Vec<f64> = (0..60).map(|i| ((i * 7 + s * 13) % 11) as f64 / 10.0).collect();
        let direct = network_inference(&mapped, &x, SolverMode::Nodal).unwrap();
        let fast = eff.infer(&x).unwrap();
        for (a, b) in direct.iter().zip(&fast) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

fn small_tile() -> impl Strategy<Value = (Matrix, Vec<f64>, f64, f64)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(prop_oneof![Just(0.0), 1e-5..1e-3f64], r * c),
            prop::collection::vec(0.0..0.2f64, r),
            0.01..5.0f64,
            0.01..5.0f64,
        )
            .prop_filter_map("needs a device", move |(g, v, rw, rb)| {
                g.iter()
                    .any(|&x| x > 0.0)
                    .then(|| (Matrix::from_vec(r, c, g).unwrap(), v, rw, rb))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn banded_solution_matches_dense_oracle((g, v, rw, rb) in small_tile()) {
        let t = tile_from(&g, rw, rb);
        let s = solve_tile_nodal(&t, &v).unwrap();
        let (wm, bm, out) = dense_oracle(&g, rw, rb, &v);
        let scale = v.iter().fold(0.0f64, |m, x| m.max(*x)).max(1e-300);
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                prop_assert!((s.word.get(i, j) - wm.get(i, j)).abs() <= 1e-8 * scale);
                prop_assert!((s.bit.get(i, j) - bm.get(i, j)).abs() <= 1e-8 * scale);
            }
        }
        for j in 0..g.cols() {
            prop_assert!((s.currents[j] - out[j]).abs() <= 1e-8 * out.iter().fold(1e-300f64, |m, x| m.max(*x)));
        }
    }

    #[test]
    fn source_and_sense_currents_balance((g, v, rw, rb) in small_tile()) {
        let t = tile_from(&g, rw, rb);
        let s = solve_tile_nodal(&t, &v).unwrap();
        let i_in: f64 = s.source_currents.iter().sum();
        let i_out: f64 = s.currents.iter().sum();
        prop_assert!((i_in - i_out).abs() <= 1e-9 * i_in.abs().max(1e-300));
    }

    #[test]
    fn doubling_voltages_doubles_currents((g, v, rw, rb) in small_tile()) {
        let t = tile_from(&g, rw, rb);
        let a = solve_tile_nodal(&t, &v).unwrap().currents;
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let b = solve_tile_nodal(&t, &v2).unwrap().currents;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((2.0 * x - y).abs() <= 1e-10 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn more_line_resistance_never_raises_currents((g, v, rw, rb) in small_tile(), lambda in 1.0..10.0f64) {
        let a = solve_tile_nodal(&tile_from(&g, rw, rb), &v).unwrap().currents;
        let b = solve_tile_nodal(&tile_from(&g, lambda * rw, lambda * rb), &v).unwrap().currents;
        let ideal = ideal_tile_currents(&tile_from(&g, 0.0, 0.0), &v).unwrap();
        for j in 0..a.len() {
            prop_assert!(b[j] <= a[j] * (1.0 + 1e-12) + 1e-300);
            prop_assert!(a[j] <= ideal[j] * (1.0 + 1e-12) + 1e-300);
        }
    }
}
