use proptest::prelude::*;
use xbarcm::mapping::{tile_layer, CrossbarGeometry, DeviceModel, DeviceStates};
use xbarcm::nonideal::{
    apply_rtn, program, program_tile, sample_population, CellCategory, DevicePopulationSpec, DeviceProfile, RtnLevel,
    RtnModel, RtnSign, RTN_FLOOR,
};
use xbarcm::rng;
use xbarcm::Matrix;

fn hfo2() -> DeviceModel {
    DeviceModel::continuous(1e-3, 10.48, 0.1)
}

fn single_level(p: f64, mu: f64, sign: RtnSign) -> RtnModel {
    RtnModel {
        levels: vec![RtnLevel {
            resistance: 1e4,
            probability: p,
            mu,
            sigma: 1.0,
        }],
        sign,
    }
}

#[test]
fn rtn_occurrence_and_magnitude_match_the_model() {
    let (p, mu) = (0.4, (0.1f64).ln());
    let model = single_level(p, mu, RtnSign::Symmetric);
    let g = 1e-4;
    let n = 1_000_000;
    let mut r = rng::stream(7, &[1]);
    let mut hits = 0usize;
    let mut mags = Vec::new();
    let mut ups = 0usize;
    for _ in 0..n {
        let d = model.disturb(g, &mut r).unwrap();
        if d != g {
            hits += 1;
            mags.push((d / g - 1.0).abs());
            ups += usize::from(d > g);
        }
    }
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits as f64 - n as f64 * p).abs() <= 3.0 * sd, "{hits} occurrences");
    mags.sort_by(f64::total_cmp);
    let median = mags[mags.len() / 2];
    assert!((median / mu.exp() - 1.0).abs() <= 0.05, "median |δ| = {median}");
    let half_sd = (hits as f64 * 0.25).sqrt();
    assert!((ups as f64 - hits as f64 / 2.0).abs() <= 3.0 * half_sd);
}

#[test]
fn negative_rtn_only_lowers_and_respects_floor() {
    let model = single_level(1.0, 1.5, RtnSign::NegativeOnly);
    let mut r = rng::stream(3, &[]);
    for _ in 0..10_000 {
        let d = model.disturb(1e-4, &mut r).unwrap();
        assert!(d < 1e-4 && d >= RTN_FLOOR * 1e-4 * (1.0 - 1e-12));
    }
    assert_eq!(model.disturb(0.0, &mut r).unwrap(), 0.0);
}

#[test]
fn population_categories_are_binomial() {
    let spec = DevicePopulationSpec {
        fraction_stuck_high: 0.02,
        fraction_stuck_low: 0.02,
        fraction_reduced_range: 0.1,
        ..Default::default()
    };
    let dev = hfo2();
    let pop = sample_population(250, 400, &spec, &dev, &mut rng::stream(11, &[])).unwrap();
    let n = 100_000.0f64;
    for (cat, f) in [
        (CellCategory::StuckHigh, 0.02f64),
        (CellCategory::StuckLow, 0.02),
        (CellCategory::ReducedRange, 0.1),
        (CellCategory::Normal, 0.86),
    ] {
        let c = pop.count(cat) as f64;
        let sd = (n * f * (1.0 - f)).sqrt();
        assert!((c - n * f).abs() <= 3.0 * sd, "{cat:?}: {c}");
    }
    let decile = 0.1 * (dev.g_on - dev.g_off());
    for (cat, &(lo, hi)) in pop.categories.iter().zip(&pop.ranges) {
        match cat {
            CellCategory::StuckHigh => assert!(lo == hi && lo >= dev.g_on - decile),
            CellCategory::StuckLow => assert!(lo == hi && lo <= dev.g_off() + decile),
            CellCategory::ReducedRange => assert!(lo == dev.g_off() && hi >= 0.6 * dev.g_on),
            CellCategory::Normal => assert_eq!((lo, hi), (dev.g_off(), dev.g_on)),
        }
    }
}

fn sample_tile() -> xbarcm::mapping::ConductanceTile {
    let pos = Matrix::from_fn(30, 10, |i, k| if (i + k) % 3 == 0 { 0.0 } else { 1e-4 * (1 + (i * k) % 10) as f64 });
    let neg = Matrix::from_fn(30, 10, |i, k| if (i + k) % 3 == 1 { 0.0 } else { 1e-4 * (1 + (i + k) % 10) as f64 });
    let geo = CrossbarGeometry::new(32, 32, 0.35, 0.32).unwrap();
    tile_layer(&pos, &neg, &geo, None).unwrap().remove(0)
}

#[test]
fn programming_is_deterministic_per_path() {
    let spec = DevicePopulationSpec {
        fraction_stuck_high: 0.05,
        fraction_stuck_low: 0.05,
        fraction_reduced_range: 0.2,
        sigma_prog: 0.05,
        ..Default::default()
    };
    let t = sample_tile();
    let a = program_tile(&t, &spec, &hfo2(), 99, &[0, 1, 0, 0]).unwrap();
    let b = program_tile(&t, &spec, &hfo2(), 99, &[0, 1, 0, 0]).unwrap();
    let c = program_tile(&t, &spec, &hfo2(), 99, &[0, 2, 0, 0]).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.g, c.g);
    // Unelectroformed cells stay at zero.
    for (x, y) in t.g.as_slice().iter().zip(a.g.as_slice()) {
        assert_eq!(*x == 0.0, *y == 0.0);
    }
}

#[test]
fn rtn_on_tiles_is_deterministic() {
    let profile = DeviceProfile::resolve("ta2o5-default").unwrap();
    let model = profile.device.rtn.clone().unwrap();
    let t = sample_tile();
    let a = apply_rtn(&t, &model, &mut rng::stream(5, &[1])).unwrap();
    let b = apply_rtn(&t, &model, &mut rng::stream(5, &[1])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, t);
}

#[test]
fn bundled_profiles_match_device_data() {
    let hf = DeviceProfile::resolve("hfo2-default").unwrap();
    assert_eq!(hf.device.hrs_lrs_ratio, 10.48);
    assert_eq!(hf.device.v_read, 0.1);
    assert!(hf.population.is_some());

    let ta = DeviceProfile::resolve("ta2o5-default").unwrap();
    let DeviceStates::Discrete(states) = &ta.device.states else { panic!("discrete") };
    assert_eq!(states.len(), 8);
    assert!((ta.device.hrs_lrs_ratio - 8.0).abs() < 1e-12);

    let av = DeviceProfile::resolve("avmco-default").unwrap();
    assert!((av.device.hrs_lrs_ratio - 7.5).abs() < 1e-12);
    assert_eq!(av.device.v_read, 3.0);

    for p in [&ta, &av] {
        let levels = &p.device.rtn.as_ref().unwrap().levels;
        assert_eq!(levels.len(), 8);
        assert!(levels.windows(2).all(|w| w[0].probability <= w[1].probability));
    }
    assert!(DeviceProfile::resolve("no-such-device").is_err());
}

proptest! {
    #[test]
    fn population_ranges_stay_within_device_bounds(
        fh in 0.0..0.3f64, fl in 0.0..0.3f64, fr in 0.0..0.3f64, alpha in 0.0..=1.0f64, seed in any::<u64>(),
    ) {
        let spec = DevicePopulationSpec {
            fraction_stuck_high: fh,
            fraction_stuck_low: fl,
            fraction_reduced_range: fr,
            reduced_range_alpha: alpha,
            sigma_prog: 0.0,
        };
        let dev = hfo2();
        let pop = sample_population(16, 16, &spec, &dev, &mut rng::stream(seed, &[])).unwrap();
        for &(lo, hi) in &pop.ranges {
            prop_assert!(dev.g_off() <= lo && lo <= hi && hi <= dev.g_on);
        }
    }

    #[test]
    fn programming_is_idempotent(
        target in 1e-4..1e-3f64, lo in 1e-4..1e-3f64, span in 0.0..5e-4f64, seed in any::<u64>(),
    ) {
        let range = (lo, (lo + span).min(1e-3));
        let mut r = rng::stream(seed, &[]);
        let once = program(target, range, 0.0, &mut r);
        prop_assert!(once >= range.0 && once <= range.1);
        prop_assert_eq!(program(once, range, 0.0, &mut r), once);
        let noisy = program(target, range, 0.1, &mut r);
        prop_assert!(noisy >= range.0 && noisy <= range.1);
    }
}
