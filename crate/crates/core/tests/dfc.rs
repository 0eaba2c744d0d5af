mod common;

use common::{assert_fc_invariants, exact_pearson};
use dfcformer::dfc::{
    build_dfc, build_features, node_strength, pearson_matrix, static_fc, window_count, BoldSeries, Label, WindowSpec,
};
use dfcformer::numerics::Tensor;
use dfcformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_series(seed: u64, t: usize, n: usize) -> BoldSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..t * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    BoldSeries::new("s", "s_1", Label::Nc, Tensor::from_vec(t, n, v).unwrap()).unwrap()
}

#[test]
fn window_count_examples() {
    let spec = WindowSpec::new(70, 2).unwrap();
    assert_eq!(window_count(140, spec).unwrap(), 36);
    assert_eq!(window_count(200, spec).unwrap(), 66);
    assert_eq!(window_count(70, spec).unwrap(), 1);
    assert!(window_count(69, spec).is_err());
}

#[test]
fn pearson_matches_exact_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let len = rng.random_range(3..40);
        let n = rng.random_range(2..6);
        let w = Tensor::from_vec(len, n, (0..len * n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let fc = pearson_matrix(&w).unwrap();
        assert_fc_invariants(&fc);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let exact = exact_pearson(&w.column(i), &w.column(j));
                    assert!((fc.get(i, j) - exact).abs() <= 1e-12, "({i},{j}) {} vs {exact}", fc.get(i, j));
                }
            }
        }
    }
}

#[test]
fn degenerate_column_reports_roi_and_window() {
    let mut s = random_series(3, 30, 4);
    for t in 10..22 {
        s.samples.set(t, 2, 0.25);
    }
    let spec = WindowSpec::new(10, 2).unwrap();
    match build_dfc(&s, spec) {
        Err(Error::DegenerateColumn { roi, window_start }) => {
            assert_eq!(roi, 2);
            assert_eq!(window_start, 10);
        }
        other => panic!("expected degenerate column, got {other:?}"),
    }
}

#[test]
fn features_are_transposes_with_expected_shapes() {
    let s = random_series(5, 140, 6);
    let dfc = build_dfc(&s, WindowSpec::default()).unwrap();
    assert_eq!(dfc.len(), 36);
    for (k, m) in dfc.matrices.iter().enumerate() {
        assert_fc_invariants(m);
        assert_eq!(dfc.window_starts[k], 2 * k);
    }
    let f = build_features(&dfc).unwrap();
    assert_eq!(f.temporal.shape(), (36, 6));
    assert_eq!(f.spatial, f.temporal.transpose());
    for (k, m) in dfc.matrices.iter().enumerate() {
        assert_eq!(f.temporal.row(k), node_strength(m).as_slice());
    }
}

#[test]
fn single_window_equals_static_fc() {
    let s = random_series(9, 50, 5);
    let dfc = build_dfc(&s, WindowSpec::new(50, 1).unwrap()).unwrap();
    assert_eq!(dfc.len(), 1);
    assert_eq!(dfc.matrices[0], static_fc(&s).unwrap());
}

#[test]
fn bold_series_validation() {
    assert!(BoldSeries::new("a", "b", Label::Mci, Tensor::zeros(10, 1)).is_err());
    let mut bad = Tensor::zeros(10, 3);
    bad.set(0, 0, f64::INFINITY);
    assert!(BoldSeries::new("a", "b", Label::Mci, bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_formula(l in 2usize..100, s_frac in 0.0f64..1.0, extra in 0usize..=500) {
        let s = 1 + ((l - 1) as f64 * s_frac) as usize;
        let spec = WindowSpec::new(l, s).unwrap();
        let total = l + extra;
        prop_assert_eq!(window_count(total, spec).unwrap(), (total - l) / s + 1);
    }

    #[test]
    fn every_dfc_matrix_is_a_valid_correlation_matrix(seed in any::<u64>(), n in 2usize..7, l in 3usize..20, s in 1usize..4) {
        let s = s.min(l);
        let series = random_series(seed, l + 15, n);
        let dfc = build_dfc(&series, WindowSpec::new(l, s).unwrap()).unwrap();
        for m in &dfc.matrices {
            assert_fc_invariants(m);
        }
        let strength = node_strength(&dfc.matrices[0]);
        prop_assert!(strength.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
