use dfcformer::dfc::{pearson_matrix, static_fc, Label, WindowSpec};
use dfcformer::numerics::Tensor;
use dfcformer::synthcohort::{
    correlated_noise, dynamics_score, generate_cohort, generate_scan, oracle_accuracy, SynthConfig,
};
use dfcformer::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[test]
fn identity_template_is_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = correlated_noise(&Tensor::identity(4), 2000, &mut rng).unwrap();
    let fc = pearson_matrix(&x).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert!(fc.get(i, j).abs() < 0.1);
            }
        }
    }
}

#[test]
fn template_correlation_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::from_rows(&[[1.0, 0.9], [0.9, 1.0]]).unwrap();
    let x = correlated_noise(&t, 2000, &mut rng).unwrap();
    let r = pearson_matrix(&x).unwrap().get(0, 1);
    assert!((0.85..=0.95).contains(&r), "{r}");
    let again = correlated_noise(&t, 2000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(x, again);
}

#[test]
fn non_pd_template_is_a_factorization_error() {
    let t = Tensor::from_rows(&[[1.0, 1.2], [1.2, 1.0]]).unwrap();
    let err = correlated_noise(&t, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Factorization(_)));
}

#[test]
fn dwell_spanning_the_scan_stays_in_one_state() {
    let cfg = SynthConfig { n_timepoints: 2000, dwell_mean_nc: [1e9, 1e9], noise_std: 0.05, ..SynthConfig::default() };
    let (bold, log) = generate_scan(Label::Nc, "s", "s_1", &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(log.segments.len(), 1);
    let state = log.segments[0].state;
    let fc = static_fc(&bold).unwrap();
    let template = &cfg.templates()[state];
    // Observation noise shrinks correlations by 1/(1 + σ²).
    let shrink = 1.0 / (1.0 + cfg.noise_std * cfg.noise_std);
    for i in 0..cfg.n_rois {
        for j in 0..cfg.n_rois {
            if i != j {
                assert!((fc.get(i, j) - shrink * template.get(i, j)).abs() < 0.08, "({i},{j})");
            }
        }
    }
}

/// Across-window node-strength variance predicted from the generation log:
/// the variance over windows of the fraction of each window spent in state 0.
fn occupancy_variance(segments: &[dfcformer::synthcohort::StateSegment], total: usize, spec: WindowSpec) -> f64 {
    let mut state = vec![0usize; total];
    for s in segments {
        state[s.start..s.start + s.len].fill(s.state);
    }
    let fracs: Vec<f64> = (0..=(total - spec.length) / spec.stride)
        .map(|w| {
            let start = w * spec.stride;
            state[start..start + spec.length].iter().filter(|&&s| s == 0).count() as f64 / spec.length as f64
        })
        .collect();
    let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
    fracs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fracs.len() as f64
}

#[test]
fn switching_rate_controls_node_strength_variability() {
    let cfg = SynthConfig::default();
    let spec = WindowSpec::default();
    let data = generate_cohort(&cfg).unwrap();
    let mut by_group = [Vec::new(), Vec::new()];
    let mut predicted = [Vec::new(), Vec::new()];
    for (s, log) in data.series.iter().zip(&data.log) {
        by_group[s.label as usize].push(dynamics_score(s, spec).unwrap());
        predicted[s.label as usize].push(occupancy_variance(&log.segments, cfg.n_timepoints, spec));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let slow = Label::Nc as usize;
    let fast = Label::Mci as usize;
    // With windows much longer than the fast dwell time, fast switching
    // averages out inside every window, so slow switching varies more.
    assert!(mean(&predicted[slow]) > 5.0 * mean(&predicted[fast]));
    assert!(mean(&by_group[slow]) > mean(&by_group[fast]));
}

#[test]
fn cohort_bookkeeping_and_determinism() {
    let cfg = SynthConfig { scans_per_subject: 2, ..SynthConfig::default() };
    let data = generate_cohort(&cfg).unwrap();
    assert_eq!(data.series.len(), 120);
    assert_eq!(data.log.len(), 120);
    assert_eq!(data.series.iter().filter(|s| s.label == Label::Mci).count(), 60);
    let subjects: BTreeSet<&str> = data.series.iter().map(|s| s.subject_id.as_str()).collect();
    assert_eq!(subjects.len(), 60);
    for s in &data.series {
        let twin = data.series.iter().find(|o| o.subject_id == s.subject_id && o.scan_id != s.scan_id).unwrap();
        assert_eq!(twin.label, s.label);
        assert_eq!(s.samples.shape(), (200, 12));
    }
    for (s, log) in data.series.iter().zip(&data.log) {
        assert_eq!(s.scan_id, log.scan_id);
        assert_eq!(log.segments.iter().map(|g| g.len).sum::<usize>(), 200);
    }
    assert_eq!(generate_cohort(&cfg).unwrap(), data);
    assert_ne!(generate_cohort(&SynthConfig { seed: 1, ..cfg }).unwrap().series, data.series);
}

#[test]
fn dynamics_oracle_separates_default_cohort() {
    let cfg = SynthConfig::default();
    let data = generate_cohort(&cfg).unwrap();
    let acc = oracle_accuracy(&data, &cfg, WindowSpec::default()).unwrap();
    assert!(acc > 0.70, "oracle accuracy {acc}");
}

#[test]
fn invalid_configs_are_rejected() {
    let base = SynthConfig::default();
    for bad in [
        SynthConfig { noise_std: 0.0, ..base.clone() },
        SynthConfig { dwell_mean_mci: [1.0, 4.0], ..base.clone() },
        SynthConfig { n_rois: 1, ..base.clone() },
        SynthConfig { strong_correlation: 1.5, ..base.clone() },
    ] {
        assert!(matches!(generate_cohort(&bad), Err(Error::Config(_))));
    }
}
