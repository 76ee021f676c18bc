//! Properties of masks, imputation, the synthetic generator and the
//! dataset directory format.

mod common;

use common::*;
use comp_core::data::{
    max_missing_rate, make_missing_mask, make_missing_mask_capped, read_dataset, synthesize, write_dataset,
    zero_impute, LabelSet, ModalityBatch, ModalitySynth, SyntheticSpec, Task,
};
use comp_core::{CompError, Modality};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn masks_hit_the_count_and_keep_a_modality(n in 1usize..60, m in 1usize..5, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let mr = frac * max_missing_rate(m);
        let mask = make_missing_mask(n, m, mr, seed).unwrap();
        let expected = ((mr * (n * m) as f64).round() as usize).min((m - 1) * n);
        prop_assert_eq!(mask.missing_count(), expected);
        for row in mask.observed().rows() {
            prop_assert!(row.iter().any(|&o| o));
        }
        prop_assert_eq!(make_missing_mask(n, m, mr, seed).unwrap(), mask);
    }

    #[test]
    fn rates_above_the_bound_are_rejected(n in 1usize..30, m in 1usize..5, extra in 1e-6f64..0.5) {
        let mr = max_missing_rate(m) + extra;
        let is_infeasible = matches!(
            make_missing_mask(n, m, mr, 0),
            Err(CompError::InfeasibleMissingRate { .. })
        );
        prop_assert!(is_infeasible);
        if mr < 1.0 {
            let capped = make_missing_mask_capped(n, m, mr, 0).unwrap();
            prop_assert_eq!(capped.missing_count(), (m - 1) * n);
        }
    }

    #[test]
    fn zero_impute_is_idempotent(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 12)) {
        let mut r = rng(seed);
        let features = random_mat(&mut r, rows, cols);
        let observed = bits[..rows].to_vec();
        let batch = ModalityBatch::new(Modality::Text, features.clone(), observed.clone()).unwrap();
        let once = zero_impute(&batch);
        prop_assert_eq!(&zero_impute(&once), &once);
        for i in 0..rows {
            for j in 0..cols {
                let want = if observed[i] { features[[i, j]] } else { 0.0 };
                prop_assert_eq!(once.imputed[[i, j]], want);
            }
        }
        prop_assert_eq!(&once.features, &features);
    }
}

#[test]
fn complete_mask_at_zero_rate() {
    let mask = make_missing_mask(25, 3, 0.0, 4).unwrap();
    assert_eq!(mask.missing_count(), 0);
}

#[test]
fn empirical_snr_tracks_the_request() {
    let spec = SyntheticSpec {
        n_samples: 4000,
        ..SyntheticSpec::default()
    };
    let s = synthesize(&spec).unwrap();
    for (u, m) in spec.modalities.iter().enumerate() {
        let signal = &s.signals[u];
        let noise = &s.dataset.modalities[u].features - signal;
        let var = |x: &comp_core::params::Mat| comp_core::data::mean_column_variance(x);
        let ratio = var(signal) / var(&noise);
        assert!((ratio / m.snr - 1.0).abs() < 0.1, "{}: {ratio} vs {}", m.modality, m.snr);
    }
}

fn class_labels(labels: &LabelSet) -> Vec<usize> {
    match labels {
        LabelSet::Classification { y, .. } => y.clone(),
        LabelSet::Regression { .. } => unreachable!("classification spec"),
    }
}

#[test]
fn linear_probe_follows_snr_order() {
    let spec = SyntheticSpec {
        n_samples: 300,
        ..SyntheticSpec::default()
    };
    let ds = synthesize(&spec).unwrap().dataset;
    let y = class_labels(&ds.labels);
    let acc: Vec<f64> = ds
        .modalities
        .iter()
        .map(|b| linear_probe_accuracy(&b.features, &y, 2))
        .collect();
    assert!(acc[0] > acc[1] && acc[1] > acc[2], "probe accuracies {acc:?}");
}

#[test]
fn noiseless_features_are_linearly_separable_at_high_separation() {
    let spec = SyntheticSpec {
        n_samples: 200,
        num_classes: 3,
        latent_dim: 3,
        class_sep: 40.0,
        modalities: vec![ModalitySynth {
            modality: Modality::Audio,
            feature_dim: 6,
            snr: f64::INFINITY,
        }],
        ..SyntheticSpec::default()
    };
    let ds = synthesize(&spec).unwrap().dataset;
    let y = class_labels(&ds.labels);
    assert_eq!(linear_probe_accuracy(&ds.modalities[0].features, &y, 3), 1.0);
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec {
            num_classes: 9,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            n_samples: 0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            modalities: vec![ModalitySynth {
                modality: Modality::Text,
                feature_dim: 3,
                snr: 0.0,
            }],
            ..SyntheticSpec::default()
        },
    ];
    for spec in bad {
        assert!(matches!(synthesize(&spec), Err(CompError::Validation(_))));
    }
}

#[test]
fn dataset_directory_round_trip() {
    for task in [Task::Classification, Task::Regression] {
        let spec = SyntheticSpec {
            n_samples: 40,
            task,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let ds = synthesize(&spec).unwrap().dataset;
        let mask = make_missing_mask(40, 3, 0.4, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds, Some(&mask)).unwrap();
        let (back, back_mask) = read_dataset(dir.path()).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.modalities, ds.modalities);
        assert_eq!(back_mask.unwrap().observed(), mask.observed());
    }
}
