use bcsi::datagen::{
    color_bias_from_idx, generate_synthetic, generate_unbiased_test, load_dataset, save_dataset,
    BiasedDataset, GenConfig,
};
use bcsi::nn::{accuracy, init_mlp, train, Group, TrainConfig};
use bcsi::Error;
use proptest::prelude::*;

fn cfg(n_per_class: usize, num_classes: usize, r: f64, seed: u64) -> GenConfig {
    GenConfig {
        n_per_class,
        num_classes,
        d_signal: num_classes,
        d_bias: num_classes,
        conflict_ratio: r,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn conflict_ratio_is_calibrated_over_many_seeds() {
    // 100 seeds of 10^4 samples each.
    for r in [0.01, 0.05, 0.3] {
        let mean = (0..100)
            .map(|seed| generate_synthetic(&cfg(2000, 5, r, seed)).unwrap().conflicting_fraction())
            .sum::<f64>()
            / 100.0;
        assert!((mean - r).abs() <= 0.003, "r={r}: mean {mean}");
    }
}

#[test]
fn bias_is_easier_than_signal() {
    let ds = generate_synthetic(&GenConfig {
        conflict_ratio: 0.0,
        ..GenConfig::default()
    })
    .unwrap();
    let d_signal = GenConfig::default().d_signal;
    let one_epoch = |block: BiasedDataset| {
        let params = init_mlp(&[block.feature_dim, block.num_classes], 0).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (p, _) = train(params, &block, &cfg).unwrap();
        accuracy(&p, &block, Group::All).unwrap()
    };
    let signal = one_epoch(ds.project(0..d_signal));
    let bias = one_epoch(ds.project(d_signal..ds.feature_dim));
    assert!(bias > signal, "bias {bias} vs signal {signal}");
}

#[test]
fn test_split_does_not_replay_training_noise() {
    let c = GenConfig::default();
    let train = generate_synthetic(&c).unwrap();
    let test = generate_unbiased_test(&c, c.n_per_class).unwrap();
    let shared = train
        .samples
        .iter()
        .flat_map(|s| s.features.iter())
        .filter(|v| test.samples[0].features.contains(v))
        .count();
    assert_eq!(shared, 0);
}

#[test]
fn saved_file_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&cfg(20, 3, 0.2, 4)).unwrap();
    let a = dir.path().join("a.bfds");
    let b = dir.path().join("b.bfds");
    save_dataset(&ds, &a).unwrap();
    save_dataset(&load_dataset(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn idx_corrupt_magic_is_a_format_error() {
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 200];
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 1, 4];
    assert!(color_bias_from_idx(&images, &labels, 0.0, 0).is_ok());
    images[3] = 9;
    assert!(matches!(
        color_bias_from_idx(&images, &labels, 0.0, 0),
        Err(Error::Format(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_datasets_satisfy_invariants(
        n in 1usize..40,
        c in 2usize..6,
        r in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let g = cfg(n, c, r, seed);
        let ds = generate_synthetic(&g).unwrap();
        prop_assert_eq!(ds.len(), n * c);
        prop_assert_eq!(ds.feature_dim, 2 * c);
        let mut seen = vec![false; c];
        for s in &ds.samples {
            prop_assert_eq!(s.features.len(), 2 * c);
            prop_assert!(s.features.iter().all(|v| v.is_finite()));
            prop_assert!(s.label < c && s.bias_attr < c);
            prop_assert_eq!(s.is_conflicting(), s.bias_attr != s.label);
            seen[s.label] = true;
        }
        prop_assert!(seen.iter().all(|&x| x));
        if r == 0.0 {
            prop_assert_eq!(ds.conflicting_count(), 0);
        }
        prop_assert_eq!(&generate_synthetic(&g).unwrap(), &ds);
        prop_assert_eq!(&BiasedDataset::from_bytes(&ds.to_bytes()).unwrap(), &ds);
    }

    #[test]
    fn any_truncation_is_rejected(cut in 1usize..200) {
        let bytes = generate_synthetic(&cfg(5, 2, 0.5, 1)).unwrap().to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(BiasedDataset::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn invalid_ratios_are_rejected(r in prop_oneof![-10.0f64..-1e-9, 1.0f64 + 1e-9..10.0]) {
        prop_assert!(generate_synthetic(&cfg(5, 2, r, 0)).is_err());
    }
}
