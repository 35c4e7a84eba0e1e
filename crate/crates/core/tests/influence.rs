use bcsi::datagen::{generate_synthetic, BiasedDataset, GenConfig, Sample, Split};
use bcsi::influence::{
    assemble_hessian, bcsi_scores, cross_influence, gradnorm_scores, loss_scores,
    read_scores_csv, score_model, self_influence, write_scores_csv, Damping, DetectorConfig,
    LastLayerHessian, Method,
};
use bcsi::nn::{init_mlp, last_layer_grad, Layer, LossKind, MlpParams};
use ndarray::array;
use proptest::prelude::*;

fn dataset(rows: Vec<(Vec<f64>, usize)>, classes: usize) -> BiasedDataset {
    let d = rows[0].0.len();
    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (features, label))| Sample {
            id: i as u64,
            features,
            label,
            bias_attr: label,
        })
        .collect();
    BiasedDataset::new(samples, classes, 0.0, Split::Train, d).unwrap()
}

fn linear(weight: ndarray::Array2<f64>, bias: ndarray::Array1<f64>) -> MlpParams {
    MlpParams::new(vec![Layer { weight, bias }]).unwrap()
}

#[test]
fn loss_and_gradnorm_zero_cases() {
    // Huge margin: probability of the label rounds to exactly 1.
    let confident = linear(array![[1000.0], [-1000.0]], array![0.0, 0.0]);
    let ds = dataset(vec![(vec![1.0], 0)], 2);
    assert_eq!(loss_scores(&confident, &ds).unwrap()[0].score, 0.0);
    assert_eq!(gradnorm_scores(&confident, &ds).unwrap()[0].score, 0.0);

    let flat = linear(array![[0.0], [0.0]], array![0.0, 0.0]);
    let s = loss_scores(&flat, &ds).unwrap()[0].score;
    assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn gradnorm_ranking_matches_recomputation() {
    let ds = generate_synthetic(&GenConfig {
        n_per_class: 30,
        ..GenConfig::default()
    })
    .unwrap();
    let params = init_mlp(&[10, 8, 5], 4).unwrap();
    let recs = gradnorm_scores(&params, &ds).unwrap();
    let mut by_lib: Vec<u64> = recs.iter().map(|r| r.sample_id).collect();
    by_lib.sort_by(|&a, &b| recs[b as usize].score.total_cmp(&recs[a as usize].score).then(a.cmp(&b)));

    let norms: Vec<f64> = ds
        .samples
        .iter()
        .map(|s| {
            let g = last_layer_grad(&params, s, LossKind::CrossEntropy).unwrap();
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let mut by_hand: Vec<u64> = (0..ds.len() as u64).collect();
    by_hand.sort_by(|&a, &b| norms[b as usize].total_cmp(&norms[a as usize]).then(a.cmp(&b)));
    assert_eq!(by_lib, by_hand);
}

#[test]
fn identity_hessian_gives_squared_gradient_norm() {
    let ds = dataset(vec![(vec![0.3, -0.7], 1), (vec![1.0, 0.2], 0)], 2);
    let params = init_mlp(&[2, 3, 2], 5).unwrap();
    let h = LastLayerHessian::scaled_identity(params.last_layer_size(), 1.0);
    let f = h.factor().unwrap();
    for s in &ds.samples {
        let g = last_layer_grad(&params, s, LossKind::CrossEntropy).unwrap();
        let norm2: f64 = g.iter().map(|v| v * v).sum();
        let si = self_influence(&params, &f, s, LossKind::CrossEntropy).unwrap();
        assert!((si - norm2).abs() <= 1e-14 * norm2.max(1.0));
    }
}

#[test]
fn bcsi_is_deterministic_and_total() {
    let ds = generate_synthetic(&GenConfig {
        n_per_class: 40,
        ..GenConfig::default()
    })
    .unwrap();
    let cfg = DetectorConfig::bcsi().with_seed(3);
    let a = bcsi_scores(&ds, &[10, 16, 5], &cfg).unwrap();
    let b = bcsi_scores(&ds, &[10, 16, 5], &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), ds.len());
    assert!(a.iter().all(|r| r.method == Method::Bcsi && r.epoch_t == 5 && r.run_seed == 3));

    let mut csv = Vec::new();
    write_scores_csv(&mut csv, &a).unwrap();
    assert_eq!(read_scores_csv(&csv[..]).unwrap(), a);
}

fn random_instance(seed: u64, n: usize, h: usize, c: usize) -> (MlpParams, BiasedDataset) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|_| {
            (
                (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                rng.random_range(0..c),
            )
        })
        .collect();
    (init_mlp(&[3, h, c], seed).unwrap(), dataset(rows, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_influence_nonnegative_and_cross_symmetric(
        seed in any::<u64>(),
        n in 1usize..12,
        h in 1usize..6,
        c in 2usize..4,
        damp in 1e-6f64..1.0,
    ) {
        let (params, ds) = random_instance(seed, n, h, c);
        let hess = assemble_hessian(&params, &ds, LossKind::CrossEntropy, Damping::Absolute(damp)).unwrap();
        let f = hess.factor().unwrap();
        for a in &ds.samples {
            prop_assert!(self_influence(&params, &f, a, LossKind::CrossEntropy).unwrap() >= -1e-12);
            for b in &ds.samples {
                let ab = cross_influence(&params, &f, a, b, LossKind::CrossEntropy).unwrap();
                let ba = cross_influence(&params, &f, b, a, LossKind::CrossEntropy).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scores_stay_finite_when_damping_grows(seed in any::<u64>(), n in 2usize..12) {
        let (params, ds) = random_instance(seed, n, 4, 3);
        for d in [1e-3, 1e-2, 1e-1] {
            let s = score_model(&params, &ds, Damping::RelativeTrace(d)).unwrap();
            prop_assert!(s.self_influence.iter().all(|v| v.is_finite() && *v >= -1e-12));
            prop_assert!(s.if_train.iter().all(|v| v.is_finite()));
        }
    }
}
