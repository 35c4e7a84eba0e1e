use bcsi::datagen::{generate_synthetic, generate_unbiased_test, GenConfig};
use bcsi::eval::{
    bias_ratio_sweep, compare_detectors, evaluate_model, histogram, precision_vs_epoch, CompareConfig,
    Mean, Report, ReportMeta,
};
use bcsi::influence::{DetectorConfig, InfluenceRecord, Method};
use bcsi::nn::init_mlp;
use bcsi::pipeline::{DataSource, PipelineSettings};
use proptest::prelude::*;

fn small_settings() -> PipelineSettings {
    let mut s = PipelineSettings::toy();
    s.data = DataSource::Synthetic {
        gen: GenConfig {
            n_per_class: 60,
            ..GenConfig::default()
        },
        test_per_class: 20,
    };
    s.hidden = vec![16];
    s.erm.epochs = 3;
    s.finetune.n_iter = 5;
    s
}

#[test]
fn single_epoch_curve_matches_detector_comparison() {
    let ds = generate_synthetic(&GenConfig {
        n_per_class: 60,
        ..GenConfig::default()
    })
    .unwrap();
    let dims = [10, 16, 5];
    let converged = DetectorConfig {
        epochs: 5,
        ..DetectorConfig::converged_ce()
    };
    let cfg = CompareConfig {
        bcsi: DetectorConfig::bcsi(),
        converged: converged.clone(),
        seeds: vec![1, 2],
    };
    let table = compare_detectors(&ds, &dims, &cfg).unwrap();
    let methods: Vec<&str> = table.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["loss", "grad_norm", "self_influence", "if_train", "bcsi"]);
    for row in &table {
        assert!((0.0..=1.0).contains(&row.precision.mean));
        assert!(row.precision.stderr >= 0.0);
    }
    let curve = precision_vs_epoch(&ds, &dims, &converged, &[5], &[1, 2]).unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].self_influence, table[2].precision);
    assert_eq!(curve[0].if_train, table[3].precision);

    let longer = precision_vs_epoch(&ds, &dims, &converged, &[1, 3, 5], &[1]).unwrap();
    assert_eq!(longer.len(), 3);
    assert!(precision_vs_epoch(&ds, &dims, &converged, &[], &[1]).is_err());
}

#[test]
fn sweep_has_one_row_per_ratio_and_report_has_all_sections() {
    let rows = bias_ratio_sweep(&[0.05, 0.2], &small_settings(), &[0, 1]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].conflict_ratio, 0.2);
    assert_eq!(rows[0].erm_acc.values.len(), 2);

    let g = GenConfig::default();
    let test = generate_unbiased_test(&g, 20).unwrap();
    let eval = evaluate_model(&init_mlp(&[10, 4, 5], 0).unwrap(), &test).unwrap();
    let mut report = Report {
        meta: ReportMeta {
            conflict_ratio: 0.05,
            num_classes: 5,
            train_size: 0,
            train_conflicting: 0,
            test_size: test.len(),
            seeds: vec![0, 1],
            settings: serde_json::to_value(small_settings()).unwrap(),
        },
        accuracies: Default::default(),
        groups: Default::default(),
        precision: Vec::new(),
        sweep: rows,
    };
    report.add_model("erm", &eval);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    for key in ["meta", "accuracies", "groups", "precision", "sweep"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let back: Report = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn histogram_conserves_counts(
        scores in prop::collection::vec(-1e3f64..1e3, 1..100),
        bins in 1usize..20,
    ) {
        let ds = generate_synthetic(&GenConfig { n_per_class: 20, conflict_ratio: 0.3, ..GenConfig::default() }).unwrap();
        let recs: Vec<InfluenceRecord> = scores.iter().enumerate().map(|(i, &score)| InfluenceRecord {
            sample_id: i as u64, score, method: Method::Loss, run_seed: 0, epoch_t: 0,
        }).collect();
        let h = histogram(&recs, &ds, bins).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|b| b.aligned + b.conflicting).sum::<usize>(), recs.len());
        let conflicting = recs.iter().filter(|r| ds.samples[r.sample_id as usize].is_conflicting()).count();
        prop_assert_eq!(h.iter().map(|b| b.conflicting).sum::<usize>(), conflicting);
    }

    #[test]
    fn worst_group_never_exceeds_overall(seed in any::<u64>()) {
        let test = generate_unbiased_test(&GenConfig { seed, ..GenConfig::default() }, 10).unwrap();
        let r = evaluate_model(&init_mlp(&[10, 8, 5], seed).unwrap(), &test).unwrap();
        prop_assert!(r.worst_group_acc <= r.unbiased_acc);
        for a in [Some(r.unbiased_acc), r.aligned_acc, r.conflicting_acc].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn standard_errors_are_nonnegative(v in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let m = Mean::of(v);
        prop_assert!(m.stderr >= 0.0);
        prop_assert!(m.mean >= 0.0 && m.mean <= 1.0 + 1e-12);
    }
}
