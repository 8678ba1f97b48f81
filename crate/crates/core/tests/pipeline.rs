use cfran_isac::classifier::{self, DatasetConfig, Hyperparams, ModelKind, NoiseConfig};
use cfran_isac::harness::{self, CampaignConfig, ClassifierMode, GridPoint, SensingMode};
use cfran_isac::scenario;

fn small(trials: usize) -> CampaignConfig {
    CampaignConfig {
        trials,
        sigma_range: vec![0.1, 1.0],
        classifier: ClassifierMode::Synthetic { accuracies: vec![0.98, 0.9] },
        ..CampaignConfig::default()
    }
}

fn as_json(report: &harness::CampaignReport) -> String {
    serde_json::to_string(report).unwrap()
}

#[test]
fn campaign_is_reproducible_and_seed_sensitive() {
    let a = harness::run_campaign(&small(6)).unwrap();
    let b = harness::run_campaign(&small(6)).unwrap();
    assert_eq!(as_json(&a), as_json(&b));
    let c = harness::run_campaign(&CampaignConfig { seed: 2, ..small(6) }).unwrap();
    assert_ne!(as_json(&a), as_json(&c));
}

#[test]
fn campaign_points_agree_with_single_trials() {
    let config = small(4);
    let report = harness::run_campaign(&config).unwrap();
    for summary in &report.points {
        for (t, r) in summary.results.iter().enumerate() {
            let mut single = harness::run_trial(&config, summary.point, t).unwrap();
            single.elapsed = r.elapsed;
            assert_eq!(&single, r);
        }
    }
}

#[test]
fn larger_parameter_error_gives_larger_perception_error() {
    let config = CampaignConfig { sigma_range: vec![0.05, 2.0], ..small(30) };
    let report = harness::run_campaign(&config).unwrap();
    let fine = report.point(0.05, Some(0.98), SensingMode::MultiRru).unwrap().mean_error.unwrap();
    let coarse = report.point(2.0, Some(0.98), SensingMode::MultiRru).unwrap().mean_error.unwrap();
    assert!(fine < coarse, "{fine} vs {coarse}");
}

#[test]
fn heavy_misclassification_degrades_without_failing() {
    let config = CampaignConfig {
        classifier: ClassifierMode::Synthetic { accuracies: vec![0.2] },
        sigma_range: vec![0.5],
        ..small(20)
    };
    let report = harness::run_campaign(&config).unwrap();
    let p = &report.points[0];
    assert!(p.realized_accuracy.unwrap() < 0.5);
    assert!(p.results.iter().all(|r| r.errors.iter().all(|e| e.1.is_finite())));
    assert!(p.los_rejected + p.outliers_rejected > 0);
}

#[test]
fn comparison_covers_both_modes_on_the_same_trials() {
    let report = harness::run_comparison(&small(5)).unwrap();
    for s in [0.1, 1.0] {
        for a in [0.98, 0.9] {
            let multi = report.point(s, Some(a), SensingMode::MultiRru).unwrap();
            let single = report.point(s, Some(a), SensingMode::SingleDownlink).unwrap();
            let seeds = |p: &harness::PointSummary| p.results.iter().map(|r| r.seed).collect::<Vec<_>>();
            assert_eq!(seeds(multi), seeds(single));
            assert!(single.results.iter().all(|r| r.classified == 0));
        }
    }
    assert_eq!(harness::median_ratios(&report).len(), 4);
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let report = harness::run_comparison(&small(3)).unwrap();
    harness::write_report(dir.path(), &report).unwrap();
    let back = harness::read_report(dir.path()).unwrap();
    assert_eq!(as_json(&report), as_json(&back));
    for f in ["summary.csv", "cdf.csv", "errors.csv", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = harness::format_report(&back);
    assert!(text.contains("single-downlink") && text.contains("ratio"));
}

#[test]
fn trained_classifier_drives_a_campaign() {
    let config = small(3);
    let scene = scenario::generate_scenario(&config.scenario, 1).unwrap();
    let dataset_config = DatasetConfig {
        n_samples_per_rru: 60,
        n_symbols: config.n_symbols,
        noise: NoiseConfig { snr_db: 10.0 },
        ..DatasetConfig::default()
    };
    let dataset = classifier::build_dataset(&scene, &dataset_config, 1).unwrap();
    let library = classifier::dataset_library(&scene, &dataset_config, 1).unwrap();
    let model = classifier::train(&dataset, ModelKind::NearestCentroid, &Hyperparams::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (model_path, lib_path) = (dir.path().join("model.json"), dir.path().join("fingerprints.json"));
    std::fs::write(&model_path, model.to_json().unwrap()).unwrap();
    std::fs::write(&lib_path, library.to_json().unwrap()).unwrap();

    let trained = CampaignConfig {
        sigma_range: vec![0.5],
        classifier: ClassifierMode::Trained { model: model_path, fingerprints: lib_path },
        ..config
    };
    let report = harness::run_campaign(&trained).unwrap();
    assert_eq!(report.points.len(), 1);
    let p = &report.points[0];
    assert_eq!(p.point, GridPoint { sigma_range: 0.5, accuracy: None, mode: SensingMode::MultiRru });
    let acc = p.realized_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(p.results.iter().all(|r| r.classified > 0));
}

#[test]
fn missing_model_file_is_an_error() {
    let config = CampaignConfig {
        classifier: ClassifierMode::Trained { model: "/nonexistent/model.json".into(), fingerprints: "/nonexistent/f.json".into() },
        ..small(1)
    };
    assert!(harness::run_campaign(&config).is_err());
}
