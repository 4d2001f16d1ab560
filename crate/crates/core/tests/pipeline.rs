use vladbuff_core::pipeline::{describe, evaluate_model, fit_model, with_burst, FitSettings};
use vladbuff_core::retrieval::synthetic::{synthesize, BurstBenchParams};
use vladbuff_core::{load_bundle, save_bundle, BurstParams, LocalFeatureSet};

fn small_bench() -> vladbuff_core::retrieval::synthetic::BurstBenchmark {
    let params = BurstBenchParams {
        n_places: 16,
        n_distractors: 8,
        ..BurstBenchParams::default()
    };
    synthesize(7, &params).unwrap()
}

fn settings() -> FitSettings {
    FitSettings {
        clusters: 8,
        sample_count: 2000,
        seed: 3,
        prepool_dim: Some(16),
        ..FitSettings::default()
    }
}

#[test]
fn fitting_is_deterministic() {
    let bench = small_bench();
    let sets: Vec<LocalFeatureSet> = bench.sets_for(&bench.train).cloned().collect();
    let a = fit_model(&sets, &settings()).unwrap();
    let b = fit_model(&sets, &settings()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.config_hash, b.config_hash);
    let other = fit_model(&sets, &FitSettings { seed: 4, ..settings() }).unwrap();
    assert_ne!(a.config_hash, other.config_hash);
}

#[test]
fn bundle_round_trip_preserves_descriptors_and_recall() {
    let bench = small_bench();
    let sets: Vec<LocalFeatureSet> = bench.sets_for(&bench.train).cloned().collect();
    let model = fit_model(&sets, &settings()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bundle(&model, dir.path()).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded, model);

    let before = describe(&model, bench.sets_for(&bench.test)).unwrap();
    let after = describe(&loaded, bench.sets_for(&bench.test)).unwrap();
    assert_eq!(before, after);
    assert!(before.values().all(|d| d.vector.len() == model.output_len()));

    let ks = [1, 5, 10];
    let r = evaluate_model(&loaded, &bench.test, &bench.features, &ks).unwrap();
    let values: Vec<f64> = r.recall_at.values().copied().collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn burst_weighting_helps_on_synthetic_bursts() {
    let bench = small_bench();
    let sets: Vec<LocalFeatureSet> = bench.sets_for(&bench.train).cloned().collect();
    let buff = fit_model(&sets, &FitSettings { prepool_dim: None, ..settings() }).unwrap();
    let vanilla = with_burst(&buff, BurstParams::disabled()).unwrap();
    let ks = [1];
    let rb = evaluate_model(&buff, &bench.test, &bench.features, &ks).unwrap().recall_at[&1];
    let rv = evaluate_model(&vanilla, &bench.test, &bench.features, &ks).unwrap().recall_at[&1];
    assert!(rb >= rv, "burst-aware R@1 {rb} below vanilla {rv}");
}
