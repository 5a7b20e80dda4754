use dsse::bench::*;
use dsse::dataset::{NoiseMode, ProfileLibrary};
use dsse::estimator::EstimatorConfig;
use dsse::fixtures;
use dsse::measurement::build_ieee37_measurement_set;
use dsse::nn::NnModel;

fn small_report(seed: u64) -> BenchReport {
    let model = fixtures::ieee37();
    let set = build_ieee37_measurement_set(&model).unwrap();
    let cases = evaluation_set(&model, &set, &ProfileLibrary::synthetic(), 6, NoiseMode::PaperNoise, seed).unwrap();
    let nn = NnModel::init(set.len(), 4, 2 * model.num_nodes(), 1);
    let cfg = BenchConfig {
        estimator: EstimatorConfig {
            max_iter: 8,
            ..EstimatorConfig::undamped()
        },
        ..BenchConfig::default()
    };
    run_bench(&model, &set, &cases, Some(&nn), &cfg).unwrap()
}

#[test]
fn report_aggregates_are_recomputable_from_records() {
    let rep = small_report(3);
    assert_eq!(rep.records.len(), 6 * 3);
    assert_eq!(summarize(&rep.records, &Method::ALL), rep.methods);
    let back: BenchReport = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(back.methods, rep.methods);
    assert_eq!(back.records, rep.records);
    assert!(rep.histogram.is_some());
}

#[test]
fn same_seed_same_report() {
    assert_eq!(small_report(9).to_json(), small_report(9).to_json());
}

#[test]
fn nn_method_needs_model() {
    let model = fixtures::ieee37();
    let set = build_ieee37_measurement_set(&model).unwrap();
    let cases = evaluation_set(&model, &set, &ProfileLibrary::synthetic(), 1, NoiseMode::Noiseless, 0).unwrap();
    let err = run_bench(&model, &set, &cases, None, &BenchConfig::default()).unwrap_err();
    assert!(matches!(err, BenchError::MissingModel));
    let wrong = NnModel::init(5, 2, 2 * model.num_nodes(), 0);
    let err = run_bench(&model, &set, &cases, Some(&wrong), &BenchConfig::default()).unwrap_err();
    assert!(matches!(err, BenchError::ModelShape { model: 5, .. }));
}
