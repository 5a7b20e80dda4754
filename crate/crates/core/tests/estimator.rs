use dsse::estimator::*;
use dsse::fixtures;
use dsse::measurement::*;
use dsse::powerflow::{solve_power_flow, InjectionScenario};
use dsse::StateVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn truth(mult: f64) -> (dsse::FeederModel, StateVector) {
    let model = fixtures::ieee37();
    let v = solve_power_flow(&model, &InjectionScenario::nominal(&model, mult), 1e-12, 500).unwrap();
    (model, v)
}

fn perturbed(v: &StateVector, radius: f64, rng: &mut ChaCha8Rng) -> StateVector {
    let d: Vec<f64> = (0..2 * v.len()).map(|_| rng.sample(StandardNormal)).collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = radius * rng.random_range(0.0..1.0) / n;
    let x: Vec<f64> = v.to_rect().iter().zip(&d).map(|(x, d)| x + scale * d).collect();
    StateVector::from_rect(&x)
}

#[test]
fn truth_is_a_fixed_point() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap().noiseless(v.as_slice()).unwrap();
    assert!(wls_cost(&set, &v).unwrap() < 1e-12);
    let rep = estimate(&set, &v, &EstimatorConfig::default()).unwrap();
    assert!(rep.converged, "{:?}", rep.termination);
    assert!(rep.iterations <= 1);
    assert!(nu_index(&rep.v_hat, &v) <= 1e-12);
    assert_eq!(rep.cost_trace.len(), rep.iterations + 1);
}

#[test]
fn noiseless_recovery_near_truth() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap().noiseless(v.as_slice()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [EstimatorConfig::default(), EstimatorConfig::undamped()] {
        for _ in 0..10 {
            let v0 = perturbed(&v, 1e-4, &mut rng);
            let rep = estimate(&set, &v0, &cfg).unwrap();
            assert!(rep.converged, "{:?} after {}", rep.termination, rep.iterations);
            assert!(nu_index(&rep.v_hat, &v) <= 1e-10);
            assert!(mu_index(&set, &rep.v_hat).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn damped_cost_is_monotone_and_stationary() {
    let (model, v) = truth(1.2);
    let set = build_ieee37_measurement_set(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let noisy = set.synthesize_measurements(v.as_slice(), seed).unwrap();
        let rep = estimate(&noisy, &perturbed(&v, 1e-3, &mut rng), &EstimatorConfig::default()).unwrap();
        assert!(rep.converged, "{:?}", rep.termination);
        for w in rep.cost_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
        let again = estimate(&noisy, &perturbed(&rep.v_hat, 1e-5, &mut rng), &EstimatorConfig::default()).unwrap();
        let (c0, c1) = (rep.cost_trace.last().unwrap(), again.cost_trace.last().unwrap());
        // step tolerance 1e-8 against normal-matrix entries ~1e14 leaves ~1e-7 relative slack
        assert!((c1 - c0).abs() <= 1e-7 * c0, "{c0} {c1}");
        assert!(nu_index(&again.v_hat, &rep.v_hat) < 1e-10);
    }
}

/// Three magnitudes plus the zero-sum of a delta-only subtree fix a current
/// triangle only up to reflection; the reflected branch is separated by the
/// weak aggregate pseudo-measurement alone and is a genuine local minimum.
#[test]
fn reflected_current_triangle_is_a_local_minimum() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap().noiseless(v.as_slice()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spurious = (0..50)
        .map(|_| {
            let d: Vec<f64> = (0..210).map(|_| rng.sample(StandardNormal)).collect();
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let x: Vec<f64> = v.to_rect().iter().zip(&d).map(|(x, d)| x + 0.01 * d / n).collect();
            estimate(&set, &StateVector::from_rect(&x), &EstimatorConfig::undamped()).unwrap()
        })
        .find(|r| r.converged && r.cost_trace.last().unwrap() > &1.0)
        .expect("a reflected minimum is reachable from 0.01 starts");
    let targets = set.wls_targets().unwrap();
    let worst = set
        .wls_functions()
        .zip(&targets)
        .map(|(f, t)| ((f.evaluate(spurious.v_hat.as_slice()).unwrap() - t) / f.sigma).abs())
        .fold(0.0, f64::max);
    // misfit is of order one standard deviation, not a divergence
    assert!(worst > 0.5 && worst < 100.0, "{worst}");
    let again = estimate(&set, &spurious.v_hat, &EstimatorConfig::default()).unwrap();
    assert!(again.converged);
    assert!(nu_index(&again.v_hat, &spurious.v_hat) < 1e-12);
}

#[test]
fn zero_start_is_a_trap_for_quadratic_measurements() {
    let (model, v) = truth(1.0);
    // magnitudes and pseudo-measurements only: every function is a pure
    // quadratic form, so the gradient vanishes at v = 0
    let cfg = MeasurementConfig {
        pmu_buses: vec![],
        structural_constraints: false,
        ..MeasurementConfig::ieee37()
    };
    let set = build_measurement_set(&model, &cfg).unwrap().noiseless(v.as_slice()).unwrap();
    let zero = StateVector::new(vec![Complex64::new(0.0, 0.0); model.num_nodes()]);
    for cfg in [EstimatorConfig::default(), EstimatorConfig::undamped()] {
        let rep = estimate(&set, &zero, &cfg).unwrap();
        assert!(!rep.converged, "{:?}", rep.termination);
        assert_eq!(rep.termination, Termination::SingularNormalMatrix);
    }
}

#[test]
fn estimation_is_deterministic() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap();
    let noisy = set.synthesize_measurements(v.as_slice(), 4).unwrap();
    let v0 = flat_start(&model);
    let a = estimate(&noisy, &v0, &EstimatorConfig::undamped()).unwrap();
    let b = estimate(&noisy, &v0, &EstimatorConfig::undamped()).unwrap();
    assert_eq!(a.v_hat, b.v_hat);
    assert_eq!(a.cost_trace, b.cost_trace);
}

#[test]
fn pmu_start_overwrites_twelve_nodes() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap();
    let noisy = set.synthesize_measurements(v.as_slice(), 0).unwrap();
    let start = pmu_anchored_start(&model, &noisy).unwrap();
    let flat = flat_start(&model);
    let changed = start.as_slice().iter().zip(flat.as_slice()).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 12);
    let z = noisy.z().unwrap();
    let b704 = model.bus_index(704).unwrap();
    let n = model.node_index(b704, dsse::Phase::A).unwrap();
    assert_eq!(start.as_slice()[n], Complex64::new(z[6], z[7]));

    let no_pmu = MeasurementSet::new(model.num_nodes(), Vec::new(), Vec::new());
    assert_eq!(pmu_anchored_start(&model, &no_pmu).unwrap(), flat);
}

#[test]
fn flat_start_has_unit_magnitudes() {
    let model = fixtures::ieee37();
    let v = flat_start(&model);
    assert_eq!(v.len(), 105);
    assert!(v.as_slice().iter().all(|c| (c.norm() - 1.0).abs() < 1e-15));
    assert_eq!(StateVector::from_rect(&v.to_rect()), v);
}

#[test]
fn report_serializes() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap().noiseless(v.as_slice()).unwrap();
    let rep = estimate(&set, &flat_start(&model), &EstimatorConfig::default()).unwrap();
    let text = serde_json::to_string(&rep).unwrap();
    let back: EstimateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.iterations, rep.iterations);
    assert_eq!(back.v_hat, rep.v_hat);
}

#[test]
fn unfilled_set_is_an_error() {
    let (model, v) = truth(1.0);
    let set = build_ieee37_measurement_set(&model).unwrap();
    assert!(wls_cost(&set, &v).is_err());
    assert!(estimate(&set, &v, &EstimatorConfig::default()).is_err());
}
