//! Lossless single-phase 3-bus network (bus 1 feeding buses 2 and 3) whose
//! noiseless estimation problem has a closed-form solution. Used as an exact
//! oracle for the feeder/measurement/estimator/network pipeline.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetMeta, NoiseMode, Sample};
use crate::estimator::{estimate, flat_start, EstimatorConfig, EstimatorError};
use crate::feeder::{parse_feeder, FeederError, FeederModel};
use crate::measurement::{
    build_measurement_set, set_fingerprint, MeasurementConfig, MeasurementError, MeasurementSet,
    SigmaConfig, MEASUREMENT_SCHEMA,
};
use crate::powerflow::StateVector;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("line {line}: P/(B|v_i||v_j|) = {ratio} lies outside [-1, 1]")]
    Infeasible { line: &'static str, ratio: f64 },
    #[error("angle {0} outside (-pi/2, pi/2)")]
    AngleDomain(f64),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThreeBusParams {
    pub b12: f64,
    pub b13: f64,
    pub vmag: [f64; 3],
}

impl Default for ThreeBusParams {
    /// Matches the shipped three-bus fixture (X = 0.1 and 0.125).
    fn default() -> Self {
        Self {
            b12: 10.0,
            b13: 8.0,
            vmag: [1.0; 3],
        }
    }
}

impl ThreeBusParams {
    /// Both couplings `B·|v_1||v_j|` must be at least `min_coupling > 0`;
    /// below that the inverse map loses continuity.
    pub fn validate(&self, min_coupling: f64) -> Result<(), OracleError> {
        let (c12, c13) = self.couplings();
        if !(min_coupling > 0.0) {
            return Err(OracleError::Params("coupling bound must be positive".into()));
        }
        if !(c12 >= min_coupling && c13 >= min_coupling) {
            return Err(OracleError::Params(format!(
                "couplings {c12}, {c13} below {min_coupling}"
            )));
        }
        Ok(())
    }

    fn couplings(&self) -> (f64, f64) {
        let [v1, v2, v3] = self.vmag;
        (self.b12 * v1 * v2, self.b13 * v1 * v3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Flows {
    pub p12: f64,
    pub q12: f64,
    pub p13: f64,
    pub q13: f64,
}

fn check_angle(theta: f64) -> Result<(), OracleError> {
    if !(theta.abs() < std::f64::consts::FRAC_PI_2) {
        return Err(OracleError::AngleDomain(theta));
    }
    Ok(())
}

/// Line flows out of bus 1. Reactive flows follow the printed closed form
/// `|v_1|² − B|v_1||v_j| cos θ` (not used by the estimation oracle).
pub fn forward_3bus(p: &ThreeBusParams, theta12: f64, theta13: f64) -> Result<Flows, OracleError> {
    check_angle(theta12)?;
    check_angle(theta13)?;
    let (c12, c13) = p.couplings();
    let v1sq = p.vmag[0] * p.vmag[0];
    Ok(Flows {
        p12: c12 * theta12.sin(),
        q12: v1sq - c12 * theta12.cos(),
        p13: c13 * theta13.sin(),
        q13: v1sq - c13 * theta13.cos(),
    })
}

/// Closed-form angle differences from the active flows (principal branch).
pub fn inverse_3bus(p: &ThreeBusParams, p12: f64, p13: f64) -> Result<(f64, f64), OracleError> {
    let (c12, c13) = p.couplings();
    let solve = |line, pf: f64, c: f64| {
        let ratio = pf / c;
        if !(-1.0..=1.0).contains(&ratio) {
            return Err(OracleError::Infeasible { line, ratio });
        }
        Ok(ratio.asin())
    };
    Ok((solve("1-2", p12, c12)?, solve("1-3", p13, c13)?))
}

/// The network as a feeder document: purely reactive series impedances
/// `Z = j/B`, no shunts, no units.
pub fn three_bus_feeder(p: &ThreeBusParams) -> Result<FeederModel, OracleError> {
    if !(p.b12 > 0.0 && p.b13 > 0.0) {
        return Err(OracleError::Params("susceptances must be positive".into()));
    }
    let doc = serde_json::json!({
        "schema": "feeder/1",
        "name": "three-bus-lossless",
        "substation": 1,
        "buses": [
            {"id": 1, "phases": "a"},
            {"id": 2, "phases": "a"},
            {"id": 3, "phases": "a"}
        ],
        "branches": [
            {"id": "1-2", "from": 1, "to": 2, "phases": "a", "Z_real": [0.0], "Z_imag": [1.0 / p.b12]},
            {"id": "1-3", "from": 1, "to": 3, "phases": "a", "Z_real": [0.0], "Z_imag": [1.0 / p.b13]}
        ],
        "injections": []
    });
    Ok(parse_feeder(&doc.to_string())?)
}

/// `|v_1|², |v_2|², |v_3|², P_12, P_13`, plus an exact constraint pinning
/// the angle at bus 1.
pub fn three_bus_config() -> MeasurementConfig {
    MeasurementConfig {
        schema: MEASUREMENT_SCHEMA.to_string(),
        pmu_buses: vec![],
        current_magnitude_branches: vec![],
        voltage_magnitude_buses: vec![1, 2, 3],
        active_flow_branches: vec!["1-2".into(), "1-3".into()],
        pseudo_buses: vec![],
        sigma: SigmaConfig::default(),
        structural_constraints: false,
        reference_angle_buses: vec![1],
    }
}

pub fn three_bus_measurements(model: &FeederModel) -> Result<MeasurementSet, OracleError> {
    Ok(build_measurement_set(model, &three_bus_config())?)
}

/// State with bus 1 at angle zero and `θ_1j = arg v_1 − arg v_j`.
pub fn state_from_angles(p: &ThreeBusParams, theta12: f64, theta13: f64) -> StateVector {
    let [v1, v2, v3] = p.vmag;
    StateVector::new(vec![
        Complex64::new(v1, 0.0),
        Complex64::from_polar(v2, -theta12),
        Complex64::from_polar(v3, -theta13),
    ])
}

pub fn angles_from_state(v: &StateVector) -> (f64, f64) {
    let s = v.as_slice();
    let wrap = |x: f64| (x + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    (wrap(s[0].arg() - s[1].arg()), wrap(s[0].arg() - s[2].arg()))
}

/// Measurement vector in set order from the closed-form flows.
pub fn closed_form_measurements(
    p: &ThreeBusParams,
    theta12: f64,
    theta13: f64,
) -> Result<Vec<f64>, OracleError> {
    let f = forward_3bus(p, theta12, theta13)?;
    let [v1, v2, v3] = p.vmag;
    Ok(vec![v1 * v1, v2 * v2, v3 * v3, f.p12, f.p13])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleRow {
    pub theta12: f64,
    pub theta13: f64,
    /// |inverse(forward(θ)) − θ|, max over both lines.
    pub roundtrip_err: f64,
    /// |θ recovered by estimation from flat start − closed form|.
    pub pipeline_err: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Round-trip and estimation errors at one angle pair.
pub fn check_point(p: &ThreeBusParams, theta12: f64, theta13: f64) -> Result<OracleRow, OracleError> {
    let f = forward_3bus(p, theta12, theta13)?;
    let (r12, r13) = inverse_3bus(p, f.p12, f.p13)?;
    let roundtrip_err = (r12 - theta12).abs().max((r13 - theta13).abs());

    let model = three_bus_feeder(p)?;
    let set = three_bus_measurements(&model)?.with_z(closed_form_measurements(p, theta12, theta13)?)?;
    let rep = estimate(&set, &flat_start(&model), &EstimatorConfig::default())?;
    let (e12, e13) = angles_from_state(&rep.v_hat);
    Ok(OracleRow {
        theta12,
        theta13,
        roundtrip_err,
        pipeline_err: (e12 - r12).abs().max((e13 - r13).abs()),
        iterations: rep.iterations,
        converged: rep.converged,
    })
}

/// Noiseless `(z, v)` samples with magnitudes in [0.95, 1.05] and angle
/// differences in ±`max_angle`.
pub fn sample_dataset(
    p: &ThreeBusParams,
    n: usize,
    max_angle: f64,
    seed: u64,
) -> Result<Dataset, OracleError> {
    check_angle(max_angle)?;
    let model = three_bus_feeder(p)?;
    let set = three_bus_measurements(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let q = ThreeBusParams {
            vmag: [0; 3].map(|_| rng.random_range(0.95..=1.05)),
            ..*p
        };
        let t12 = rng.random_range(-max_angle..=max_angle);
        let t13 = rng.random_range(-max_angle..=max_angle);
        let v = state_from_angles(&q, t12, t13);
        samples.push(Sample {
            z: set.noiseless(v.as_slice())?.z_filled()?.to_vec(),
            v: v.to_rect(),
            scenario_id: id as u64,
            seed,
        });
    }
    Ok(Dataset::new(
        set.len(),
        2 * model.num_nodes(),
        set_fingerprint(&model, &set),
        samples,
        DatasetMeta {
            noise: NoiseMode::Noiseless,
            master_seed: seed,
            skipped: 0,
            feeder: model.name().to_string(),
        },
    ))
}
