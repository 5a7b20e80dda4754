//! Weighted least-squares state estimation by Gauss-Newton over the
//! rectangular state `x = [Re v; Im v]`.
//!
//! Each iteration solves the damped normal equations
//!
//! ```text
//! (HᵀWH + λI) Δx = HᵀW (z − h(x))
//! ```
//!
//! with a dense Cholesky factorization. In the default mode λ starts at a
//! small floor proportional to `trace(HᵀWH)/2K`, grows ×10 whenever a step
//! would increase the cost (the step is then retried) and shrinks ÷10 after
//! each accepted step. The undamped mode is plain Gauss-Newton: λ = 0 and
//! every step is taken, which is what lets it diverge.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::measurement::{MeasurementError, MeasurementSet};
use crate::powerflow::StateVector;

/// Converged reports satisfy `‖HᵀW(z−h)‖_∞ ≤ STATIONARITY_TOL · (1 + max|HᵀWH|)`.
pub const STATIONARITY_TOL: f64 = 1e-6;

/// Retries of one damped iteration before giving up on descent.
const MAX_DAMPING_RETRIES: usize = 30;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error("initial state is not finite")]
    NonFiniteStart,
    #[error("invalid estimator configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub max_iter: usize,
    /// Stop once `‖Δx‖₂` falls below this.
    pub step_tol: f64,
    /// Levenberg floor factor: λ_min = damping · trace(HᵀWH) / 2K.
    pub damping: f64,
    /// `false` gives plain Gauss-Newton (λ = 0, every step accepted).
    pub adaptive_damping: bool,
    /// Consecutive cost increases tolerated before declaring divergence.
    pub divergence_cost_growth: usize,
    pub divergence_norm_cap: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            step_tol: 1e-8,
            damping: 1e-10,
            adaptive_damping: true,
            divergence_cost_growth: 5,
            divergence_norm_cap: 1e3,
        }
    }
}

impl EstimatorConfig {
    pub fn undamped() -> Self {
        Self {
            adaptive_damping: false,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), EstimatorError> {
        if self.max_iter < 1 {
            return Err(EstimatorError::Config("max_iter must be at least 1"));
        }
        if !(self.step_tol > 0.0 && self.damping > 0.0 && self.divergence_norm_cap > 0.0) {
            return Err(EstimatorError::Config("tolerances must be positive"));
        }
        if self.divergence_cost_growth < 1 {
            return Err(EstimatorError::Config("divergence_cost_growth must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    /// Step fell below tolerance but the gradient test failed.
    Stalled,
    MaxIterations,
    CostGrowth,
    NormCap,
    NonFinite,
    SingularNormalMatrix,
    NoDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub v_hat: StateVector,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// J at the start and after every iteration.
    pub cost_trace: Vec<f64>,
    /// `‖HᵀW(z−h)‖_∞` at the returned state.
    pub gradient_norm: f64,
    #[serde(with = "duration_secs")]
    pub wall_time: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Stacked problem data: functions in WLS order with their targets.
struct Problem<'a> {
    set: &'a MeasurementSet,
    targets: Vec<f64>,
    weights: Vec<f64>,
    k: usize,
}

impl<'a> Problem<'a> {
    fn new(set: &'a MeasurementSet) -> Result<Self, MeasurementError> {
        Ok(Self {
            targets: set.wls_targets()?,
            weights: set.wls_functions().map(|f| f.weight).collect(),
            k: set.num_nodes(),
            set,
        })
    }

    fn residuals(&self, v: &[Complex64]) -> Vec<f64> {
        self.set
            .wls_functions()
            .zip(&self.targets)
            .map(|(f, z)| z - f.eval_unchecked(v))
            .collect()
    }

    fn cost(&self, r: &[f64]) -> f64 {
        r.iter().zip(&self.weights).map(|(r, w)| w * r * r).sum()
    }

    /// Normal matrix and gradient at `v`.
    fn linearize(&self, v: &[Complex64], r: &[f64]) -> Linearization {
        let n = 2 * self.k;
        let m = self.targets.len();
        // built transposed so that each row of H fills a contiguous column
        let mut ht = DMatrix::<f64>::zeros(n, m);
        let mut wr = DVector::<f64>::zeros(m);
        for (l, f) in self.set.wls_functions().enumerate() {
            let sw = self.weights[l].sqrt();
            let mut col = ht.column_mut(l);
            f.jacobian_row_into(v, col.as_mut_slice());
            col *= sw;
            wr[l] = sw * r[l];
        }
        Linearization {
            a: &ht * ht.transpose(),
            g: &ht * &wr,
        }
    }
}

struct Linearization {
    /// `HᵀWH`
    a: DMatrix<f64>,
    /// `HᵀWr`
    g: DVector<f64>,
}

impl Linearization {
    /// `(HᵀWH + λI)⁻¹ HᵀWr` by dense Cholesky; `None` if not positive definite.
    fn step(&self, lambda: f64) -> Option<DVector<f64>> {
        let mut m = self.a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        Some(m.cholesky()?.solve(&self.g))
    }
}

fn rect(v: &[Complex64]) -> DVector<f64> {
    DVector::from_iterator(2 * v.len(), v.iter().map(|c| c.re).chain(v.iter().map(|c| c.im)))
}

fn complex(x: &DVector<f64>) -> Vec<Complex64> {
    let k = x.len() / 2;
    (0..k).map(|i| Complex64::new(x[i], x[k + i])).collect()
}

/// `J(v) = Σ w_ℓ (z_ℓ − h_ℓ(v))²` over the observed measurements and the
/// structural constraints.
pub fn wls_cost(set: &MeasurementSet, v: &StateVector) -> Result<f64, EstimatorError> {
    check_shape(set, v)?;
    let p = Problem::new(set)?;
    Ok(p.cost(&p.residuals(v.as_slice())))
}

fn check_shape(set: &MeasurementSet, v: &StateVector) -> Result<(), MeasurementError> {
    if v.len() != set.num_nodes() {
        return Err(MeasurementError::Shape {
            got: v.len(),
            expected: set.num_nodes(),
        });
    }
    Ok(())
}

/// Runs Gauss-Newton from `v0`. Divergence is reported, never raised.
pub fn estimate(
    set: &MeasurementSet,
    v0: &StateVector,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport, EstimatorError> {
    cfg.validate()?;
    check_shape(set, v0)?;
    if !v0.is_finite() {
        return Err(EstimatorError::NonFiniteStart);
    }
    let start = Instant::now();
    let p = Problem::new(set)?;
    let n = 2 * p.k;

    let mut x = rect(v0.as_slice());
    let mut v = v0.as_slice().to_vec();
    let mut r = p.residuals(&v);
    let mut cost = p.cost(&r);
    let mut cost_trace = vec![cost];
    let mut lambda: Option<f64> = None;
    let mut growth = 0usize;
    let mut iterations = 0usize;
    let mut lin = p.linearize(&v, &r);

    let termination = loop {
        if iterations >= cfg.max_iter {
            break Termination::MaxIterations;
        }
        let floor = cfg.damping * lin.a.trace() / n as f64;
        let mut lam = if cfg.adaptive_damping {
            lambda.unwrap_or(floor).max(floor)
        } else {
            0.0
        };

        let mut retries = 0usize;
        let step = loop {
            let Some(dx) = lin.step(lam) else {
                break None;
            };
            let x_new = &x + &dx;
            let v_new = complex(&x_new);
            let r_new = p.residuals(&v_new);
            let c_new = p.cost(&r_new);
            let increased = !(c_new <= cost * (1.0 + 1e-12));
            if cfg.adaptive_damping && increased && c_new.is_finite() && retries < MAX_DAMPING_RETRIES {
                lam *= 10.0;
                retries += 1;
                continue;
            }
            break Some((dx, x_new, v_new, r_new, c_new, increased));
        };

        let Some((dx, x_new, v_new, r_new, c_new, increased)) = step else {
            break Termination::SingularNormalMatrix;
        };
        if cfg.adaptive_damping && increased && c_new.is_finite() {
            // every retry failed to descend; keep the last accepted state
            break Termination::NoDescent;
        }

        iterations += 1;
        x = x_new;
        v = v_new;
        r = r_new;
        cost = c_new;
        cost_trace.push(cost);
        lambda = Some(lam / 10.0);

        if !x.iter().all(|c| c.is_finite()) || !cost.is_finite() {
            break Termination::NonFinite;
        }
        if x.norm() > cfg.divergence_norm_cap {
            break Termination::NormCap;
        }
        growth = if increased { growth + 1 } else { 0 };
        if growth >= cfg.divergence_cost_growth {
            break Termination::CostGrowth;
        }

        lin = p.linearize(&v, &r);
        if dx.norm() <= cfg.step_tol {
            break if stationary(&lin.a, &lin.g) {
                Termination::Converged
            } else {
                Termination::Stalled
            };
        }
    };

    let gradient_norm = if matches!(
        termination,
        Termination::NonFinite | Termination::NormCap
    ) {
        f64::NAN
    } else {
        lin.g.amax()
    };
    Ok(EstimateReport {
        v_hat: StateVector::new(v),
        iterations,
        converged: termination == Termination::Converged,
        termination,
        cost_trace,
        gradient_norm,
        wall_time: start.elapsed(),
    })
}

fn stationary(a: &DMatrix<f64>, g: &DVector<f64>) -> bool {
    g.amax() <= STATIONARITY_TOL * (1.0 + a.amax())
}

/// 1 p.u. at the balanced reference angles on every phase-node.
pub fn flat_start(model: &FeederModel) -> StateVector {
    StateVector::new(model.flat_profile())
}

/// Flat start with every PMU-observed phase-node replaced by its measured
/// phasor.
pub fn pmu_anchored_start(
    model: &FeederModel,
    set: &MeasurementSet,
) -> Result<StateVector, EstimatorError> {
    let mut v = model.flat_profile();
    if let Some(z) = set.z() {
        for (node, re, im) in set.voltage_phasor_slots() {
            v[node] = Complex64::new(z[re], z[im]);
        }
    }
    Ok(StateVector::new(v))
}

/// `ν = ‖v̂ − v_true‖₂²`.
pub fn nu_index(v_hat: &StateVector, v_true: &StateVector) -> f64 {
    assert_eq!(v_hat.len(), v_true.len(), "state length mismatch");
    v_hat
        .as_slice()
        .iter()
        .zip(v_true.as_slice())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum()
}

/// `μ = Σ (z_ℓ − h_ℓ(v̂))²`, unweighted, observed measurements only.
pub fn mu_index(set: &MeasurementSet, v_hat: &StateVector) -> Result<f64, EstimatorError> {
    check_shape(set, v_hat)?;
    let z = set.z_filled()?;
    Ok(set
        .fns
        .iter()
        .zip(z)
        .map(|(f, z)| (z - f.eval_unchecked(v_hat.as_slice())).powi(2))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{mk_vmag_sq, MeasurementSet};
    use crate::feeder::{parse_feeder, Phase};

    const TWO_BUS: &str = r#"{
        "schema": "feeder/1", "substation": 1,
        "buses": [{"id": 1, "phases": "a"}, {"id": 2, "phases": "a"}],
        "branches": [{"from": 1, "to": 2, "phases": "a", "Z_real": [0.0], "Z_imag": [0.1]}],
        "injections": []
    }"#;

    #[test]
    fn single_function_cost() {
        let model = parse_feeder(TWO_BUS).unwrap();
        let mut f = mk_vmag_sq(&model, 2, Phase::A, 1.0).unwrap();
        f.sigma_mag = None;
        f.weight = 2.0;
        let set = MeasurementSet::new(2, vec![f], Vec::new()).with_z(vec![1.0]).unwrap();
        let v = StateVector::new(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
        assert_eq!(wls_cost(&set, &v).unwrap(), 2.0);
    }

    #[test]
    fn nu_of_single_slot_offset() {
        let a = StateVector::new(vec![Complex64::new(1.0, 0.0); 3]);
        let mut b = a.clone();
        b.as_mut_slice()[1].im += 0.1;
        assert!((nu_index(&a, &b) - 0.01).abs() < 1e-15);
        assert_eq!(nu_index(&a, &a), 0.0);
    }

    #[test]
    fn config_validation() {
        let cfg = EstimatorConfig {
            max_iter: 0,
            ..EstimatorConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(EstimatorConfig::default().validate().is_ok());
    }
}
