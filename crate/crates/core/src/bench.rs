//! Benchmark harness: NN-initialized Gauss-Newton against flat and
//! PMU-anchored starts, ε sweeps, hidden-size sweeps and reconfiguration runs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_dataset, derive_seed, sample_scenarios, Dataset, DatasetError, NoiseMode, ProfileLibrary,
};
use crate::estimator::{
    estimate, flat_start, mu_index, nu_index, pmu_anchored_start, EstimatorConfig, EstimatorError,
    Termination,
};
use crate::feeder::{FeederError, FeederModel};
use crate::measurement::{build_measurement_set, MeasurementConfig, MeasurementError, MeasurementSet};
use crate::nn::{batch_hinge_loss, train, train_on, NnError, NnModel, TrainConfig, TrainingTrace};
use crate::powerflow::StateVector;

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("method nn requires a model")]
    MissingModel,
    #[error("model expects {model} inputs, measurement set has {set}")]
    ModelShape { model: usize, set: usize },
    #[error("unknown method {0:?} (expected nn, flat or pmu)")]
    UnknownMethod(String),
    #[error("unknown scenario {0:?} (expected A, B or C)")]
    UnknownScenario(String),
    #[error("no methods selected")]
    NoMethods,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nn,
    Flat,
    Pmu,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Nn, Method::Flat, Method::Pmu];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nn => "nn",
            Method::Flat => "flat",
            Method::Pmu => "pmu",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::UnknownMethod(s.to_string()))
    }
}

/// Initial state for one method.
pub fn initial_state(
    method: Method,
    model: &FeederModel,
    set: &MeasurementSet,
    nn: Option<&NnModel>,
) -> Result<StateVector, BenchError> {
    Ok(match method {
        Method::Flat => flat_start(model),
        Method::Pmu => pmu_anchored_start(model, set)?,
        Method::Nn => {
            let m = nn.ok_or(BenchError::MissingModel)?;
            StateVector::from_rect(&m.forward(set.z_filled()?)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub scenario_id: u64,
    pub method: Method,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    /// `‖v̂ − v_true‖²`.
    pub nu: f64,
    pub mu: f64,
    /// `‖v⁰ − v_true‖₂` of the initial point.
    pub init_distance: f64,
}

/// Per-method aggregates. `mean_*` run over converged runs only (`None` if
/// there are none); `*_all` average the returned estimate of every run,
/// divergent ones included (`None` if any of them is non-finite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub divergences: usize,
    pub mean_nu: Option<f64>,
    pub mean_mu: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub mean_nu_all: Option<f64>,
    pub mean_mu_all: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins over `[0, max(values)]`; the maximum lands in the last bin.
    pub fn uniform(values: &[f64], bins: usize) -> Self {
        let max = values.iter().cloned().fold(0.0, f64::max);
        let mut counts = vec![0; bins];
        for &x in values {
            let i = if max > 0.0 { ((x / max) * bins as f64) as usize } else { 0 };
            counts[i.min(bins - 1)] += 1;
        }
        Self { max, counts }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        let width = self.max / self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                format!("{}", width * i as f64),
                format!("{}", width * (i + 1) as f64),
                c.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall time per run and method (NN forward pass included). Kept out of the
/// serialized report so that reports are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTiming {
    pub run: usize,
    pub method: Method,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub feeder: String,
    pub damped: bool,
    pub runs: usize,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<RunRecord>,
    /// Distances of the NN output from the true state.
    pub histogram: Option<Histogram>,
    #[serde(skip)]
    pub timings: Vec<RunTiming>,
}

/// Aggregates recomputed from per-run records, in the given method order.
pub fn summarize(records: &[RunRecord], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&&RunRecord> = mine.iter().filter(|r| r.converged).collect();
            let mean = |f: &dyn Fn(&RunRecord) -> f64| {
                (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
            };
            let mean_all = |f: &dyn Fn(&RunRecord) -> f64| {
                let m = mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64;
                (!mine.is_empty() && m.is_finite()).then_some(m)
            };
            MethodSummary {
                method,
                runs: mine.len(),
                divergences: mine.len() - ok.len(),
                mean_nu: mean(&|r| r.nu),
                mean_mu: mean(&|r| r.mu),
                mean_iterations: mean(&|r| r.iterations as f64),
                mean_nu_all: mean_all(&|r| r.nu),
                mean_mu_all: mean_all(&|r| r.mu),
            }
        })
        .collect()
}

impl BenchReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Total wall time per method.
    pub fn total_times(&self) -> BTreeMap<Method, Duration> {
        let mut out = BTreeMap::new();
        for t in &self.timings {
            *out.entry(t.method).or_default() += t.wall_time;
        }
        out
    }

    pub fn write_timings_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["run", "method", "wall_time_s"])?;
        for t in &self.timings {
            w.write_record([t.run.to_string(), t.method.to_string(), t.wall_time.as_secs_f64().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub estimator: EstimatorConfig,
}

impl Default for BenchConfig {
    /// All three methods under plain (undamped) Gauss-Newton.
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            estimator: EstimatorConfig::undamped(),
        }
    }
}

/// Fresh evaluation cases: scenarios drawn from `lib`, solved on `model`,
/// observed through `template`. Scenario and noise streams are both derived
/// from `seed`.
pub fn evaluation_set(
    model: &FeederModel,
    template: &MeasurementSet,
    lib: &ProfileLibrary,
    runs: usize,
    noise: NoiseMode,
    seed: u64,
) -> Result<Dataset, BenchError> {
    let scenarios = sample_scenarios(lib, model, runs, derive_seed(seed, 0))?;
    Ok(build_dataset(model, template, &scenarios, noise, derive_seed(seed, 1))?)
}

/// Runs every method on every case. Cases run in parallel on the current
/// rayon pool; results do not depend on the pool size.
pub fn run_bench(
    model: &FeederModel,
    template: &MeasurementSet,
    cases: &Dataset,
    nn: Option<&NnModel>,
    cfg: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    if cfg.methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    if cfg.methods.contains(&Method::Nn) {
        let m = nn.ok_or(BenchError::MissingModel)?;
        if m.input_len() != template.len() {
            return Err(BenchError::ModelShape {
                model: m.input_len(),
                set: template.len(),
            });
        }
    }
    let per_case: Vec<Vec<(RunRecord, RunTiming)>> = cases
        .samples()
        .par_iter()
        .enumerate()
        .map(|(run, sample)| {
            let set = template.clone().with_z(sample.z.clone())?;
            let v_true = StateVector::from_rect(&sample.v);
            cfg.methods
                .iter()
                .map(|&method| {
                    let t0 = Instant::now();
                    let v0 = initial_state(method, model, &set, nn)?;
                    let rep = estimate(&set, &v0, &cfg.estimator)?;
                    let wall_time = t0.elapsed();
                    let record = RunRecord {
                        run,
                        scenario_id: sample.scenario_id,
                        method,
                        converged: rep.converged,
                        termination: rep.termination,
                        iterations: rep.iterations,
                        nu: nu_index(&rep.v_hat, &v_true),
                        mu: mu_index(&set, &rep.v_hat)?,
                        init_distance: nu_index(&v0, &v_true).sqrt(),
                    };
                    Ok((record, RunTiming { run, method, wall_time }))
                })
                .collect::<Result<Vec<_>, BenchError>>()
        })
        .collect::<Result<_, _>>()?;
    let (records, timings): (Vec<RunRecord>, Vec<RunTiming>) = per_case.into_iter().flatten().unzip();
    let nn_dist: Vec<f64> = records
        .iter()
        .filter(|r| r.method == Method::Nn)
        .map(|r| r.init_distance)
        .collect();
    Ok(BenchReport {
        feeder: model.name().to_string(),
        damped: cfg.estimator.adaptive_damping,
        runs: cases.len(),
        methods: summarize(&records, &cfg.methods),
        histogram: (!nn_dist.is_empty()).then(|| Histogram::uniform(&nn_dist, HISTOGRAM_BINS)),
        records,
        timings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSweepRow {
    pub epsilon: f64,
    pub hidden: usize,
    pub best_epoch: usize,
    pub runs: usize,
    pub divergences: usize,
    pub mean_iterations: Option<f64>,
    pub mean_nu: Option<f64>,
    pub mean_mu: Option<f64>,
    /// Mean `‖g_T(z) − v_true‖₂` over the evaluation cases.
    pub mean_init_distance: f64,
}

/// Trains one model per ε on `train_set` and evaluates NN-initialized
/// estimation on `cases`. Models and traces are returned alongside the rows.
pub fn eps_sweep(
    model: &FeederModel,
    template: &MeasurementSet,
    train_set: &Dataset,
    cases: &Dataset,
    epsilons: &[f64],
    train_cfg: &TrainConfig,
    estimator: &EstimatorConfig,
) -> Result<Vec<(EpsSweepRow, NnModel, TrainingTrace)>, BenchError> {
    let cfg = BenchConfig {
        methods: vec![Method::Nn],
        estimator: *estimator,
    };
    epsilons
        .iter()
        .map(|&epsilon| {
            let (m, trace) = train(train_set, &TrainConfig { epsilon, ..*train_cfg })?;
            let rep = run_bench(model, template, cases, Some(&m), &cfg)?;
            let s = &rep.methods[0];
            let row = EpsSweepRow {
                epsilon,
                hidden: m.hidden(),
                best_epoch: trace.best_epoch,
                runs: s.runs,
                divergences: s.divergences,
                mean_iterations: s.mean_iterations,
                mean_nu: s.mean_nu,
                mean_mu: s.mean_mu,
                mean_init_distance: rep.records.iter().map(|r| r.init_distance).sum::<f64>()
                    / rep.records.len().max(1) as f64,
            };
            Ok((row, m, trace))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub epsilon: f64,
    /// Smallest candidate hidden size reaching zero training hinge loss.
    pub min_hidden: Option<usize>,
    /// Final training hinge loss per candidate, in candidate order.
    pub losses: Vec<(usize, f64)>,
}

/// Training hinge loss after fitting `T` neurons to `(z, v)`, with the
/// training set doubling as the early-stopping set.
pub fn training_hinge(z: &DMatrix<f64>, v: &DMatrix<f64>, cfg: &TrainConfig) -> Result<f64, BenchError> {
    let (m, _) = train_on(z, v, z, v, [0; 32], cfg)?;
    Ok(batch_hinge_loss(&m, z, v, cfg.epsilon))
}

/// For each ε, the smallest hidden size among `candidates` (ascending) whose
/// trained network has exactly zero training hinge loss.
pub fn complexity_sweep(
    ds: &Dataset,
    epsilons: &[f64],
    candidates: &[usize],
    base: &TrainConfig,
) -> Result<Vec<ComplexityRow>, BenchError> {
    let (z, v) = ds.matrices();
    epsilons
        .par_iter()
        .map(|&epsilon| {
            let mut losses = Vec::new();
            let mut min_hidden = None;
            for &hidden in candidates {
                let loss = training_hinge(&z, &v, &TrainConfig { epsilon, hidden, ..*base })?;
                losses.push((hidden, loss));
                if loss == 0.0 {
                    min_hidden = Some(hidden);
                    break;
                }
            }
            Ok(ComplexityRow {
                epsilon,
                min_hidden,
                losses,
            })
        })
        .collect()
}

/// Reconfiguration events on the IEEE-37 switch set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::A, Scenario::B, Scenario::C];

    /// Branch id → closed.
    pub fn switch_map(self) -> BTreeMap<String, bool> {
        let pairs: [(&str, bool); 2] = match self {
            Scenario::A => [("727-744", false), ("742-744", true)],
            Scenario::B => [("703-730", false), ("703-741", true)],
            Scenario::C => [("710-735", false), ("735-737", true)],
        };
        pairs.iter().map(|&(id, c)| (id.to_string(), c)).collect()
    }
}

impl FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Scenario::A),
            "B" | "b" => Ok(Scenario::B),
            "C" | "c" => Ok(Scenario::C),
            _ => Err(BenchError::UnknownScenario(s.to_string())),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Applies the scenario's switch map, regenerates truth on the new topology
/// and runs the methods with the estimator given the correct topology. The
/// NN keeps the weights learned on the original network.
pub fn reconfig_bench(
    model: &FeederModel,
    meas_cfg: &MeasurementConfig,
    lib: &ProfileLibrary,
    nn: Option<&NnModel>,
    scenario: Scenario,
    runs: usize,
    seed: u64,
    cfg: &BenchConfig,
) -> Result<BenchReport, BenchError> {
    let switched = model.set_switch_states(&scenario.switch_map())?;
    let set = build_measurement_set(&switched, meas_cfg)?;
    let cases = evaluation_set(&switched, &set, lib, runs, NoiseMode::PaperNoise, seed)?;
    run_bench(&switched, &set, &cases, nn, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, converged: bool, nu: f64, it: usize) -> RunRecord {
        RunRecord {
            run: 0,
            scenario_id: 0,
            method,
            converged,
            termination: if converged {
                Termination::Converged
            } else {
                Termination::MaxIterations
            },
            iterations: it,
            nu,
            mu: 2.0 * nu,
            init_distance: 0.0,
        }
    }

    #[test]
    fn summary_averages_converged_runs() {
        let r = [
            rec(Method::Nn, true, 1.0, 3),
            rec(Method::Nn, true, 3.0, 5),
            rec(Method::Nn, false, 1e9, 50),
            rec(Method::Pmu, false, 1e9, 50),
        ];
        let s = summarize(&r, &[Method::Nn, Method::Pmu]);
        assert_eq!(s[0].runs, 3);
        assert_eq!(s[0].divergences, 1);
        assert_eq!(s[0].mean_nu, Some(2.0));
        assert_eq!(s[0].mean_mu, Some(4.0));
        assert_eq!(s[0].mean_iterations, Some(4.0));
        assert_eq!(s[0].mean_nu_all, Some((4.0 + 1e9) / 3.0));
        assert_eq!(s[1].mean_nu, None);
        assert_eq!(s[1].mean_nu_all, Some(1e9));
        assert_eq!(s[1].divergences, 1);
        let nan = [rec(Method::Flat, false, f64::NAN, 1)];
        assert_eq!(summarize(&nan, &[Method::Flat])[0].mean_nu_all, None);
    }

    #[test]
    fn histogram_covers_range() {
        let h = Histogram::uniform(&[0.0, 0.5, 1.0, 0.99], 4);
        assert_eq!(h.max, 1.0);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(Histogram::uniform(&[0.0, 0.0], 3).counts, vec![2, 0, 0]);
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("bin_lo,bin_hi,count\n0,0.25,1\n"));
    }

    #[test]
    fn parsing() {
        assert_eq!("pmu".parse::<Method>().unwrap(), Method::Pmu);
        assert!("gn".parse::<Method>().is_err());
        assert_eq!("b".parse::<Scenario>().unwrap(), Scenario::B);
        assert!(matches!("D".parse::<Scenario>(), Err(BenchError::UnknownScenario(_))));
    }
}
