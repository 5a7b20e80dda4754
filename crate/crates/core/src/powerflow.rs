//! Ground-truth multiphase power flow by implicit Z-bus fixed point.
//!
//! With substation nodes `S` pinned at the reference and the remaining nodes
//! `R`, each sweep solves
//!
//! ```text
//! v_R ← Y_RR⁻¹ · (i_R(v) − Y_RS · v_S)
//! ```
//!
//! where `i_R(v)` are the constant-power injection currents evaluated at the
//! current iterate. Delta units inject `i_ab = conj(s_ab / (v_a − v_b))` into
//! phase `a` and draw it from phase `b`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{Connection, FeederError, FeederModel};
use crate::sparse::CsrMatrix;

/// Nodes below this magnitude are treated as a voltage collapse.
pub const COLLAPSE_VOLTAGE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("scenario covers {got} units, feeder has {expected}")]
    ScenarioShape { got: usize, expected: usize },
    #[error("scenario value for unit {0} is not finite")]
    NonFinite(usize),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("voltage collapse at phase-node {node}: |v| = {magnitude:.4}")]
    VoltageCollapse { node: usize, magnitude: f64 },
    #[error("reduced admittance matrix is singular")]
    SingularReduced,
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("scenario csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Complex voltage per phase-node over the feeder's state ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    v: Vec<Complex64>,
}

impl StateVector {
    pub fn new(v: Vec<Complex64>) -> Self {
        Self { v }
    }

    /// Unpacks `x = [Re v; Im v]`.
    pub fn from_rect(x: &[f64]) -> Self {
        assert!(x.len() % 2 == 0, "rectangular packing must have even length");
        let k = x.len() / 2;
        Self {
            v: (0..k).map(|i| Complex64::new(x[i], x[k + i])).collect(),
        }
    }

    pub fn to_rect(&self) -> Vec<f64> {
        self.v
            .iter()
            .map(|c| c.re)
            .chain(self.v.iter().map(|c| c.im))
            .collect()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.v
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.v
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.v
    }
}

/// Complex power per injection unit (feeder order), loads negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionScenario {
    pub s: Vec<Complex64>,
}

impl InjectionScenario {
    pub fn zero(model: &FeederModel) -> Self {
        Self {
            s: vec![Complex64::new(0.0, 0.0); model.injections().len()],
        }
    }

    /// Every unit at its rating times `multiplier`.
    pub fn nominal(model: &FeederModel, multiplier: f64) -> Self {
        Self {
            s: model
                .injections()
                .iter()
                .map(|u| u.base_injection() * multiplier)
                .collect(),
        }
    }

    fn validate(&self, model: &FeederModel) -> Result<(), PowerFlowError> {
        if self.s.len() != model.injections().len() {
            return Err(PowerFlowError::ScenarioShape {
                got: self.s.len(),
                expected: model.injections().len(),
            });
        }
        if let Some(i) = self
            .s
            .iter()
            .position(|c| !(c.re.is_finite() && c.im.is_finite()))
        {
            return Err(PowerFlowError::NonFinite(i));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
enum UnitTerminals {
    Wye(Vec<usize>),
    Delta(usize, usize),
}

/// Injection currents of every unit at `v`, accumulated per phase-node.
fn injection_currents(
    units: &[UnitTerminals],
    scenario: &InjectionScenario,
    v: &[Complex64],
) -> Vec<Complex64> {
    let mut i = vec![Complex64::new(0.0, 0.0); v.len()];
    for (unit, &s) in units.iter().zip(&scenario.s) {
        match unit {
            UnitTerminals::Wye(nodes) => {
                let share = s / nodes.len() as f64;
                for &n in nodes {
                    i[n] += (share / v[n]).conj();
                }
            }
            UnitTerminals::Delta(a, b) => {
                let i_ab = (s / (v[*a] - v[*b])).conj();
                i[*a] += i_ab;
                i[*b] -= i_ab;
            }
        }
    }
    i
}

/// Per phase-node complex power drawn from the network by every unit at `v`.
fn scheduled_node_power(
    units: &[UnitTerminals],
    scenario: &InjectionScenario,
    v: &[Complex64],
) -> Vec<Complex64> {
    let currents = injection_currents(units, scenario, v);
    v.iter().zip(&currents).map(|(vn, i)| vn * i.conj()).collect()
}

fn unit_terminals(model: &FeederModel) -> Vec<UnitTerminals> {
    model
        .injections()
        .iter()
        .map(|u| match u.connection {
            Connection::Wye => UnitTerminals::Wye(
                u.terminals
                    .iter()
                    .map(|&p| model.node_index(u.bus, p).expect("validated at parse"))
                    .collect(),
            ),
            Connection::Delta => UnitTerminals::Delta(
                model.node_index(u.bus, u.terminals[0]).expect("validated"),
                model.node_index(u.bus, u.terminals[1]).expect("validated"),
            ),
        })
        .collect()
}

/// Power-flow solver with the reduced admittance factorization cached for
/// one topology. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct PowerFlowSolver {
    num_nodes: usize,
    substation: Vec<usize>,
    reduced: Vec<usize>,
    reference: Vec<Complex64>,
    flat: Vec<Complex64>,
    y_rs: DMatrix<Complex64>,
    lu: LU<Complex64, Dyn, Dyn>,
    units: Vec<UnitTerminals>,
}

impl PowerFlowSolver {
    pub fn new(model: &FeederModel) -> Result<Self, PowerFlowError> {
        let ybus = model.bus_admittance()?;
        let k = model.num_nodes();
        let sub: Vec<usize> = model.substation_nodes().collect();
        let reduced: Vec<usize> = (0..k).filter(|i| !sub.contains(i)).collect();
        let mut pos = vec![usize::MAX; k];
        for (r, &n) in reduced.iter().enumerate() {
            pos[n] = r;
        }
        let mut y_rr = DMatrix::zeros(reduced.len(), reduced.len());
        let mut y_rs = DMatrix::zeros(reduced.len(), sub.len());
        for (r, &n) in reduced.iter().enumerate() {
            for (c, val) in ybus.row(n) {
                if let Some(s) = sub.iter().position(|&x| x == c) {
                    y_rs[(r, s)] = val;
                } else {
                    y_rr[(r, pos[c])] = val;
                }
            }
        }
        let lu = y_rr.lu();
        if !lu.is_invertible() {
            return Err(PowerFlowError::SingularReduced);
        }
        let flat = model.flat_profile();
        Ok(Self {
            num_nodes: k,
            reference: sub.iter().map(|&n| flat[n]).collect(),
            flat: flat.clone(),
            substation: sub,
            reduced,
            y_rs,
            lu,
            units: unit_terminals(model),
        })
    }

    /// Solves from the flat profile.
    pub fn solve(
        &self,
        scenario: &InjectionScenario,
        opts: PowerFlowOptions,
    ) -> Result<StateVector, PowerFlowError> {
        self.solve_from(scenario, opts, None)
    }

    /// Solves from an explicit initial guess (substation entries are reset to
    /// the reference).
    pub fn solve_from(
        &self,
        scenario: &InjectionScenario,
        opts: PowerFlowOptions,
        initial: Option<&StateVector>,
    ) -> Result<StateVector, PowerFlowError> {
        if !(opts.tol > 0.0) {
            return Err(PowerFlowError::BadTolerance);
        }
        if scenario.s.len() != self.units.len() {
            return Err(PowerFlowError::ScenarioShape {
                got: scenario.s.len(),
                expected: self.units.len(),
            });
        }
        let mut v: Vec<Complex64> = match initial {
            Some(init) if init.len() == self.num_nodes => init.as_slice().to_vec(),
            _ => self.flat.clone(),
        };
        for (k, &n) in self.substation.iter().enumerate() {
            v[n] = self.reference[k];
        }
        let v_s = DVector::from_vec(self.reference.clone());
        let source = &self.y_rs * &v_s;

        let mut residual = f64::INFINITY;
        for _ in 0..opts.max_iter {
            let i = injection_currents(&self.units, scenario, &v);
            let rhs = DVector::from_iterator(
                self.reduced.len(),
                self.reduced.iter().enumerate().map(|(r, &n)| i[n] - source[r]),
            );
            let v_r = self.lu.solve(&rhs).ok_or(PowerFlowError::SingularReduced)?;
            residual = 0.0;
            for (r, &n) in self.reduced.iter().enumerate() {
                residual = f64::max(residual, (v_r[r] - v[n]).norm());
                v[n] = v_r[r];
            }
            if !residual.is_finite() {
                break;
            }
            if let Some((node, mag)) = v
                .iter()
                .map(|c| c.norm())
                .enumerate()
                .find(|(_, m)| *m < COLLAPSE_VOLTAGE)
            {
                return Err(PowerFlowError::VoltageCollapse {
                    node,
                    magnitude: mag,
                });
            }
            if residual <= opts.tol {
                return Ok(StateVector::new(v));
            }
        }
        Err(PowerFlowError::NotConverged {
            iterations: opts.max_iter,
            residual,
        })
    }
}

/// Convenience wrapper: factorize and solve once.
pub fn solve_power_flow(
    model: &FeederModel,
    scenario: &InjectionScenario,
    tol: f64,
    max_iter: usize,
) -> Result<StateVector, PowerFlowError> {
    scenario.validate(model)?;
    PowerFlowSolver::new(model)?.solve(scenario, PowerFlowOptions { tol, max_iter })
}

/// Max over non-substation phase-nodes of `|v ∘ conj(Y v) − s_scheduled|`.
pub fn power_balance_residual(
    model: &FeederModel,
    v: &StateVector,
    scenario: &InjectionScenario,
) -> Result<f64, PowerFlowError> {
    scenario.validate(model)?;
    let ybus = model.bus_admittance()?;
    Ok(balance_residual_with(model, &ybus, v, scenario))
}

pub(crate) fn balance_residual_with(
    model: &FeederModel,
    ybus: &CsrMatrix,
    v: &StateVector,
    scenario: &InjectionScenario,
) -> f64 {
    let units = unit_terminals(model);
    let vs = v.as_slice();
    let i = ybus.mul_vec(vs);
    let scheduled = scheduled_node_power(&units, scenario, vs);
    let sub = model.substation_nodes();
    (0..vs.len())
        .filter(|n| !sub.contains(n))
        .map(|n| (vs[n] * i[n].conj() - scheduled[n]).norm())
        .fold(0.0, f64::max)
}

/// Per phase-node complex power drawn by the units at `v` (the delta mapping
/// used by the solver).
pub fn node_power(model: &FeederModel, v: &StateVector, scenario: &InjectionScenario) -> Vec<Complex64> {
    scheduled_node_power(&unit_terminals(model), scenario, v.as_slice())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioRow {
    t: usize,
    unit_id: usize,
    #[serde(rename = "P")]
    p: f64,
    #[serde(rename = "Q")]
    q: f64,
}

/// Writes scenarios as CSV with header `t,unit_id,P,Q`.
pub fn write_scenarios_csv<W: Write>(
    out: W,
    scenarios: &[InjectionScenario],
) -> Result<(), PowerFlowError> {
    let mut w = csv::Writer::from_writer(out);
    for (t, sc) in scenarios.iter().enumerate() {
        for (unit_id, s) in sc.s.iter().enumerate() {
            w.serialize(ScenarioRow {
                t,
                unit_id,
                p: s.re,
                q: s.im,
            })
            .map_err(|e| PowerFlowError::Csv(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads scenarios written by [`write_scenarios_csv`]. Every time instance
/// must cover each of the model's units exactly once.
pub fn read_scenarios_csv<R: Read>(
    input: R,
    model: &FeederModel,
) -> Result<Vec<InjectionScenario>, PowerFlowError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| PowerFlowError::Csv(e.to_string()))?
        .clone();
    let expected = ["t", "unit_id", "P", "Q"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(PowerFlowError::Csv(format!(
            "header must be {expected:?}, found {headers:?}"
        )));
    }
    let n_units = model.injections().len();
    let mut by_t: BTreeMap<usize, Vec<Option<Complex64>>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: ScenarioRow = row.map_err(|e| PowerFlowError::Csv(e.to_string()))?;
        if row.unit_id >= n_units {
            return Err(PowerFlowError::Csv(format!("unknown unit_id {}", row.unit_id)));
        }
        let slot = &mut by_t.entry(row.t).or_insert_with(|| vec![None; n_units])[row.unit_id];
        if slot.is_some() {
            return Err(PowerFlowError::Csv(format!(
                "unit {} repeated at t={}",
                row.unit_id, row.t
            )));
        }
        *slot = Some(Complex64::new(row.p, row.q));
    }
    by_t.into_iter()
        .map(|(t, units)| {
            let s = units
                .into_iter()
                .enumerate()
                .map(|(u, s)| {
                    s.ok_or_else(|| PowerFlowError::Csv(format!("unit {u} missing at t={t}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let sc = InjectionScenario { s };
            sc.validate(model)?;
            Ok(sc)
        })
        .collect()
}
