//! Multiphase feeder model: buses with phase sets, π-equivalent branches,
//! delta/wye injection units and switchable lines.
//!
//! Everything is in per-unit. The substation (bus 0 after parsing) is held at
//! a balanced reference `1∠0°, 1∠−120°, 1∠120°`. Phase-nodes are ordered
//! bus-major, then `a < b < c`; this ordering never changes when switches are
//! toggled.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sparse::CsrMatrix;

pub const FEEDER_SCHEMA: &str = "feeder/1";

/// Impedance matrices with a condition number above this are rejected.
pub const MAX_IMPEDANCE_CONDITION: f64 = 1e12;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("i/o error reading feeder document: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feeder document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema {found:?}, expected {FEEDER_SCHEMA:?}")]
    Schema { found: String },
    #[error("bus {0} declared twice")]
    DuplicateBus(u32),
    #[error("substation bus {0} is not declared")]
    MissingSubstation(u32),
    #[error("invalid phase list {0:?}")]
    BadPhases(String),
    #[error("branch {branch}: unknown bus {bus}")]
    UnknownBus { branch: String, bus: u32 },
    #[error("branch {branch}: {what} is not a square {n}x{n} matrix")]
    NonSquare {
        branch: String,
        what: &'static str,
        n: usize,
    },
    #[error("branch {branch}: phase {phase} not present at bus {bus}")]
    BranchPhase {
        branch: String,
        bus: u32,
        phase: Phase,
    },
    #[error("branch {0}: non-switchable branch must be closed")]
    OpenFixedBranch(String),
    #[error("branch id {0:?} used twice")]
    DuplicateBranch(String),
    #[error("injection at bus {bus}: {reason}")]
    BadInjection { bus: u32, reason: String },
    #[error("network disconnected under current switch states: buses {0:?} unreachable")]
    Disconnected(Vec<u32>),
    #[error("unknown branch {0:?}")]
    UnknownBranch(String),
    #[error("branch {0} is not switchable")]
    NotSwitchable(String),
    #[error("branch {branch}: impedance is singular (condition number {cond:.3e})")]
    SingularImpedance { branch: String, cond: f64 },
    #[error("branch {0} is open")]
    OpenBranch(String),
    #[error("bus {bus} has no phase {phase}")]
    MissingPhase { bus: u32, phase: Phase },
    #[error("unknown bus label {0}")]
    UnknownBusLabel(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }

    /// Balanced reference phasor for this phase.
    pub fn reference(self) -> Complex64 {
        let angle = -2.0 * std::f64::consts::PI / 3.0 * self.index() as f64;
        Complex64::from_polar(1.0, angle)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        };
        write!(f, "{c}")
    }
}

/// Parses `"abc"`, `"ca"`, ... into a sorted, duplicate-free phase list.
pub fn parse_phases(s: &str) -> Result<Vec<Phase>, FeederError> {
    let mut out = Vec::new();
    for ch in s.chars() {
        let p = Phase::from_char(ch).ok_or_else(|| FeederError::BadPhases(s.to_string()))?;
        if out.contains(&p) {
            return Err(FeederError::BadPhases(s.to_string()));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(FeederError::BadPhases(s.to_string()));
    }
    Ok(out)
}

fn sorted(mut phases: Vec<Phase>) -> Vec<Phase> {
    phases.sort();
    phases
}

/// A (bus, phase) pair; `bus` is the internal index (0 = substation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseId {
    pub bus: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// External label from the feeder document (e.g. 701).
    pub label: u32,
    pub phases: Vec<Phase>,
    /// Index of this bus's first phase-node in the state ordering.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub phases: Vec<Phase>,
    pub z: DMatrix<Complex64>,
    pub y_shunt: DMatrix<Complex64>,
    pub switchable: bool,
    pub closed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionKind {
    Load,
    Der,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connection {
    Wye,
    Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionUnit {
    pub bus: usize,
    pub kind: InjectionKind,
    pub connection: Connection,
    /// Delta: exactly two phases, ordered as written (`ca` means c→a).
    /// Wye: one or more phases sharing the unit's power equally.
    pub terminals: Vec<Phase>,
    /// Active power at unit multiplier, per-unit, positive magnitude.
    pub rating: f64,
    /// Reactive power at unit multiplier, per-unit, positive magnitude.
    pub rating_q: f64,
}

impl InjectionUnit {
    /// Complex injection at multiplier 1 (loads negative, DERs positive).
    pub fn base_injection(&self) -> Complex64 {
        let s = Complex64::new(self.rating, self.rating_q);
        match self.kind {
            InjectionKind::Load => -s,
            InjectionKind::Der => s,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BusDoc {
    pub id: u32,
    pub phases: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BranchDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub from: u32,
    pub to: u32,
    pub phases: String,
    #[serde(rename = "Z_real")]
    pub z_real: Vec<f64>,
    #[serde(rename = "Z_imag")]
    pub z_imag: Vec<f64>,
    #[serde(rename = "Ysh_real", default)]
    pub ysh_real: Vec<f64>,
    #[serde(rename = "Ysh_imag", default)]
    pub ysh_imag: Vec<f64>,
    #[serde(default)]
    pub switchable: bool,
    #[serde(default = "default_closed")]
    pub closed: bool,
}

fn default_closed() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InjectionDoc {
    pub bus: u32,
    pub kind: InjectionKind,
    pub connection: Connection,
    pub terminals: String,
    pub rating: f64,
    #[serde(default)]
    pub rating_q: f64,
}

/// Serialized form of a feeder (`"schema": "feeder/1"`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeederDocument {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<serde_json::Value>,
    pub substation: u32,
    pub buses: Vec<BusDoc>,
    pub branches: Vec<BranchDoc>,
    #[serde(default)]
    pub injections: Vec<InjectionDoc>,
}

/// Immutable validated feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    name: String,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    injections: Vec<InjectionUnit>,
    state_order: Vec<PhaseId>,
    fingerprint: [u8; 32],
}

fn matrix_from_doc(
    branch: &str,
    what: &'static str,
    n: usize,
    re: &[f64],
    im: &[f64],
    allow_empty: bool,
) -> Result<DMatrix<Complex64>, FeederError> {
    if allow_empty && re.is_empty() && im.is_empty() {
        return Ok(DMatrix::zeros(n, n));
    }
    if re.len() != n * n || im.len() != n * n {
        return Err(FeederError::NonSquare {
            branch: branch.to_string(),
            what,
            n,
        });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        Complex64::new(re[i * n + j], im[i * n + j])
    }))
}

/// Reads and validates a feeder document from disk.
pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    let text = std::fs::read_to_string(path)?;
    parse_feeder(&text)
}

/// Parses and validates a feeder document.
pub fn parse_feeder(text: &str) -> Result<FeederModel, FeederError> {
    let doc: FeederDocument = serde_json::from_str(text)?;
    FeederModel::from_document(&doc)
}

impl FeederModel {
    pub fn from_document(doc: &FeederDocument) -> Result<Self, FeederError> {
        if doc.schema != FEEDER_SCHEMA {
            return Err(FeederError::Schema {
                found: doc.schema.clone(),
            });
        }

        // substation first, remaining buses in document order
        let mut ordered: Vec<&BusDoc> = Vec::with_capacity(doc.buses.len());
        let sub = doc
            .buses
            .iter()
            .find(|b| b.id == doc.substation)
            .ok_or(FeederError::MissingSubstation(doc.substation))?;
        ordered.push(sub);
        ordered.extend(doc.buses.iter().filter(|b| b.id != doc.substation));

        let mut label_to_idx = HashMap::new();
        let mut buses = Vec::with_capacity(ordered.len());
        let mut state_order = Vec::new();
        for (idx, b) in ordered.iter().enumerate() {
            if label_to_idx.insert(b.id, idx).is_some() {
                return Err(FeederError::DuplicateBus(b.id));
            }
            let phases = sorted(parse_phases(&b.phases)?);
            let offset = state_order.len();
            state_order.extend(phases.iter().map(|&phase| PhaseId { bus: idx, phase }));
            buses.push(Bus {
                label: b.id,
                phases,
                offset,
            });
        }

        let mut branches = Vec::with_capacity(doc.branches.len());
        let mut seen_ids = HashMap::new();
        for bd in &doc.branches {
            let id = bd
                .id
                .clone()
                .unwrap_or_else(|| format!("{}-{}", bd.from, bd.to));
            if seen_ids.insert(id.clone(), ()).is_some() {
                return Err(FeederError::DuplicateBranch(id));
            }
            let lookup = |bus: u32| {
                label_to_idx
                    .get(&bus)
                    .copied()
                    .ok_or_else(|| FeederError::UnknownBus {
                        branch: id.clone(),
                        bus,
                    })
            };
            let from = lookup(bd.from)?;
            let to = lookup(bd.to)?;
            // Branch phases keep document order; it defines the row/column
            // order of Z and Ysh.
            let phases = parse_phases(&bd.phases)?;
            for &(bus, label) in &[(from, bd.from), (to, bd.to)] {
                for &p in &phases {
                    if !buses[bus].phases.contains(&p) {
                        return Err(FeederError::BranchPhase {
                            branch: id.clone(),
                            bus: label,
                            phase: p,
                        });
                    }
                }
            }
            let n = phases.len();
            let z = matrix_from_doc(&id, "Z", n, &bd.z_real, &bd.z_imag, false)?;
            let y_shunt = matrix_from_doc(&id, "Ysh", n, &bd.ysh_real, &bd.ysh_imag, true)?;
            if !bd.switchable && !bd.closed {
                return Err(FeederError::OpenFixedBranch(id));
            }
            branches.push(Branch {
                id,
                from,
                to,
                phases,
                z,
                y_shunt,
                switchable: bd.switchable,
                closed: bd.closed,
            });
        }

        let mut injections = Vec::with_capacity(doc.injections.len());
        for inj in &doc.injections {
            let bus = *label_to_idx
                .get(&inj.bus)
                .ok_or_else(|| FeederError::BadInjection {
                    bus: inj.bus,
                    reason: "unknown bus".into(),
                })?;
            let terminals = parse_phases(&inj.terminals)?;
            if inj.connection == Connection::Delta && terminals.len() != 2 {
                return Err(FeederError::BadInjection {
                    bus: inj.bus,
                    reason: format!("delta unit needs two distinct phases, got {:?}", inj.terminals),
                });
            }
            for &p in &terminals {
                if !buses[bus].phases.contains(&p) {
                    return Err(FeederError::BadInjection {
                        bus: inj.bus,
                        reason: format!("terminal phase {p} not present"),
                    });
                }
            }
            if !inj.rating.is_finite() || !inj.rating_q.is_finite() {
                return Err(FeederError::BadInjection {
                    bus: inj.bus,
                    reason: "non-finite rating".into(),
                });
            }
            injections.push(InjectionUnit {
                bus,
                kind: inj.kind,
                connection: inj.connection,
                terminals,
                rating: inj.rating,
                rating_q: inj.rating_q,
            });
        }

        let canonical = serde_json::to_vec(doc).expect("document serializes");
        let fingerprint: [u8; 32] = Sha256::digest(&canonical).into();

        let model = FeederModel {
            name: doc.name.clone(),
            buses,
            branches,
            injections,
            state_order,
            fingerprint,
        };
        model.check_connected()?;
        for b in model.branches.iter().filter(|b| b.closed) {
            branch_series_admittance(b)?;
        }
        Ok(model)
    }

    fn check_connected(&self) -> Result<(), FeederError> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for b in self.branches.iter().filter(|b| b.closed) {
            adj[b.from].push(b.to);
            adj[b.to].push(b.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        let unreached: Vec<u32> = seen
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(i, _)| self.buses[i].label)
            .collect();
        if unreached.is_empty() {
            Ok(())
        } else {
            Err(FeederError::Disconnected(unreached))
        }
    }

    /// Returns a copy with the given switch states applied. The receiver is
    /// untouched and the state ordering is preserved.
    pub fn set_switch_states(&self, states: &BTreeMap<String, bool>) -> Result<Self, FeederError> {
        let mut next = self.clone();
        for (id, &closed) in states {
            let branch = next
                .branches
                .iter_mut()
                .find(|b| &b.id == id)
                .ok_or_else(|| FeederError::UnknownBranch(id.clone()))?;
            if !branch.switchable {
                return Err(FeederError::NotSwitchable(id.clone()));
            }
            branch.closed = closed;
        }
        next.check_connected()?;
        for b in next.branches.iter().filter(|b| b.closed) {
            branch_series_admittance(b)?;
        }
        Ok(next)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn injections(&self) -> &[InjectionUnit] {
        &self.injections
    }

    pub fn state_order(&self) -> &[PhaseId] {
        &self.state_order
    }

    /// Number of phase-nodes K.
    pub fn num_nodes(&self) -> usize {
        self.state_order.len()
    }

    /// SHA-256 of the canonical document serialization.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn bus_index(&self, label: u32) -> Result<usize, FeederError> {
        self.buses
            .iter()
            .position(|b| b.label == label)
            .ok_or(FeederError::UnknownBusLabel(label))
    }

    pub fn branch_index(&self, id: &str) -> Result<usize, FeederError> {
        self.branches
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| FeederError::UnknownBranch(id.to_string()))
    }

    /// Position of (bus, phase) in the state ordering.
    pub fn node_index(&self, bus: usize, phase: Phase) -> Result<usize, FeederError> {
        let b = &self.buses[bus];
        b.phases
            .iter()
            .position(|&p| p == phase)
            .map(|k| b.offset + k)
            .ok_or(FeederError::MissingPhase {
                bus: b.label,
                phase,
            })
    }

    /// Substation phase-node indices in the state ordering.
    pub fn substation_nodes(&self) -> std::ops::Range<usize> {
        let b = &self.buses[0];
        b.offset..b.offset + b.phases.len()
    }

    /// Flat profile: every phase-node at its balanced reference phasor.
    pub fn flat_profile(&self) -> Vec<Complex64> {
        self.state_order.iter().map(|n| n.phase.reference()).collect()
    }

    /// Assembles the K×K bus admittance matrix. Each closed branch stamps
    /// `Y + Ysh/2` on both diagonal blocks and `−Y` off-diagonal.
    pub fn bus_admittance(&self) -> Result<CsrMatrix, FeederError> {
        let k = self.num_nodes();
        let mut trip = Vec::new();
        for br in self.branches.iter().filter(|b| b.closed) {
            let y = branch_series_admittance(br)?;
            let half = &br.y_shunt * Complex64::new(0.5, 0.0);
            let from: Vec<usize> = br
                .phases
                .iter()
                .map(|&p| self.node_index(br.from, p))
                .collect::<Result<_, _>>()?;
            let to: Vec<usize> = br
                .phases
                .iter()
                .map(|&p| self.node_index(br.to, p))
                .collect::<Result<_, _>>()?;
            for i in 0..br.phases.len() {
                for j in 0..br.phases.len() {
                    let self_term = y[(i, j)] + half[(i, j)];
                    trip.push((from[i], from[j], self_term));
                    trip.push((to[i], to[j], self_term));
                    trip.push((from[i], to[j], -y[(i, j)]));
                    trip.push((to[i], from[j], -y[(i, j)]));
                }
            }
        }
        Ok(CsrMatrix::from_triplets(k, k, trip))
    }

    /// Global state indices of a branch's from/to endpoints, per branch phase.
    pub fn branch_nodes(&self, branch: &Branch) -> (Vec<usize>, Vec<usize>) {
        let map = |bus| {
            branch
                .phases
                .iter()
                .map(|&p| self.node_index(bus, p).expect("validated at parse"))
                .collect()
        };
        (map(branch.from), map(branch.to))
    }
}

fn singular_values(m: &DMatrix<Complex64>) -> (f64, f64) {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (max, min)
}

/// Series admittance `Y = Z⁻¹` of a closed branch.
pub fn branch_series_admittance(branch: &Branch) -> Result<DMatrix<Complex64>, FeederError> {
    if !branch.closed {
        return Err(FeederError::OpenBranch(branch.id.clone()));
    }
    invert_impedance(&branch.id, &branch.z)
}

pub(crate) fn invert_impedance(
    id: &str,
    z: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>, FeederError> {
    let (max, min) = singular_values(z);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_IMPEDANCE_CONDITION) {
        return Err(FeederError::SingularImpedance {
            branch: id.to_string(),
            cond,
        });
    }
    z.clone()
        .try_inverse()
        .ok_or_else(|| FeederError::SingularImpedance {
            branch: id.to_string(),
            cond,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    pub(crate) const TWO_BUS: &str = r#"{
        "schema": "feeder/1",
        "substation": 1,
        "buses": [{"id": 1, "phases": "abc"}, {"id": 2, "phases": "a"}],
        "branches": [{"from": 1, "to": 2, "phases": "a",
                      "Z_real": [0.0], "Z_imag": [0.1]}]
    }"#;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn branch_with(z: DMatrix<Complex64>) -> Branch {
        let n = z.nrows();
        Branch {
            id: "t".into(),
            from: 0,
            to: 1,
            phases: Phase::ALL[..n].to_vec(),
            z,
            y_shunt: DMatrix::zeros(n, n),
            switchable: false,
            closed: true,
        }
    }

    #[test]
    fn minimal_document_parses() {
        let m = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(m.num_nodes(), 4);
        assert_eq!(m.buses().len(), 2);
        assert_eq!(m.node_index(1, Phase::A).unwrap(), 3);
        assert!(matches!(
            m.node_index(1, Phase::B),
            Err(FeederError::MissingPhase { bus: 2, .. })
        ));
    }

    #[test]
    fn single_phase_pair_has_two_nodes() {
        let doc = r#"{"schema": "feeder/1", "substation": 1,
            "buses": [{"id": 1, "phases": "abc"}, {"id": 2, "phases": "abc"}],
            "branches": [{"from": 1, "to": 2, "phases": "a", "Z_real": [0.0], "Z_imag": [0.1]},
                         {"from": 1, "to": 2, "phases": "bc", "Z_real": [0,0,0,0], "Z_imag": [0.1,0,0,0.1], "id": "x"}]}"#;
        let m = parse_feeder(doc).unwrap();
        assert_eq!(m.num_nodes(), 6);
    }

    #[test]
    fn unknown_bus_names_branch() {
        let doc = TWO_BUS.replace("\"to\": 2", "\"to\": 99");
        match parse_feeder(&doc) {
            Err(FeederError::UnknownBus { branch, bus }) => {
                assert_eq!(bus, 99);
                assert_eq!(branch, "1-99");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_square_impedance_is_rejected() {
        let doc = TWO_BUS.replace("\"Z_real\": [0.0]", "\"Z_real\": [0.0, 1.0]");
        assert!(matches!(
            parse_feeder(&doc),
            Err(FeederError::NonSquare { what: "Z", .. })
        ));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let doc = r#"{"schema": "feeder/1", "substation": 1,
            "buses": [{"id": 1, "phases": "abc"}, {"id": 2, "phases": "a"}, {"id": 3, "phases": "a"}],
            "branches": [{"from": 1, "to": 2, "phases": "a", "Z_real": [0.0], "Z_imag": [0.1]}]}"#;
        assert!(matches!(
            parse_feeder(doc),
            Err(FeederError::Disconnected(ref v)) if v == &vec![3]
        ));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let doc = TWO_BUS.replace("feeder/1", "feeder/2");
        assert!(matches!(parse_feeder(&doc), Err(FeederError::Schema { .. })));
    }

    #[test]
    fn series_admittance_scalar() {
        let y = branch_series_admittance(&branch_with(DMatrix::from_element(1, 1, c(0.0, 0.1))))
            .unwrap();
        assert!((y[(0, 0)] - c(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn series_admittance_identity() {
        let y = branch_series_admittance(&branch_with(DMatrix::identity(3, 3))).unwrap();
        assert!((y - DMatrix::<Complex64>::identity(3, 3)).camax() < 1e-15);
    }

    #[test]
    fn series_admittance_multiplies_back() {
        // well-conditioned, symmetric 3x3 line impedance
        let z = DMatrix::from_row_slice(
            3,
            3,
            &[
                c(0.21, 0.62),
                c(0.05, 0.28),
                c(0.04, 0.24),
                c(0.05, 0.28),
                c(0.20, 0.65),
                c(0.05, 0.27),
                c(0.04, 0.24),
                c(0.05, 0.27),
                c(0.21, 0.63),
            ],
        );
        let y = branch_series_admittance(&branch_with(z.clone())).unwrap();
        let err = (&y * &z - DMatrix::<Complex64>::identity(3, 3)).camax();
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn singular_impedance_is_rejected() {
        let z = DMatrix::from_row_slice(2, 2, &[c(1.0, 1.0), c(1.0, 1.0), c(1.0, 1.0), c(1.0, 1.0)]);
        assert!(matches!(
            branch_series_admittance(&branch_with(z)),
            Err(FeederError::SingularImpedance { .. })
        ));
    }

    #[test]
    fn two_bus_stamp() {
        let m = parse_feeder(TWO_BUS).unwrap();
        let y = m.bus_admittance().unwrap();
        let ys = c(0.0, -10.0);
        assert!((y.get(0, 0) - ys).norm() < 1e-12);
        assert!((y.get(3, 3) - ys).norm() < 1e-12);
        assert!((y.get(0, 3) + ys).norm() < 1e-12);
        assert!((y.get(3, 0) + ys).norm() < 1e-12);
        assert_eq!(y.get(1, 1), c(0.0, 0.0));
    }

    #[test]
    fn flat_profile_has_no_current_without_shunts() {
        let doc = r#"{"schema": "feeder/1", "substation": 1,
            "buses": [{"id": 1, "phases": "abc"}, {"id": 2, "phases": "abc"}, {"id": 3, "phases": "abc"}],
            "branches": [
              {"from": 1, "to": 2, "phases": "abc", "Z_real": [0.1,0.02,0.02,0.02,0.1,0.02,0.02,0.02,0.1], "Z_imag": [0.3,0.1,0.1,0.1,0.3,0.1,0.1,0.1,0.3]},
              {"from": 2, "to": 3, "phases": "abc", "Z_real": [0.1,0.02,0.02,0.02,0.1,0.02,0.02,0.02,0.1], "Z_imag": [0.3,0.1,0.1,0.1,0.3,0.1,0.1,0.1,0.3]}]}"#;
        let m = parse_feeder(doc).unwrap();
        let i = m.bus_admittance().unwrap().mul_vec(&m.flat_profile());
        for node in 3..9 {
            assert!(i[node].norm() < 1e-12);
        }
    }
}
