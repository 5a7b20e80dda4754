//! Measurements as quadratic forms of the complex state.
//!
//! Every measurement function has the shape
//!
//! ```text
//! h(v) = v̄ᵀ D v + cᵀ v + c̄ᵀ v̄
//! ```
//!
//! with `D` Hermitian, so `h` is real for every `v`. Phasor measurements are
//! linear (`D = 0`); magnitudes, flows and injections are quadratic (`c = 0`).
//! Magnitude readings are squared before use; the squared reading gets
//! `σ' = 2·|z_mag|·σ` (first-order delta rule).
//!
//! Besides the observed measurements a set may carry *structural*
//! constraints: exact zero-valued linear functions that encode which current
//! injections the feeder's connection pattern allows at each bus (no unit on a
//! phase, no neutral for delta units). They are part of the network model,
//! not observations, so they are excluded from the observed vector `z` and
//! from the network input layout.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feeder::{
    branch_series_admittance, Connection, FeederError, FeederModel, Phase,
};
use crate::sparse::CsrMatrix;

pub const MEASUREMENT_SCHEMA: &str = "measurements/1";

/// Shipped measurement configuration for the IEEE-37 fixture.
pub const IEEE37_MEASUREMENTS: &str = include_str!("../fixtures/ieee37_measurements.json");

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("phase {phase} is not carried by branch {branch}")]
    BranchPhase { branch: String, phase: Phase },
    #[error("state has {got} phase-nodes, measurement expects {expected}")]
    Shape { got: usize, expected: usize },
    #[error("measurement vector has not been filled")]
    Unfilled,
    #[error("measurement vector has {got} entries, set has {expected} functions")]
    VectorLength { got: usize, expected: usize },
    #[error("model is not the IEEE-37 fixture: {0}")]
    WrongFixture(String),
    #[error("measurement configuration: {0}")]
    Config(String),
    #[error("malformed measurement configuration: {0}")]
    Json(#[from] serde_json::Error),
    #[error("evaluation has imaginary residue {0:.3e}")]
    NotReal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    VRe,
    VIm,
    IRe,
    IIm,
    VmagSq,
    ImagSq,
    PFlow,
    QFlow,
    PInj,
    QInj,
    /// Real part of a structural zero-current constraint.
    ZeroCurrentRe,
    /// Imaginary part of a structural zero-current constraint.
    ZeroCurrentIm,
}

impl MeasurementKind {
    pub fn is_squared_magnitude(self) -> bool {
        matches!(self, MeasurementKind::VmagSq | MeasurementKind::ImagSq)
    }

    fn tag(self) -> &'static str {
        match self {
            MeasurementKind::VRe => "v_re",
            MeasurementKind::VIm => "v_im",
            MeasurementKind::IRe => "i_re",
            MeasurementKind::IIm => "i_im",
            MeasurementKind::VmagSq => "vmag_sq",
            MeasurementKind::ImagSq => "imag_sq",
            MeasurementKind::PFlow => "p_flow",
            MeasurementKind::QFlow => "q_flow",
            MeasurementKind::PInj => "p_inj",
            MeasurementKind::QInj => "q_inj",
            MeasurementKind::ZeroCurrentRe => "zero_i_re",
            MeasurementKind::ZeroCurrentIm => "zero_i_im",
        }
    }
}

/// What a measurement looks at. Bus values are external labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Node { bus: u32, phase: Phase },
    BranchPhase { branch: String, phase: Phase },
    /// Aggregate over all phases of a bus.
    Bus { bus: u32 },
    /// k-th structural constraint of a bus.
    Constraint { bus: u32, index: usize },
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node { bus, phase } => write!(f, "{bus}.{phase}"),
            Target::BranchPhase { branch, phase } => write!(f, "{branch}.{phase}"),
            Target::Bus { bus } => write!(f, "{bus}"),
            Target::Constraint { bus, index } => write!(f, "{bus}#{index}"),
        }
    }
}

/// One measurement function in canonical quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFn {
    pub kind: MeasurementKind,
    pub target: Target,
    /// Sparse Hermitian `D` as sorted (row, col, value) entries, both
    /// triangles stored.
    pub d: Vec<(usize, usize, Complex64)>,
    /// Sparse `c` as sorted (index, value) entries.
    pub c: Vec<(usize, Complex64)>,
    /// Noise standard deviation of the value this function predicts.
    pub sigma: f64,
    /// `σ⁻²`.
    pub weight: f64,
    /// For squared magnitudes: standard deviation of the raw magnitude reading.
    pub sigma_mag: Option<f64>,
    pub is_pseudo: bool,
    num_nodes: usize,
}

fn collect_d(map: BTreeMap<(usize, usize), Complex64>) -> Vec<(usize, usize, Complex64)> {
    map.into_iter()
        .filter(|(_, v)| *v != Complex64::new(0.0, 0.0))
        .map(|((i, j), v)| (i, j, v))
        .collect()
}

fn collect_c(map: BTreeMap<usize, Complex64>) -> Vec<(usize, Complex64)> {
    map.into_iter()
        .filter(|(_, v)| *v != Complex64::new(0.0, 0.0))
        .collect()
}

const HALF: Complex64 = Complex64::new(0.5, 0.0);
/// `1/(2j)`
const HALF_OVER_J: Complex64 = Complex64::new(0.0, -0.5);

impl MeasurementFn {
    fn new(
        kind: MeasurementKind,
        target: Target,
        d: Vec<(usize, usize, Complex64)>,
        c: Vec<(usize, Complex64)>,
        sigma: f64,
        num_nodes: usize,
    ) -> Self {
        Self {
            kind,
            target,
            d,
            c,
            sigma,
            weight: sigma.powi(-2),
            sigma_mag: None,
            is_pseudo: false,
            num_nodes,
        }
    }

    /// Linear function `Re/Im` of the complex functional `aᵀv`.
    fn linear_parts(
        re_kind: MeasurementKind,
        im_kind: MeasurementKind,
        target: Target,
        a: &BTreeMap<usize, Complex64>,
        sigma: f64,
        num_nodes: usize,
    ) -> (Self, Self) {
        let scale = |s: Complex64| collect_c(a.iter().map(|(&i, &v)| (i, v * s)).collect());
        (
            Self::new(re_kind, target.clone(), Vec::new(), scale(HALF), sigma, num_nodes),
            Self::new(im_kind, target, Vec::new(), scale(HALF_OVER_J), sigma, num_nodes),
        )
    }

    /// Active and reactive parts of `v_k · conj(aᵀv)`, summed over `terms`.
    fn power_parts(
        p_kind: MeasurementKind,
        q_kind: MeasurementKind,
        target: Target,
        terms: &[(usize, BTreeMap<usize, Complex64>)],
        sigma: f64,
        num_nodes: usize,
    ) -> (Self, Self) {
        // s = Σ vᴴ M v with M = ā e_kᵀ; p = vᴴ (M + Mᴴ)/2 v, q = vᴴ (M − Mᴴ)/(2j) v
        let mut dp = BTreeMap::new();
        let mut dq = BTreeMap::new();
        for (k, a) in terms {
            for (&j, &aj) in a {
                let m_jk = aj.conj();
                let m_kj_h = aj; // (Mᴴ)_{kj} = conj(M_{jk})
                *dp.entry((j, *k)).or_insert(Complex64::new(0.0, 0.0)) += m_jk * HALF;
                *dp.entry((*k, j)).or_insert(Complex64::new(0.0, 0.0)) += m_kj_h * HALF;
                *dq.entry((j, *k)).or_insert(Complex64::new(0.0, 0.0)) += m_jk * HALF_OVER_J;
                *dq.entry((*k, j)).or_insert(Complex64::new(0.0, 0.0)) -= m_kj_h * HALF_OVER_J;
            }
        }
        (
            Self::new(p_kind, target.clone(), collect_d(dp), Vec::new(), sigma, num_nodes),
            Self::new(q_kind, target, collect_d(dq), Vec::new(), sigma, num_nodes),
        )
    }

    fn squared_magnitude(
        kind: MeasurementKind,
        target: Target,
        a: &BTreeMap<usize, Complex64>,
        sigma_mag: f64,
        num_nodes: usize,
    ) -> Self {
        // |aᵀv|² = vᴴ (ā aᵀ) v
        let mut d = BTreeMap::new();
        for (&j, &aj) in a {
            for (&k, &ak) in a {
                *d.entry((j, k)).or_insert(Complex64::new(0.0, 0.0)) += aj.conj() * ak;
            }
        }
        let mut f = Self::new(kind, target, collect_d(d), Vec::new(), 2.0 * sigma_mag, num_nodes);
        f.sigma_mag = Some(sigma_mag);
        f
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Stable textual identity used for ordering fingerprints.
    pub fn descriptor(&self) -> String {
        format!("{}@{}", self.kind.tag(), self.target)
    }

    fn check_shape(&self, v: &[Complex64]) -> Result<(), MeasurementError> {
        if v.len() != self.num_nodes {
            return Err(MeasurementError::Shape {
                got: v.len(),
                expected: self.num_nodes,
            });
        }
        Ok(())
    }

    /// `v̄ᵀDv + cᵀv + c̄ᵀv̄` in complex arithmetic.
    pub fn evaluate_complex(&self, v: &[Complex64]) -> Result<Complex64, MeasurementError> {
        self.check_shape(v)?;
        Ok(self.eval_complex_unchecked(v))
    }

    fn eval_complex_unchecked(&self, v: &[Complex64]) -> Complex64 {
        let quad: Complex64 = self.d.iter().map(|&(i, j, d)| v[i].conj() * d * v[j]).sum();
        let lin: Complex64 = self
            .c
            .iter()
            .map(|&(i, c)| c * v[i] + c.conj() * v[i].conj())
            .sum();
        quad + lin
    }

    /// Real value of the measurement at `v`. The imaginary residue of the
    /// complex evaluation must be at rounding level.
    pub fn evaluate(&self, v: &[Complex64]) -> Result<f64, MeasurementError> {
        let h = self.evaluate_complex(v)?;
        let scale: f64 = 1.0
            + self
                .d
                .iter()
                .map(|&(i, j, d)| v[i].norm() * d.norm() * v[j].norm())
                .sum::<f64>()
            + self.c.iter().map(|&(i, c)| 2.0 * c.norm() * v[i].norm()).sum::<f64>();
        if h.im.abs() > 1e-12 * scale {
            return Err(MeasurementError::NotReal(h.im));
        }
        Ok(h.re)
    }

    pub(crate) fn eval_unchecked(&self, v: &[Complex64]) -> f64 {
        let quad: f64 = self
            .d
            .iter()
            .map(|&(i, j, d)| (v[i].conj() * d * v[j]).re)
            .sum();
        let lin: f64 = self.c.iter().map(|&(i, c)| 2.0 * (c * v[i]).re).sum();
        quad + lin
    }

    /// Gradient with respect to `x = [Re v; Im v]`: with `u = 2(Dv + c̄)`,
    /// the row is `[Re u; Im u]`.
    pub fn jacobian_row(&self, v: &[Complex64]) -> Result<Vec<f64>, MeasurementError> {
        self.check_shape(v)?;
        let mut row = vec![0.0; 2 * self.num_nodes];
        self.jacobian_row_into(v, &mut row);
        Ok(row)
    }

    /// Adds the gradient into a zeroed row of length 2K.
    pub(crate) fn jacobian_row_into(&self, v: &[Complex64], row: &mut [f64]) {
        let k = self.num_nodes;
        for &(i, j, d) in &self.d {
            let u = 2.0 * d * v[j];
            row[i] += u.re;
            row[k + i] += u.im;
        }
        for &(i, c) in &self.c {
            let u = 2.0 * c.conj();
            row[i] += u.re;
            row[k + i] += u.im;
        }
    }

    /// `max |D − Dᴴ|`.
    pub fn hermitian_defect(&self) -> f64 {
        let lookup: BTreeMap<(usize, usize), Complex64> =
            self.d.iter().map(|&(i, j, v)| ((i, j), v)).collect();
        self.d
            .iter()
            .map(|&(i, j, v)| {
                let t = lookup.get(&(j, i)).copied().unwrap_or_default();
                (v - t.conj()).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Sets the effective σ of a squared-magnitude function from a raw
    /// magnitude reading. Readings below `σ_mag` are floored to keep the
    /// weight finite.
    fn apply_magnitude_reading(&mut self, z_mag: f64) {
        if let Some(sm) = self.sigma_mag {
            self.sigma = 2.0 * z_mag.abs().max(sm) * sm;
            self.weight = self.sigma.powi(-2);
        }
    }
}

fn unit(i: usize) -> BTreeMap<usize, Complex64> {
    BTreeMap::from([(i, Complex64::new(1.0, 0.0))])
}

/// Row φ of the branch series admittance spread over the global state:
/// `i_{lm,φ} = aᵀv` with `a = [y_φ on v_l, −y_φ on v_m]`.
fn branch_current_functional(
    model: &FeederModel,
    branch_id: &str,
    phase: Phase,
) -> Result<BTreeMap<usize, Complex64>, MeasurementError> {
    let br = &model.branches()[model.branch_index(branch_id)?];
    let y = branch_series_admittance(br)?;
    let row = br
        .phases
        .iter()
        .position(|&p| p == phase)
        .ok_or_else(|| MeasurementError::BranchPhase {
            branch: branch_id.to_string(),
            phase,
        })?;
    let (from, to) = model.branch_nodes(br);
    let mut a = BTreeMap::new();
    for col in 0..br.phases.len() {
        *a.entry(from[col]).or_insert(Complex64::new(0.0, 0.0)) += y[(row, col)];
        *a.entry(to[col]).or_insert(Complex64::new(0.0, 0.0)) -= y[(row, col)];
    }
    Ok(a)
}

fn ybus_row(ybus: &CsrMatrix, node: usize) -> BTreeMap<usize, Complex64> {
    ybus.row(node).collect()
}

/// Real and imaginary parts of the voltage phasor at (bus, phase).
pub fn mk_voltage_phasor(
    model: &FeederModel,
    bus: u32,
    phase: Phase,
    sigma: f64,
) -> Result<(MeasurementFn, MeasurementFn), MeasurementError> {
    let node = model.node_index(model.bus_index(bus)?, phase)?;
    Ok(MeasurementFn::linear_parts(
        MeasurementKind::VRe,
        MeasurementKind::VIm,
        Target::Node { bus, phase },
        &unit(node),
        sigma,
        model.num_nodes(),
    ))
}

/// Real and imaginary parts of the series current on one phase of a branch.
pub fn mk_current_phasor(
    model: &FeederModel,
    branch: &str,
    phase: Phase,
    sigma: f64,
) -> Result<(MeasurementFn, MeasurementFn), MeasurementError> {
    let a = branch_current_functional(model, branch, phase)?;
    Ok(MeasurementFn::linear_parts(
        MeasurementKind::IRe,
        MeasurementKind::IIm,
        Target::BranchPhase {
            branch: branch.to_string(),
            phase,
        },
        &a,
        sigma,
        model.num_nodes(),
    ))
}

/// Squared magnitude of the series current on one branch phase.
pub fn mk_current_mag_sq(
    model: &FeederModel,
    branch: &str,
    phase: Phase,
    sigma_mag: f64,
) -> Result<MeasurementFn, MeasurementError> {
    let a = branch_current_functional(model, branch, phase)?;
    Ok(MeasurementFn::squared_magnitude(
        MeasurementKind::ImagSq,
        Target::BranchPhase {
            branch: branch.to_string(),
            phase,
        },
        &a,
        sigma_mag,
        model.num_nodes(),
    ))
}

/// Squared voltage magnitude at (bus, phase).
pub fn mk_vmag_sq(
    model: &FeederModel,
    bus: u32,
    phase: Phase,
    sigma_mag: f64,
) -> Result<MeasurementFn, MeasurementError> {
    let node = model.node_index(model.bus_index(bus)?, phase)?;
    Ok(MeasurementFn::squared_magnitude(
        MeasurementKind::VmagSq,
        Target::Node { bus, phase },
        &unit(node),
        sigma_mag,
        model.num_nodes(),
    ))
}

/// Active and reactive power entering a branch at its from-end on one phase,
/// `s = v_{l,φ} · conj(i_{lm,φ})`, series admittance only.
pub fn mk_branch_power(
    model: &FeederModel,
    branch: &str,
    phase: Phase,
    sigma: f64,
) -> Result<(MeasurementFn, MeasurementFn), MeasurementError> {
    let a = branch_current_functional(model, branch, phase)?;
    let br = &model.branches()[model.branch_index(branch)?];
    let k = model.node_index(br.from, phase)?;
    Ok(MeasurementFn::power_parts(
        MeasurementKind::PFlow,
        MeasurementKind::QFlow,
        Target::BranchPhase {
            branch: branch.to_string(),
            phase,
        },
        &[(k, a)],
        sigma,
        model.num_nodes(),
    ))
}

/// Net per-phase injection `s_{n,φ} = v_{n,φ} · conj((Y_bus v)_{n,φ})`.
pub fn mk_injection_pseudo(
    model: &FeederModel,
    bus: u32,
    phase: Phase,
    sigma: f64,
) -> Result<(MeasurementFn, MeasurementFn), MeasurementError> {
    let ybus = model.bus_admittance()?;
    let node = model.node_index(model.bus_index(bus)?, phase)?;
    let (mut p, mut q) = MeasurementFn::power_parts(
        MeasurementKind::PInj,
        MeasurementKind::QInj,
        Target::Node { bus, phase },
        &[(node, ybus_row(&ybus, node))],
        sigma,
        model.num_nodes(),
    );
    p.is_pseudo = true;
    q.is_pseudo = true;
    Ok((p, q))
}

/// Net injection summed over every phase of a bus (the aggregate a load or
/// generation forecast provides).
pub fn mk_bus_injection_pseudo(
    model: &FeederModel,
    ybus: &CsrMatrix,
    bus: u32,
    sigma: f64,
) -> Result<(MeasurementFn, MeasurementFn), MeasurementError> {
    let b = model.bus_index(bus)?;
    let terms: Vec<_> = model.buses()[b]
        .phases
        .iter()
        .map(|&p| {
            let node = model.node_index(b, p)?;
            Ok((node, ybus_row(ybus, node)))
        })
        .collect::<Result<_, MeasurementError>>()?;
    let (mut p, mut q) = MeasurementFn::power_parts(
        MeasurementKind::PInj,
        MeasurementKind::QInj,
        Target::Bus { bus },
        &terms,
        sigma,
        model.num_nodes(),
    );
    p.is_pseudo = true;
    q.is_pseudo = true;
    Ok((p, q))
}

/// Orthonormal basis of the complement of `span(vectors)` in `R^m`.
fn complement_basis(vectors: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let orthonormalize = |v: &[f64], basis: &mut Vec<Vec<f64>>| -> Option<Vec<f64>> {
        let mut w = v.to_vec();
        for _ in 0..2 {
            for b in basis.iter() {
                let dot: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= dot * bi;
                }
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-9).then(|| w.iter().map(|x| x / n).collect())
    };
    for v in vectors {
        if let Some(b) = orthonormalize(v, &mut basis) {
            basis.push(b);
        }
    }
    let span = basis.len();
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        if let Some(b) = orthonormalize(&e, &mut basis) {
            basis.push(b);
        }
    }
    basis.split_off(span)
}

/// Exact linear constraints on the nodal current injections implied by the
/// units connected at each non-substation bus. A bus with no units has zero
/// current on every phase; a bus with only delta units has no net current.
pub fn structural_constraints(
    model: &FeederModel,
    ybus: &CsrMatrix,
    sigma: f64,
) -> Result<Vec<MeasurementFn>, MeasurementError> {
    let mut out = Vec::new();
    for (b, bus) in model.buses().iter().enumerate().skip(1) {
        let m = bus.phases.len();
        let pos = |p: Phase| bus.phases.iter().position(|&x| x == p).expect("validated");
        let mut span = Vec::new();
        for u in model.injections().iter().filter(|u| u.bus == b) {
            match u.connection {
                Connection::Delta => {
                    let mut v = vec![0.0; m];
                    v[pos(u.terminals[0])] = 1.0;
                    v[pos(u.terminals[1])] = -1.0;
                    span.push(v);
                }
                Connection::Wye => {
                    for &p in &u.terminals {
                        let mut v = vec![0.0; m];
                        v[pos(p)] = 1.0;
                        span.push(v);
                    }
                }
            }
        }
        for (index, w) in complement_basis(&span, m).into_iter().enumerate() {
            let mut a: BTreeMap<usize, Complex64> = BTreeMap::new();
            for (k, &p) in bus.phases.iter().enumerate() {
                if w[k].abs() < 1e-15 {
                    continue;
                }
                let node = model.node_index(b, p)?;
                for (col, y) in ybus.row(node) {
                    *a.entry(col).or_insert(Complex64::new(0.0, 0.0)) += y * w[k];
                }
            }
            let (re, im) = MeasurementFn::linear_parts(
                MeasurementKind::ZeroCurrentRe,
                MeasurementKind::ZeroCurrentIm,
                Target::Constraint {
                    bus: bus.label,
                    index,
                },
                &a,
                sigma,
                model.num_nodes(),
            );
            out.push(re);
            out.push(im);
        }
    }
    Ok(out)
}

/// Ordered measurement functions with their observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub fns: Vec<MeasurementFn>,
    /// Structural zero-valued constraints, appended to the WLS problem.
    pub structural: Vec<MeasurementFn>,
    z: Option<Vec<f64>>,
    num_nodes: usize,
}

impl MeasurementSet {
    pub fn new(num_nodes: usize, fns: Vec<MeasurementFn>, structural: Vec<MeasurementFn>) -> Self {
        Self {
            fns,
            structural,
            z: None,
            num_nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn z(&self) -> Option<&[f64]> {
        self.z.as_deref()
    }

    pub fn z_filled(&self) -> Result<&[f64], MeasurementError> {
        self.z.as_deref().ok_or(MeasurementError::Unfilled)
    }

    /// Attaches observed values. Squared-magnitude entries are given as
    /// squared values; their σ is refreshed from `sqrt(z)`.
    pub fn with_z(mut self, z: Vec<f64>) -> Result<Self, MeasurementError> {
        if z.len() != self.fns.len() {
            return Err(MeasurementError::VectorLength {
                got: z.len(),
                expected: self.fns.len(),
            });
        }
        for (f, &zl) in self.fns.iter_mut().zip(&z) {
            if f.kind.is_squared_magnitude() {
                f.apply_magnitude_reading(zl.max(0.0).sqrt());
            }
        }
        self.z = Some(z);
        Ok(self)
    }

    /// Noise-free observation of `v`.
    pub fn noiseless(&self, v: &[Complex64]) -> Result<Self, MeasurementError> {
        self.synthesize(v, None)
    }

    /// `z_ℓ = h_ℓ(v) + ξ_ℓ`, `ξ_ℓ ~ N(0, σ_ℓ²)`, deterministic in `seed`.
    /// Magnitude readings get their noise on the magnitude, then are squared.
    pub fn synthesize_measurements(&self, v_true: &[Complex64], seed: u64) -> Result<Self, MeasurementError> {
        self.synthesize(v_true, Some(seed))
    }

    fn synthesize(&self, v: &[Complex64], seed: Option<u64>) -> Result<Self, MeasurementError> {
        if v.len() != self.num_nodes {
            return Err(MeasurementError::Shape {
                got: v.len(),
                expected: self.num_nodes,
            });
        }
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let mut out = self.clone();
        let mut z = Vec::with_capacity(self.fns.len());
        for f in out.fns.iter_mut() {
            let h = f.eval_unchecked(v);
            let mut draw = || -> f64 {
                match rng.as_mut() {
                    Some(r) => StandardNormal.sample(r),
                    None => 0.0,
                }
            };
            match f.sigma_mag {
                Some(sm) => {
                    let mag = h.max(0.0).sqrt() + sm * draw();
                    f.apply_magnitude_reading(mag);
                    z.push(mag * mag);
                }
                None => z.push(h + f.sigma * draw()),
            }
        }
        out.z = Some(z);
        Ok(out)
    }

    /// All functions entering the WLS problem: observed ones, then structural.
    pub fn wls_functions(&self) -> impl Iterator<Item = &MeasurementFn> {
        self.fns.iter().chain(self.structural.iter())
    }

    /// Observed values followed by zeros for the structural constraints.
    pub fn wls_targets(&self) -> Result<Vec<f64>, MeasurementError> {
        let z = self.z_filled()?;
        Ok(z.iter()
            .copied()
            .chain(std::iter::repeat(0.0).take(self.structural.len()))
            .collect())
    }

    pub fn descriptors(&self) -> Vec<String> {
        self.fns.iter().map(MeasurementFn::descriptor).collect()
    }

    /// Positions of voltage-phasor pairs: (node, index of re fn, index of im fn).
    pub fn voltage_phasor_slots(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, f) in self.fns.iter().enumerate() {
            if f.kind != MeasurementKind::VRe {
                continue;
            }
            let node = f.c[0].0;
            if let Some(j) = self.fns.iter().position(|g| {
                g.kind == MeasurementKind::VIm && g.target == f.target
            }) {
                out.push((node, i, j));
            }
        }
        out
    }
}

/// SHA-256 over the feeder fingerprint and the measurement ordering.
pub fn set_fingerprint(model: &FeederModel, set: &MeasurementSet) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(model.fingerprint());
    for f in set.wls_functions() {
        h.update(f.descriptor().as_bytes());
        h.update(b"\n");
    }
    h.finalize().into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SigmaConfig {
    #[serde(default = "d_pmu")]
    pub pmu: f64,
    #[serde(default = "d_cm")]
    pub current_magnitude: f64,
    #[serde(default = "d_vm")]
    pub voltage_magnitude: f64,
    #[serde(default = "d_flow")]
    pub power_flow: f64,
    #[serde(default = "d_pseudo")]
    pub pseudo: f64,
    #[serde(default = "d_structural")]
    pub structural: f64,
}

fn d_pmu() -> f64 {
    1e-3
}
fn d_cm() -> f64 {
    1e-2
}
fn d_vm() -> f64 {
    1e-2
}
fn d_flow() -> f64 {
    1e-2
}
fn d_pseudo() -> f64 {
    1e-1
}
fn d_structural() -> f64 {
    1e-4
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self {
            pmu: d_pmu(),
            current_magnitude: d_cm(),
            voltage_magnitude: d_vm(),
            power_flow: d_flow(),
            pseudo: d_pseudo(),
            structural: d_structural(),
        }
    }
}

/// Measurement placement (`"schema": "measurements/1"`). Within each class
/// entries are emitted in listed order; classes are emitted PMU phasors,
/// current magnitudes, voltage magnitudes, active flows, pseudo-measurements.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasurementConfig {
    pub schema: String,
    #[serde(default)]
    pub pmu_buses: Vec<u32>,
    #[serde(default)]
    pub current_magnitude_branches: Vec<String>,
    #[serde(default)]
    pub voltage_magnitude_buses: Vec<u32>,
    #[serde(default)]
    pub active_flow_branches: Vec<String>,
    #[serde(default)]
    pub pseudo_buses: Vec<u32>,
    #[serde(default)]
    pub sigma: SigmaConfig,
    #[serde(default = "default_true")]
    pub structural_constraints: bool,
    /// Buses whose phase-`a` angle is pinned to zero by an exact constraint.
    #[serde(default)]
    pub reference_angle_buses: Vec<u32>,
}

fn default_true() -> bool {
    true
}

impl MeasurementConfig {
    pub fn parse(text: &str) -> Result<Self, MeasurementError> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema != MEASUREMENT_SCHEMA {
            return Err(MeasurementError::Config(format!(
                "unsupported schema {:?}",
                cfg.schema
            )));
        }
        Ok(cfg)
    }

    pub fn ieee37() -> Self {
        Self::parse(IEEE37_MEASUREMENTS).expect("shipped measurement config is valid")
    }
}

/// Builds the measurement set described by `cfg` on `model`. Branches that
/// are open under the model's switch states are rejected.
pub fn build_measurement_set(
    model: &FeederModel,
    cfg: &MeasurementConfig,
) -> Result<MeasurementSet, MeasurementError> {
    let ybus = model.bus_admittance()?;
    let mut fns = Vec::new();
    let s = &cfg.sigma;
    for &bus in &cfg.pmu_buses {
        let b = model.bus_index(bus)?;
        for &p in &model.buses()[b].phases {
            let (re, im) = mk_voltage_phasor(model, bus, p, s.pmu)?;
            fns.push(re);
            fns.push(im);
        }
    }
    for id in &cfg.current_magnitude_branches {
        let br = &model.branches()[model.branch_index(id)?];
        for &p in &br.phases.clone() {
            fns.push(mk_current_mag_sq(model, id, p, s.current_magnitude)?);
        }
    }
    for &bus in &cfg.voltage_magnitude_buses {
        let b = model.bus_index(bus)?;
        for &p in &model.buses()[b].phases {
            fns.push(mk_vmag_sq(model, bus, p, s.voltage_magnitude)?);
        }
    }
    for id in &cfg.active_flow_branches {
        let br = &model.branches()[model.branch_index(id)?];
        for &p in &br.phases.clone() {
            fns.push(mk_branch_power(model, id, p, s.power_flow)?.0);
        }
    }
    for &bus in &cfg.pseudo_buses {
        let (p, q) = mk_bus_injection_pseudo(model, &ybus, bus, s.pseudo)?;
        fns.push(p);
        fns.push(q);
    }

    let mut structural = if cfg.structural_constraints {
        structural_constraints(model, &ybus, s.structural)?
    } else {
        Vec::new()
    };
    for &bus in &cfg.reference_angle_buses {
        let b = model.bus_index(bus)?;
        let phase = model.buses()[b].phases[0];
        let (_, mut im) = mk_voltage_phasor(model, bus, phase, s.structural)?;
        im.kind = MeasurementKind::ZeroCurrentIm;
        im.target = Target::Constraint { bus, index: usize::MAX };
        // Im(v) of the reference phase is pinned to its reference value
        // (zero for phase a); other phases are not supported here.
        if phase != Phase::A {
            return Err(MeasurementError::Config(format!(
                "reference angle bus {bus} must carry phase a first"
            )));
        }
        structural.push(im);
    }
    Ok(MeasurementSet::new(model.num_nodes(), fns, structural))
}

/// The IEEE-37 placement: 4 PMUs (24 real values), 21 current magnitudes and
/// 58 pseudo-measurements, 103 in total.
pub fn build_ieee37_measurement_set(model: &FeederModel) -> Result<MeasurementSet, MeasurementError> {
    if model.name() != "ieee37" || model.num_nodes() != 105 {
        return Err(MeasurementError::WrongFixture(format!(
            "name {:?} with {} phase-nodes",
            model.name(),
            model.num_nodes()
        )));
    }
    build_measurement_set(model, &MeasurementConfig::ieee37())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_of_delta_pair() {
        let basis = complement_basis(&[vec![1.0, -1.0, 0.0]], 3);
        assert_eq!(basis.len(), 2);
        for b in &basis {
            assert!((b[0] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_of_two_deltas_is_sum() {
        let basis = complement_basis(&[vec![1.0, -1.0, 0.0], vec![0.0, 1.0, -1.0]], 3);
        assert_eq!(basis.len(), 1);
        let s = 1.0 / 3f64.sqrt();
        for x in &basis[0] {
            assert!((x.abs() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_of_nothing_is_everything() {
        assert_eq!(complement_basis(&[], 3).len(), 3);
    }
}
