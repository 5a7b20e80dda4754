//! Single-hidden-layer network `g_T(z) = Σ_t α_t σ(w_tᵀ ẑ + β_t)` mapping a
//! measurement vector to an approximate rectangular state, trained with an
//! ε-insensitive squared loss.
//!
//! Inputs are standardized per feature and outputs per state slot, with
//! statistics taken from the training split. The loss is evaluated on the
//! de-normalized output, so ε is a distance in per-unit state space.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{split_dataset, Dataset, DatasetError};

pub const MODEL_SCHEMA: &str = "nnmodel/1";

/// Relative spread below which a feature counts as constant and is left
/// unscaled. Power-flow round-off (~1e-11) on structurally constant inputs
/// must not become a scale: noise on such an input would be amplified by
/// the inverse.
const MIN_REL_STD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, model expects {expected}")]
    InputLength { got: usize, expected: usize },
    #[error("target has length {got}, model produces {expected}")]
    TargetLength { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("unsupported model schema {0:?}")]
    Version(String),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model fingerprint does not match the feeder/measurement layout")]
    Fingerprint,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Logistic,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Logistic => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnModel {
    /// Hidden weights, one row per neuron (T×L).
    pub w: DMatrix<f64>,
    /// Hidden biases (T).
    pub b: DVector<f64>,
    /// Output combiners, one column per neuron (K_out×T).
    pub a: DMatrix<f64>,
    pub activation: Activation,
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
    /// Feeder + measurement-layout fingerprint of the training data.
    pub fingerprint: [u8; 32],
}

/// Gradients with the shapes of `(W, b, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
}

impl NnModel {
    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn init(l: usize, t: usize, k_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lim_w = (6.0 / (l + t) as f64).sqrt();
        let lim_a = (6.0 / (t + k_out) as f64).sqrt();
        let w = DMatrix::from_fn(t, l, |_, _| rng.random_range(-lim_w..=lim_w));
        let a = DMatrix::from_fn(k_out, t, |_, _| rng.random_range(-lim_a..=lim_a));
        Self {
            w,
            b: DVector::zeros(t),
            a,
            activation: Activation::Logistic,
            in_mean: vec![0.0; l],
            in_std: vec![1.0; l],
            out_mean: vec![0.0; k_out],
            out_std: vec![1.0; k_out],
            fingerprint: [0; 32],
        }
    }

    pub fn input_len(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_len(&self) -> usize {
        self.a.nrows()
    }

    fn check_input(&self, z: &[f64]) -> Result<(), NnError> {
        if z.len() != self.input_len() {
            return Err(NnError::InputLength {
                got: z.len(),
                expected: self.input_len(),
            });
        }
        Ok(())
    }

    fn normalize_inputs(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut zn = z.clone();
        for (i, mut row) in zn.row_iter_mut().enumerate() {
            let (m, s) = (self.in_mean[i], self.in_std[i]);
            row.apply(|x| *x = (*x - m) / s);
        }
        zn
    }

    /// Hidden activations for normalized inputs (one column per sample).
    fn hidden_layer(&self, zn: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.w * zn;
        for mut col in h.column_iter_mut() {
            col += &self.b;
        }
        let act = self.activation;
        h.apply(|x| *x = act.apply(*x));
        h
    }

    fn denormalize(&self, y: &mut DMatrix<f64>) {
        for (i, mut row) in y.row_iter_mut().enumerate() {
            let (m, s) = (self.out_mean[i], self.out_std[i]);
            row.apply(|x| *x = *x * s + m);
        }
    }

    /// De-normalized output for one measurement vector.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(z)?;
        let out = self.forward_batch(&DMatrix::from_column_slice(z.len(), 1, z));
        Ok(out.column(0).iter().copied().collect())
    }

    /// Columns of `z` are samples; returns one output column per sample.
    pub fn forward_batch(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(z.nrows(), self.input_len(), "input length mismatch");
        let h = self.hidden_layer(&self.normalize_inputs(z));
        let mut y = &self.a * h;
        self.denormalize(&mut y);
        y
    }

    fn params_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).chain(self.a.iter()).all(|x| x.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and checks the embedded fingerprint against `expected`.
    pub fn load_checked(path: impl AsRef<Path>, expected: &[u8; 32]) -> Result<Self, NnError> {
        let m = Self::load(path)?;
        if &m.fingerprint != expected {
            return Err(NnError::Fingerprint);
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            schema: MODEL_SCHEMA.to_string(),
            l: self.input_len(),
            t: self.hidden(),
            k_out: self.output_len(),
            activation: self.activation,
            w: row_major(&self.w),
            b: self.b.iter().copied().collect(),
            a: row_major(&self.a),
            in_mean: self.in_mean.clone(),
            in_std: self.in_std.clone(),
            out_mean: self.out_mean.clone(),
            out_std: self.out_std.clone(),
            fingerprint: hex(&self.fingerprint),
        };
        serde_json::to_string(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NnError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| NnError::Corrupt(e.to_string()))?;
        match raw.get("schema").and_then(|s| s.as_str()) {
            Some(MODEL_SCHEMA) => {}
            Some(other) => return Err(NnError::Version(other.to_string())),
            None => return Err(NnError::Corrupt("missing schema".into())),
        }
        let doc: ModelDoc =
            serde_json::from_value(raw).map_err(|e| NnError::Corrupt(e.to_string()))?;
        let (l, t, k) = (doc.l, doc.t, doc.k_out);
        let bad = |what: &str| NnError::Corrupt(format!("{what} has the wrong length"));
        if doc.w.len() != t * l {
            return Err(bad("W"));
        }
        if doc.a.len() != k * t {
            return Err(bad("A"));
        }
        if doc.b.len() != t {
            return Err(bad("b"));
        }
        if doc.in_mean.len() != l || doc.in_std.len() != l {
            return Err(bad("input normalization"));
        }
        if doc.out_mean.len() != k || doc.out_std.len() != k {
            return Err(bad("output normalization"));
        }
        if doc.in_std.iter().chain(&doc.out_std).any(|s| !(*s > 0.0)) {
            return Err(NnError::Corrupt("non-positive standard deviation".into()));
        }
        let m = Self {
            w: DMatrix::from_row_slice(t, l, &doc.w),
            b: DVector::from_vec(doc.b),
            a: DMatrix::from_row_slice(k, t, &doc.a),
            activation: doc.activation,
            in_mean: doc.in_mean,
            in_std: doc.in_std,
            out_mean: doc.out_mean,
            out_std: doc.out_std,
            fingerprint: unhex(&doc.fingerprint)
                .ok_or_else(|| NnError::Corrupt("bad fingerprint".into()))?,
        };
        if !m.params_finite() {
            return Err(NnError::Corrupt("non-finite parameter".into()));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema: String,
    #[serde(rename = "L")]
    l: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "K_out")]
    k_out: usize,
    activation: Activation,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
    #[serde(rename = "A")]
    a: Vec<f64>,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    out_mean: Vec<f64>,
    out_std: Vec<f64>,
    fingerprint: String,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// `max(‖v − g(z)‖₂² − ε², 0)`.
pub fn hinge_loss(m: &NnModel, z: &[f64], v_target: &[f64], epsilon: f64) -> Result<f64, NnError> {
    let g = m.forward(z)?;
    if v_target.len() != g.len() {
        return Err(NnError::TargetLength {
            got: v_target.len(),
            expected: g.len(),
        });
    }
    let d2: f64 = v_target.iter().zip(&g).map(|(v, g)| (v - g).powi(2)).sum();
    Ok((d2 - epsilon * epsilon).max(0.0))
}

/// `‖v − g(z)‖₂²`.
pub fn conventional_loss(m: &NnModel, z: &[f64], v_target: &[f64]) -> Result<f64, NnError> {
    hinge_loss(m, z, v_target, 0.0)
}

/// Mean hinge loss over a batch given as matrices (samples in columns).
pub fn batch_hinge_loss(m: &NnModel, z: &DMatrix<f64>, v: &DMatrix<f64>, epsilon: f64) -> f64 {
    let g = m.forward_batch(z);
    let n = z.ncols();
    (0..n)
        .map(|j| ((v.column(j) - g.column(j)).norm_squared() - epsilon * epsilon).max(0.0))
        .sum::<f64>()
        / n as f64
}

/// Exact gradient of the mean hinge loss over `(z, v)` columns. Samples
/// inside the ball (including its boundary) contribute nothing.
pub fn batch_gradient(
    m: &NnModel,
    z: &DMatrix<f64>,
    v: &DMatrix<f64>,
    epsilon: f64,
) -> (f64, Gradients) {
    let n = z.ncols();
    let zn = m.normalize_inputs(z);
    let h = m.hidden_layer(&zn);
    let mut g = &m.a * &h;
    m.denormalize(&mut g);

    // dL/dy in normalized output units: −2·s∘(v − g)/n for active samples
    let mut dy = DMatrix::zeros(m.output_len(), n);
    let mut loss = 0.0;
    for j in 0..n {
        let e = v.column(j) - g.column(j);
        let excess = e.norm_squared() - epsilon * epsilon;
        if excess > 0.0 {
            loss += excess;
            for i in 0..m.output_len() {
                dy[(i, j)] = -2.0 * m.out_std[i] * e[i] / n as f64;
            }
        }
    }
    let da = &dy * h.transpose();
    let mut dp = m.a.transpose() * &dy;
    dp.zip_apply(&h, |d, hv| *d *= hv * (1.0 - hv));
    let dw = &dp * zn.transpose();
    let db = dp.column_sum();
    (loss / n as f64, Gradients { w: dw, b: db, a: da })
}

/// Gradient of the mean hinge loss over `(z, v)` pairs.
pub fn loss_gradient(
    m: &NnModel,
    batch: &[(Vec<f64>, Vec<f64>)],
    epsilon: f64,
) -> Result<Gradients, NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    for (z, v) in batch {
        m.check_input(z)?;
        if v.len() != m.output_len() {
            return Err(NnError::TargetLength {
                got: v.len(),
                expected: m.output_len(),
            });
        }
    }
    let z = DMatrix::from_fn(m.input_len(), batch.len(), |i, j| batch[j].0[i]);
    let v = DMatrix::from_fn(m.output_len(), batch.len(), |i, j| batch[j].1[i]);
    Ok(batch_gradient(m, &z, &v, epsilon).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epsilon: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub patience: usize,
    /// Training fraction; the rest is used for early stopping.
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            hidden: 512,
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            patience: 10,
            split: 0.9,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnError> {
        let bad = |s: &str| Err(NnError::Config(s.to_string()));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split must lie in (0, 1)");
        }
        if self.hidden < 1 {
            return bad("hidden must be at least 1");
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.epsilon >= 0.0) || !(self.lr > 0.0) {
            return bad("epsilon must be non-negative and lr positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
}

impl TrainingTrace {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-parameter Adam state.
struct Adam {
    lr: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(m: &NnModel, lr: f64) -> Self {
        let zeros = || Gradients {
            w: DMatrix::zeros(m.w.nrows(), m.w.ncols()),
            b: DVector::zeros(m.b.len()),
            a: DMatrix::zeros(m.a.nrows(), m.a.ncols()),
        };
        Self {
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn update(&mut self, model: &mut NnModel, g: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let lr = self.lr;
        let apply = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        apply(model.w.as_mut_slice(), self.m.w.as_mut_slice(), self.v.w.as_mut_slice(), g.w.as_slice());
        apply(model.b.as_mut_slice(), self.m.b.as_mut_slice(), self.v.b.as_mut_slice(), g.b.as_slice());
        apply(model.a.as_mut_slice(), self.m.a.as_mut_slice(), self.v.a.as_mut_slice(), g.a.as_slice());
    }
}

/// (mean, std) per row of `x`, std set to 1 for (numerically) constant rows.
fn row_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    x.row_iter()
        .map(|r| {
            let mean = r.sum() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > MIN_REL_STD * (1.0 + mean.abs()) { sd } else { 1.0 })
        })
        .unzip()
}

/// Trains on a seeded split of `ds`: mini-batch Adam, early stopping on the
/// validation hinge loss, best parameters restored.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(NnModel, TrainingTrace), NnError> {
    cfg.validate()?;
    let (tr, va) = split_dataset(ds, cfg.split, cfg.seed)?;
    if tr.is_empty() || va.is_empty() {
        return Err(NnError::Config("both splits must be non-empty".into()));
    }
    if ds.len() < 10 * cfg.hidden {
        log::warn!(
            "{} samples for {} hidden neurons; at least {} recommended",
            ds.len(),
            cfg.hidden,
            10 * cfg.hidden
        );
    }
    let (ztr, vtr) = tr.matrices();
    let (zva, vva) = va.matrices();
    train_on(&ztr, &vtr, &zva, &vva, ds.fingerprint(), cfg)
}

/// Training on explicit train/validation matrices (samples in columns).
pub fn train_on(
    ztr: &DMatrix<f64>,
    vtr: &DMatrix<f64>,
    zva: &DMatrix<f64>,
    vva: &DMatrix<f64>,
    fingerprint: [u8; 32],
    cfg: &TrainConfig,
) -> Result<(NnModel, TrainingTrace), NnError> {
    cfg.validate()?;
    let (l, k, n) = (ztr.nrows(), vtr.nrows(), ztr.ncols());
    let mut model = NnModel::init(l, cfg.hidden, k, cfg.seed);
    (model.in_mean, model.in_std) = row_stats(ztr);
    (model.out_mean, model.out_std) = row_stats(vtr);
    model.fingerprint = fingerprint;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut adam = Adam::new(&model, cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainingTrace::default();
    let mut best = (batch_hinge_loss(&model, zva, vva, cfg.epsilon), model.clone(), 0usize);
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        // Fisher-Yates with the seeded stream keeps epochs reproducible
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let zb = ztr.select_columns(chunk);
            let vb = vtr.select_columns(chunk);
            let (loss, g) = batch_gradient(&model, &zb, &vb, cfg.epsilon);
            total += loss * chunk.len() as f64;
            adam.update(&mut model, &g);
        }
        let train_loss = total / n as f64;
        let val_loss = batch_hinge_loss(&model, zva, vva, cfg.epsilon);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e}");
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience || best.0 == 0.0 {
                break;
            }
        }
    }
    trace.best_epoch = best.2;
    Ok((best.1, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let mut fp = [0u8; 32];
        fp[0] = 0xab;
        fp[31] = 0x01;
        assert_eq!(unhex(&hex(&fp)), Some(fp));
        assert_eq!(unhex("zz"), None);
    }

    #[test]
    fn constant_rows_get_unit_std() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.0, 1.0, 2.0]);
        let (m, s) = row_stats(&x);
        assert_eq!(m, vec![1.0, 1.0]);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        // round-off around a constant is not a scale
        let x = DMatrix::from_row_slice(1, 2, &[3e-12, -1e-11]);
        assert_eq!(row_stats(&x).1, vec![1.0]);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            split: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            hidden: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
