//! Training/evaluation data: scenario sampling from daily profiles, power
//! flow, measurement synthesis, and a compact binary file format.
//!
//! File layout (little-endian):
//! ```text
//! "DSSE" | u32 version | u64 L | u64 2K | u64 count | [u8; 32] fingerprint
//! count × (L + 2K) f64        z then v, one sample after another
//! count × (u64 scenario_id, u64 seed)
//! u64 n | n bytes of JSON metadata
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederModel, InjectionKind};
use crate::measurement::{set_fingerprint, MeasurementError, MeasurementSet};
use crate::powerflow::{InjectionScenario, PowerFlowOptions, PowerFlowSolver};

const MAGIC: &[u8; 4] = b"DSSE";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("every scenario failed to solve")]
    Empty,
    #[error("split fraction {0} outside (0, 1)")]
    Fraction(f64),
    #[error("not a dataset file")]
    Magic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("dataset truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("dataset fingerprint does not match the feeder/measurement layout")]
    Fingerprint,
    #[error("invalid profile library: {0}")]
    Profile(String),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    PowerFlow(#[from] crate::powerflow::PowerFlowError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SplitMix64 finalizer: decorrelated per-item seeds from one master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut x = master ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Daily multiplier curves per unit class on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileLibrary {
    /// Hours since midnight.
    pub t: Vec<f64>,
    pub load: Vec<f64>,
    pub der: Vec<f64>,
    /// Half-width of the uniform per-unit jitter, e.g. 0.1 for ±10 %.
    pub jitter: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    t: f64,
    unit_class: String,
    multiplier: f64,
}

impl ProfileLibrary {
    /// Synthetic quarter-hourly day: residential load with morning and evening
    /// peaks (night floor 0.45, evening peak 1.0) and a clear-sky solar bell
    /// between 06:00 and 18:00.
    pub fn synthetic() -> Self {
        let t: Vec<f64> = (0..96).map(|i| i as f64 * 0.25).collect();
        let bump = |h: f64, c: f64, w: f64| (-((h - c) / w).powi(2) / 2.0).exp();
        let load = t
            .iter()
            .map(|&h| 0.45 + 0.3 * bump(h, 8.0, 1.5) + 0.55 * bump(h, 19.0, 2.0))
            .collect();
        let der = t
            .iter()
            .map(|&h| {
                if (6.0..=18.0).contains(&h) {
                    (std::f64::consts::PI * (h - 6.0) / 12.0).sin().powf(1.5)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            t,
            load,
            der,
            jitter: 0.1,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |s: String| Err(DatasetError::Profile(s));
        if self.t.is_empty() || self.load.len() != self.t.len() || self.der.len() != self.t.len() {
            return bad("load and der curves must cover the same non-empty time grid".into());
        }
        if let Some(m) = self.load.iter().chain(&self.der).find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return bad(format!("multiplier {m} is negative or non-finite"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad(format!("jitter {} outside [0, 1)", self.jitter));
        }
        Ok(())
    }

    /// Reads `t, unit_class, multiplier` rows; both classes must share the grid.
    pub fn from_csv<R: Read>(input: R, jitter: f64) -> Result<Self, DatasetError> {
        let mut curves: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
        for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input).deserialize() {
            let row: ProfileRow = row?;
            if !row.t.is_finite() {
                return Err(DatasetError::Profile("non-finite time".into()));
            }
            curves
                .entry(row.unit_class)
                .or_default()
                .insert(row.t.to_bits(), row.multiplier);
        }
        let take = |name: &str| -> Result<(Vec<f64>, Vec<f64>), DatasetError> {
            let c = curves
                .get(name)
                .ok_or_else(|| DatasetError::Profile(format!("no rows for class {name:?}")))?;
            let mut pts: Vec<(f64, f64)> = c.iter().map(|(t, m)| (f64::from_bits(*t), *m)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Ok(pts.into_iter().unzip())
        };
        if let Some(other) = curves.keys().find(|k| *k != "load" && *k != "der") {
            return Err(DatasetError::Profile(format!("unknown unit class {other:?}")));
        }
        let (t, load) = take("load")?;
        let (t_der, der) = take("der")?;
        if t != t_der {
            return Err(DatasetError::Profile("load and der time grids differ".into()));
        }
        let lib = Self { t, load, der, jitter };
        lib.validate()?;
        Ok(lib)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(out);
        for (class, curve) in [("load", &self.load), ("der", &self.der)] {
            for (t, m) in self.t.iter().zip(curve) {
                w.serialize(ProfileRow {
                    t: *t,
                    unit_class: class.to_string(),
                    multiplier: *m,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn multiplier(&self, kind: InjectionKind, step: usize) -> f64 {
        match kind {
            InjectionKind::Load => self.load[step],
            InjectionKind::Der => self.der[step],
        }
    }
}

/// `n` scenarios: each draws one time step, then every unit gets
/// base × class multiplier × (1 + U(−jitter, jitter)).
pub fn sample_scenarios(
    lib: &ProfileLibrary,
    model: &FeederModel,
    n: usize,
    seed: u64,
) -> Result<Vec<InjectionScenario>, DatasetError> {
    lib.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let step = rng.random_range(0..lib.t.len());
            let s = model
                .injections()
                .iter()
                .map(|u| {
                    let j = if lib.jitter > 0.0 {
                        rng.random_range(-lib.jitter..=lib.jitter)
                    } else {
                        0.0
                    };
                    u.base_injection() * lib.multiplier(u.kind, step) * (1.0 + j)
                })
                .collect();
            InjectionScenario { s }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Noiseless,
    PaperNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: Vec<f64>,
    /// Rectangular true state `[Re v; Im v]`.
    pub v: Vec<f64>,
    pub scenario_id: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub noise: NoiseMode,
    pub master_seed: u64,
    pub skipped: usize,
    pub feeder: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    l: usize,
    k2: usize,
    fingerprint: [u8; 32],
    samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        l: usize,
        k2: usize,
        fingerprint: [u8; 32],
        samples: Vec<Sample>,
        meta: DatasetMeta,
    ) -> Self {
        for s in &samples {
            assert!(s.z.len() == l && s.v.len() == k2, "sample shape mismatch");
        }
        Self {
            l,
            k2,
            fingerprint,
            samples,
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.l
    }

    pub fn output_len(&self) -> usize {
        self.k2
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn skipped(&self) -> usize {
        self.meta.skipped
    }

    /// `(Z, V)` with one column per sample.
    pub fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.len();
        let mut z = DMatrix::zeros(self.l, n);
        let mut v = DMatrix::zeros(self.k2, n);
        for (j, s) in self.samples.iter().enumerate() {
            z.column_mut(j).copy_from_slice(&s.z);
            v.column_mut(j).copy_from_slice(&s.v);
        }
        (z, v)
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            l: self.l,
            k2: self.k2,
            fingerprint: self.fingerprint,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for n in [self.l, self.k2, self.len()] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        out.write_all(&self.fingerprint)?;
        let mut buf = Vec::with_capacity((self.l + self.k2) * 8);
        for s in &self.samples {
            buf.clear();
            for x in s.z.iter().chain(&s.v) {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        for s in &self.samples {
            out.write_all(&s.scenario_id.to_le_bytes())?;
            out.write_all(&s.seed.to_le_bytes())?;
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic).map_err(|_| DatasetError::Magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Magic);
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != VERSION {
            return Err(DatasetError::Version(version));
        }
        let l = read_len(&mut input)?;
        let k2 = read_len(&mut input)?;
        let count = read_len(&mut input)?;
        let fingerprint: [u8; 32] = read_array(&mut input)?;
        let width = l
            .checked_add(k2)
            .filter(|w| w.checked_mul(count).is_some_and(|t| t < 1 << 40))
            .ok_or_else(|| DatasetError::Corrupt("implausible dimensions".into()))?;

        let mut row = vec![0u8; width * 8];
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            read_exact(&mut input, &mut row)?;
            let vals: Vec<f64> = row
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            samples.push(Sample {
                z: vals[..l].to_vec(),
                v: vals[l..].to_vec(),
                scenario_id: 0,
                seed: 0,
            });
        }
        for s in &mut samples {
            s.scenario_id = u64::from_le_bytes(read_array(&mut input)?);
            s.seed = u64::from_le_bytes(read_array(&mut input)?);
        }
        let n = read_len(&mut input)?;
        if n > 1 << 20 {
            return Err(DatasetError::Corrupt("metadata too large".into()));
        }
        let mut meta = vec![0u8; n];
        read_exact(&mut input, &mut meta)?;
        let meta: DatasetMeta =
            serde_json::from_slice(&meta).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
        Ok(Self {
            l,
            k2,
            fingerprint,
            samples,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads and rejects files produced for another feeder or measurement layout.
    pub fn load_checked(path: impl AsRef<Path>, expected: &[u8; 32]) -> Result<Self, DatasetError> {
        let ds = Self::load(path)?;
        if &ds.fingerprint != expected {
            return Err(DatasetError::Fingerprint);
        }
        Ok(ds)
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), DatasetError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DatasetError::Corrupt("unexpected end of file".into()),
        _ => DatasetError::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N], DatasetError> {
    let mut b = [0u8; N];
    read_exact(input, &mut b)?;
    Ok(b)
}

fn read_len<R: Read>(input: &mut R) -> Result<usize, DatasetError> {
    usize::try_from(u64::from_le_bytes(read_array(input)?))
        .map_err(|_| DatasetError::Corrupt("length overflows".into()))
}

const PF_OPTIONS: PowerFlowOptions = PowerFlowOptions {
    tol: 1e-10,
    max_iter: 200,
};

/// Solves every scenario and synthesizes its measurements. Scenarios that
/// fail to solve are skipped and counted; output keeps scenario order.
pub fn build_dataset(
    model: &FeederModel,
    template: &MeasurementSet,
    scenarios: &[InjectionScenario],
    noise: NoiseMode,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let solver = PowerFlowSolver::new(model)?;
    let results: Vec<Option<Sample>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(id, sc)| -> Result<Option<Sample>, DatasetError> {
            let v = match solver.solve(sc, PF_OPTIONS) {
                Ok(v) => v,
                Err(e) => {
                    log::info!("scenario {id} skipped: {e}");
                    return Ok(None);
                }
            };
            let s = derive_seed(seed, id as u64);
            let filled = match noise {
                NoiseMode::Noiseless => template.noiseless(v.as_slice())?,
                NoiseMode::PaperNoise => template.synthesize_measurements(v.as_slice(), s)?,
            };
            Ok(Some(Sample {
                z: filled.z_filled()?.to_vec(),
                v: v.to_rect(),
                scenario_id: id as u64,
                seed: s,
            }))
        })
        .collect::<Result<_, _>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let samples: Vec<Sample> = results.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} scenarios failed to solve", scenarios.len());
    }
    Ok(Dataset {
        l: template.len(),
        k2: 2 * model.num_nodes(),
        fingerprint: set_fingerprint(model, template),
        samples,
        meta: DatasetMeta {
            noise,
            master_seed: seed,
            skipped,
            feeder: model.name().to_string(),
        },
    })
}

/// Seeded shuffle into `(train, validation)` with `round(fraction·n)` training
/// samples.
pub fn split_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::Fraction(fraction));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let n_train = ((fraction * n as f64).round() as usize).min(n);
    Ok((ds.subset(&idx[..n_train]), ds.subset(&idx[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| derive_seed(42, i)).collect();
        assert_eq!(s.len(), 1000);
        assert_eq!(derive_seed(1, 2), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 2), derive_seed(2, 1));
    }

    #[test]
    fn synthetic_profile_shape() {
        let p = ProfileLibrary::synthetic();
        p.validate().unwrap();
        assert_eq!(p.t.len(), 96);
        assert_eq!(p.der[0], 0.0);
        let noon = p.t.iter().position(|&t| t == 12.0).unwrap();
        assert!((p.der[noon] - 1.0).abs() < 1e-12);
        let peak = p.load.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.95 && peak < 1.05, "{peak}");
    }

    #[test]
    fn negative_multiplier_rejected() {
        let mut p = ProfileLibrary::synthetic();
        p.load[3] = -0.1;
        assert!(matches!(p.validate(), Err(DatasetError::Profile(_))));
    }
}
