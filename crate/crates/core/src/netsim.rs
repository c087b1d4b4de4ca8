//! Synthetic data from the three-module serial cascade
//!
//! ```text
//!             u2
//!              |
//! u1 -> G1 -> (+) -> G2 --+--> G3 --(+ e2)--> y2
//!                         |
//!                         +--(+ e1)--> y1
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::TransferFunction;

/// Stream offsets added to a run seed to obtain independent sub-streams.
pub mod stream {
    pub const NOISE_Y1: u64 = 0;
    pub const NOISE_Y2: u64 = 1;
    pub const INPUT_U1: u64 = 2;
    pub const INPUT_U2: u64 = 3;
}

/// True network: three modules plus the two sensor-noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub g1: TransferFunction,
    pub g2: TransferFunction,
    pub g3: TransferFunction,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl CascadeModel {
    /// The benchmark network used throughout the simulation study.
    pub fn benchmark() -> Self {
        CascadeModel {
            g1: TransferFunction::from_coeffs(&[0.7, 0.5], &[-1.2, 0.5], 1).unwrap(),
            g2: TransferFunction::from_coeffs(&[0.6, -0.2], &[-1.3, 0.6], 0).unwrap(),
            g3: TransferFunction::from_coeffs(&[0.6, 0.8, -1.2], &[-0.75, 0.56], 0).unwrap(),
            lambda1: 2.0,
            lambda2: 3.0,
        }
    }

    pub fn modules(&self) -> [&TransferFunction; 3] {
        [&self.g1, &self.g2, &self.g3]
    }

    /// Same modules, different noise levels.
    pub fn with_noise(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    /// Zero variances are allowed (noiseless data); negative ones are not.
    pub fn validate(&self) -> Result<()> {
        for (j, g) in self.modules().iter().enumerate() {
            if !g.den.is_monic() {
                return Err(Error::Parameter(format!("module {} denominator is not monic", j + 1)));
            }
            if !g.is_stable() {
                return Err(Error::Unstable { module: j + 1 });
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Parameter("noise variances must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for CascadeModel {
    fn default() -> Self {
        CascadeModel::benchmark()
    }
}

/// Measured signals `{u1, u2, y1, y2}` of a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl DataRecord {
    pub fn new(u1: Vec<f64>, u2: Vec<f64>, y1: Vec<f64>, y2: Vec<f64>) -> Result<Self> {
        let n = u1.len();
        if n == 0 || u2.len() != n || y1.len() != n || y2.len() != n {
            return Err(Error::Dimension(format!(
                "signal lengths differ or are empty: u1={}, u2={}, y1={}, y2={}",
                n,
                u2.len(),
                y1.len(),
                y2.len()
            )));
        }
        Ok(DataRecord { u1, u2, y1, y2 })
    }

    /// Sample count `N`.
    pub fn len(&self) -> usize {
        self.u1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.is_empty()
    }

    /// Hash of the raw sample bits, for checking that two consumers saw
    /// the same dataset.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for sig in [&self.u1, &self.u2, &self.y1, &self.y2] {
            for x in sig.iter() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Drops the first `k` samples.
    pub fn skip(&self, k: usize) -> Result<DataRecord> {
        DataRecord::new(
            self.u1[k.min(self.len())..].to_vec(),
            self.u2[k.min(self.len())..].to_vec(),
            self.y1[k.min(self.len())..].to_vec(),
            self.y2[k.min(self.len())..].to_vec(),
        )
    }

    /// CSV with header `t,u1,u2,y1,y2`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "u1", "u2", "y1", "y2"])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                fmt_f64(self.u1[t]),
                fmt_f64(self.u2[t]),
                fmt_f64(self.y1[t]),
                fmt_f64(self.y2[t]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<DataRecord> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["t", "u1", "u2", "y1", "y2"] {
            return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
        }
        let (mut u1, mut u2, mut y1, mut y2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let get = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse("short dataset row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number in dataset: {e}")))
            };
            u1.push(get(1)?);
            u2.push(get(2)?);
            y1.push(get(3)?);
            y2.push(get(4)?);
        }
        DataRecord::new(u1, u2, y1, y2)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DataRecord> {
        let f = std::fs::File::open(path)?;
        DataRecord::read_csv(std::io::BufReader::new(f))
    }
}

/// Single-input, single-output record.
#[derive(Debug, Clone, PartialEq)]
pub struct SisoRecord {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl SisoRecord {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if u.is_empty() || u.len() != y.len() {
            return Err(Error::Dimension(format!("u has {} samples, y has {}", u.len(), y.len())));
        }
        Ok(SisoRecord { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Input shaping: each input is this filter applied to unit-variance white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub shaping: TransferFunction,
}

impl Default for InputSpec {
    /// `(1 - 0.9 q^-1)^-1`.
    fn default() -> Self {
        InputSpec { shaping: TransferFunction::from_coeffs(&[1.0], &[-0.9], 0).unwrap() }
    }
}

impl InputSpec {
    pub fn white() -> Self {
        InputSpec { shaping: TransferFunction::unit() }
    }
}

/// Mixes a seed with a stream tag; used to derive run seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `len` Gaussian samples with zero mean and the given variance.
pub fn white_noise(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Parameter(format!("noise variance must be positive, got {variance}")));
    }
    if len == 0 {
        return Err(Error::Parameter("noise length must be at least 1".into()));
    }
    let sd = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect())
}

fn noise_or_zero(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>> {
    if variance == 0.0 {
        Ok(vec![0.0; len])
    } else {
        white_noise(len, variance, seed)
    }
}

/// Two independent shaped-noise inputs.
pub fn gen_inputs(len: usize, spec: &InputSpec, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let e1 = white_noise(len, 1.0, seed.wrapping_add(stream::INPUT_U1))?;
    let e2 = white_noise(len, 1.0, seed.wrapping_add(stream::INPUT_U2))?;
    Ok((spec.shaping.filter(&e1), spec.shaping.filter(&e2)))
}

/// Noise-free outputs `(G2 (G1 u1 + u2), G3 G2 (G1 u1 + u2))`.
pub fn noise_free_outputs(
    g1: &TransferFunction,
    g2: &TransferFunction,
    g3: &TransferFunction,
    u1: &[f64],
    u2: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut v = g1.filter(u1);
    for (a, b) in v.iter_mut().zip(u2) {
        *a += b;
    }
    let s = g2.filter(&v);
    let y2 = g3.filter(&s);
    (s, y2)
}

/// Drives the network with the given inputs and adds sensor noise.
pub fn simulate_network(model: &CascadeModel, u1: &[f64], u2: &[f64], seed: u64) -> Result<DataRecord> {
    if u1.len() != u2.len() {
        return Err(Error::Dimension(format!(
            "input lengths differ: {} vs {}",
            u1.len(),
            u2.len()
        )));
    }
    if !(model.lambda1 >= 0.0 && model.lambda2 >= 0.0) {
        return Err(Error::Parameter("noise variances must be nonnegative".into()));
    }
    let n = u1.len();
    let (mut y1, mut y2) = noise_free_outputs(&model.g1, &model.g2, &model.g3, u1, u2);
    let e1 = noise_or_zero(n, model.lambda1, seed.wrapping_add(stream::NOISE_Y1))?;
    let e2 = noise_or_zero(n, model.lambda2, seed.wrapping_add(stream::NOISE_Y2))?;
    for t in 0..n {
        y1[t] += e1[t];
        y2[t] += e2[t];
    }
    DataRecord::new(u1.to_vec(), u2.to_vec(), y1, y2)
}

/// Inputs plus network in one call, optionally discarding a burn-in prefix.
pub fn simulate_dataset(
    model: &CascadeModel,
    inputs: &InputSpec,
    len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<DataRecord> {
    let (u1, u2) = gen_inputs(len + burn_in, inputs, seed)?;
    let data = simulate_network(model, &u1, &u2, seed)?;
    if burn_in == 0 {
        Ok(data)
    } else {
        data.skip(burn_in)
    }
}
