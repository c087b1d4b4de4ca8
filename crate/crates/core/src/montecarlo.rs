//! Monte Carlo comparison of the estimators on simulated cascade data.
//!
//! Every `(N, run)` pair gets its own seed derived from the master seed, so
//! results do not depend on scheduling or on the number of worker threads.
//! All methods of a pair see the same data record.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::OrderSpec;
use crate::netsim::{fmt_f64, mix_seed, simulate_dataset, CascadeModel, DataRecord, InputSpec};
use crate::pem::{pem_cost, pem_minimize, PemConfig};
use crate::theta::ThetaVector;
use crate::wnsf::{step2_estimate, wnsf_identify, Variant, WnsfConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wnsf1,
    Wnsf3,
    /// Prediction-error method started at the true parameters.
    PemTrue,
    /// Prediction-error method started at the unweighted null-space estimate.
    PemWnsfInit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Wnsf1, Method::Wnsf3, Method::PemTrue, Method::PemWnsfInit];

    pub fn name(self) -> &'static str {
        match self {
            Method::Wnsf1 => "wnsf1",
            Method::Wnsf3 => "wnsf3",
            Method::PemTrue => "pem_true",
            Method::PemWnsfInit => "pem_wnsf_init",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "wnsf1" => Ok(Method::Wnsf1),
            "wnsf3" => Ok(Method::Wnsf3),
            "pem_true" => Ok(Method::PemTrue),
            "pem_wnsf" | "pem_wnsf_init" => Ok(Method::PemWnsfInit),
            other => Err(Error::Parameter(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: CascadeModel,
    pub inputs: InputSpec,
    pub n_list: Vec<usize>,
    pub runs: usize,
    pub methods: Vec<Method>,
    pub wnsf: WnsfConfig,
    pub pem: PemConfig,
    pub seed: u64,
    /// Samples simulated and discarded before each record.
    pub burn_in: usize,
    /// Worker threads; 0 uses all available cores.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: CascadeModel::benchmark(),
            inputs: InputSpec::default(),
            n_list: vec![300, 725, 1754, 4243, 10260, 24811, 60000],
            runs: 100,
            methods: vec![Method::Wnsf1, Method::Wnsf3, Method::PemTrue],
            wnsf: WnsfConfig::default(),
            pem: PemConfig::default(),
            seed: 1,
            burn_in: 0,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_list.is_empty() {
            return Err(Error::Parameter("n_list is empty".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("n_list must be strictly ascending".into()));
        }
        let max_n = self.wnsf.n_grid.iter().copied().max().unwrap_or(0);
        if let Some(&n) = self.n_list.iter().find(|&&n| n <= 2 * max_n) {
            return Err(Error::Parameter(format!(
                "sample size {n} must exceed twice the largest FIR order {max_n}"
            )));
        }
        if self.runs == 0 {
            return Err(Error::Parameter("runs must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Parameter("no methods selected".into()));
        }
        self.wnsf.validate(&self.orders())?;
        if self.pem.max_iter == 0 || !(self.pem.tol > 0.0) {
            return Err(Error::Parameter("PEM needs max_iter >= 1 and tol > 0".into()));
        }
        Ok(())
    }

    /// Module orders of the true model, used as the model structure.
    pub fn orders(&self) -> [OrderSpec; 3] {
        let [g1, g2, g3] = self.model.modules();
        [g1.order_spec(), g2.order_spec(), g3.order_spec()]
    }
}

/// Seed of one `(N, run)` pair.
pub fn run_seed(master: u64, n_samples: usize, run: usize) -> u64 {
    mix_seed(mix_seed(master, n_samples as u64), run as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub n_samples: usize,
    pub method: Method,
    pub run: usize,
    /// `|theta_hat - theta_o|^2`, infinite on failure.
    pub mse: f64,
    /// Wall-clock seconds spent identifying (simulation excluded).
    pub time_s: f64,
    pub chosen_n: Option<usize>,
    pub converged: bool,
    /// Fingerprint of the data record the method saw.
    pub data_fingerprint: u64,
}

/// Outcome of a single method on a single record.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub theta: ThetaVector,
    pub chosen_n: Option<usize>,
    pub converged: bool,
}

/// Best stable unweighted estimate over the FIR order grid.
pub fn wnsf_initial_estimate(
    data: &DataRecord,
    orders: &[OrderSpec; 3],
    config: &WnsfConfig,
) -> Result<(ThetaVector, usize)> {
    config.validate(orders)?;
    let mut best: Option<(f64, ThetaVector, usize)> = None;
    for &n in &config.n_grid {
        let (_, _, theta) = step2_estimate(data, orders, n, config.variant)?;
        if !theta.is_stable() {
            continue;
        }
        let cost = pem_cost(&theta, data)?;
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, theta, n));
        }
    }
    let (_, theta, n) = best.ok_or(Error::Unstable { module: 0 })?;
    Ok((theta, n))
}

/// Runs one method on one record.
pub fn run_method(method: Method, data: &DataRecord, cfg: &ExperimentConfig) -> Result<MethodOutcome> {
    let orders = cfg.orders();
    match method {
        Method::Wnsf1 | Method::Wnsf3 => {
            let variant = if method == Method::Wnsf1 { Variant::Wnsf1 } else { Variant::Wnsf3 };
            let r = wnsf_identify(data, &orders, &cfg.wnsf.clone().with_variant(variant))?;
            Ok(MethodOutcome { theta: r.theta, chosen_n: Some(r.chosen_n), converged: r.converged })
        }
        Method::PemTrue => {
            let r = pem_minimize(data, &ThetaVector::from_cascade(&cfg.model), &cfg.pem)?;
            Ok(MethodOutcome { theta: r.theta, chosen_n: None, converged: r.converged })
        }
        Method::PemWnsfInit => {
            let (init, n) = wnsf_initial_estimate(data, &orders, &cfg.wnsf)?;
            let r = pem_minimize(data, &init, &cfg.pem)?;
            Ok(MethodOutcome { theta: r.theta, chosen_n: Some(n), converged: r.converged })
        }
    }
}

fn run_pair(cfg: &ExperimentConfig, truth: &ThetaVector, n_samples: usize, run: usize) -> Result<Vec<ResultRow>> {
    let seed = run_seed(cfg.seed, n_samples, run);
    let data = simulate_dataset(&cfg.model, &cfg.inputs, n_samples, cfg.burn_in, seed)?;
    let fingerprint = data.fingerprint();
    let mut rows = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let started = Instant::now();
        let outcome = run_method(method, &data, cfg);
        let time_s = started.elapsed().as_secs_f64();
        let row = match outcome {
            Ok(o) => ResultRow {
                n_samples,
                method,
                run,
                mse: o.theta.squared_error(truth),
                time_s,
                chosen_n: o.chosen_n,
                converged: o.converged,
                data_fingerprint: fingerprint,
            },
            Err(_) => ResultRow {
                n_samples,
                method,
                run,
                mse: f64::INFINITY,
                time_s,
                chosen_n: None,
                converged: false,
                data_fingerprint: fingerprint,
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Runs every method on `runs` records for each sample size. Rows are
/// sorted by sample size, then method order in the configuration, then run.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let truth = ThetaVector::from_cascade(&cfg.model);
    let pairs: Vec<(usize, usize)> =
        cfg.n_list.iter().flat_map(|&n| (0..cfg.runs).map(move |r| (n, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let nested: Vec<Result<Vec<ResultRow>>> =
        pool.install(|| pairs.par_iter().map(|&(n, r)| run_pair(cfg, &truth, n, r)).collect());
    let mut rows = Vec::with_capacity(pairs.len() * cfg.methods.len());
    for chunk in nested {
        rows.extend(chunk?);
    }
    let position = |m: Method| cfg.methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    let n_position = |n: usize| cfg.n_list.iter().position(|&x| x == n).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (n_position(r.n_samples), position(r.method), r.run));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n_samples: usize,
    pub method: Method,
    /// Over converged runs only; NaN if none converged.
    pub mse_mean: f64,
    pub mse_median: f64,
    pub time_mean: f64,
    /// Fraction of runs that failed or did not converge.
    pub fail_rate: f64,
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Aggregates rows per `(N, method)`, keeping the order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(usize, Method)> = Vec::new();
    let mut groups: BTreeMap<(usize, Method), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.n_samples, r.method);
        let g = groups.entry(key).or_default();
        if g.is_empty() {
            order.push(key);
        }
        g.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let mut ok: Vec<f64> = g.iter().filter(|r| r.converged).map(|r| r.mse).collect();
            ok.sort_by(f64::total_cmp);
            let mse_mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
            SummaryRow {
                n_samples: key.0,
                method: key.1,
                mse_mean,
                mse_median: median(&ok),
                time_mean: g.iter().map(|r| r.time_s).sum::<f64>() / g.len() as f64,
                fail_rate: (g.len() - ok.len()) as f64 / g.len() as f64,
            }
        })
        .collect()
}

pub const RAW_HEADER: &str = "N,method,run,mse,time_s,chosen_n,converged";
pub const SUMMARY_HEADER: &str = "N,method,mse_mean,mse_median,time_mean,fail_rate";

/// Raw rows as CSV. With `with_timing = false` the `time_s` column is left
/// empty so that repeated runs can be compared byte for byte.
pub fn write_raw_csv<W: Write>(rows: &[ResultRow], mut out: W, with_timing: bool) -> Result<()> {
    writeln!(out, "{RAW_HEADER}")?;
    for r in rows {
        let time = if with_timing { fmt_f64(r.time_s) } else { String::new() };
        let chosen = r.chosen_n.map(|n| n.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.n_samples,
            r.method,
            r.run,
            fmt_f64(r.mse),
            time,
            chosen,
            r.converged
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n_samples,
            r.method,
            fmt_f64(r.mse_mean),
            fmt_f64(r.mse_median),
            fmt_f64(r.time_mean),
            fmt_f64(r.fail_rate)
        )?;
    }
    Ok(())
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw_csv(rows, &mut f, true)?;
    f.flush()?;
    Ok(())
}

pub fn emit_summary(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_summary_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Parses a raw CSV written by [`write_raw_csv`]. Fingerprints are not
/// stored and come back as zero.
pub fn read_raw_csv<R: std::io::Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != RAW_HEADER {
        return Err(Error::Parse(format!("unexpected header '{}'", header.join(","))));
    }
    let parse_f = |s: &str| -> Result<f64> {
        if s.is_empty() {
            return Ok(f64::NAN);
        }
        s.parse().map_err(|_| Error::Parse(format!("bad number '{s}'")))
    };
    let parse_u = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Parse(format!("bad integer '{s}'"))) };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Parse(format!("expected 7 fields, found {}", rec.len())));
        }
        rows.push(ResultRow {
            n_samples: parse_u(&rec[0])?,
            method: rec[1].parse()?,
            run: parse_u(&rec[2])?,
            mse: parse_f(&rec[3])?,
            time_s: parse_f(&rec[4])?,
            chosen_n: if rec[5].is_empty() { None } else { Some(parse_u(&rec[5])?) },
            converged: rec[6].parse().map_err(|_| Error::Parse(format!("bad flag '{}'", &rec[6])))?,
            data_fingerprint: 0,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log(mse_mean)` against `log(N)` for one method.
pub fn loglog_slope(summary: &[SummaryRow], method: Method) -> Option<f64> {
    let pts: Vec<(f64, f64)> = summary
        .iter()
        .filter(|r| r.method == method && r.mse_mean.is_finite() && r.mse_mean > 0.0)
        .map(|r| ((r.n_samples as f64).ln(), r.mse_mean.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
