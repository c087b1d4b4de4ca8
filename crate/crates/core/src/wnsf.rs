//! Weighted null-space fitting, SISO and three-module cascade.
//!
//! The structured model is tied to the FIR estimate through a set of
//! equations `F_m g_a - L_m g_b = 0`, each linear in the parameters of one
//! module `m` and affine in the impulse responses. Stacking them yields
//! `g - Q(g) theta = 0`, solved first by least squares and then by
//! weighted least squares with weighting `(T P T^T)^-1`, where `T(theta)`
//! is the Jacobian of that residual with respect to `g`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firstep::{estimate_fir, estimate_fir_siso, fir_covariance, FirCovariance, FirEstimate};
use crate::lti::{fill_toeplitz, filter_into, OrderSpec};
use crate::netsim::{DataRecord, SisoRecord};
use crate::pem;
use crate::theta::ThetaVector;

/// Which product gets replaced by a non-parametric estimate in the
/// `(2,1)` entry of the cascade transfer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `G1 * G22 = G21`: the equation `F1 g21 - L1 g22 = 0`.
    #[default]
    Wnsf1,
    /// `G3 * G11 = G21`: the equation `F3 g21 - L3 g11 = 0`.
    Wnsf3,
}

/// One null-space equation `F_m g_self - L_m g_input = 0`, with
/// `g_input = None` meaning `L_m` alone (`G_m` is itself a FIR block).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Equation {
    pub module: usize,
    pub self_block: usize,
    pub input_block: Option<usize>,
}

impl Variant {
    /// Equations in block order `(g11, g12, g21, g22)`.
    pub fn equations(self) -> [Equation; 4] {
        let eq = |module, self_block, input_block| Equation { module, self_block, input_block };
        let third = match self {
            Variant::Wnsf1 => eq(0, 2, Some(3)),
            Variant::Wnsf3 => eq(2, 2, Some(0)),
        };
        [eq(0, 0, Some(1)), eq(1, 1, None), third, eq(2, 3, Some(1))]
    }
}

const SISO_EQUATIONS: [Equation; 1] = [Equation { module: 0, self_block: 0, input_block: None }];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WnsfConfig {
    /// Candidate FIR orders; the one whose estimate has the lowest
    /// prediction-error cost wins.
    pub n_grid: Vec<usize>,
    pub max_iter: usize,
    /// Relative parameter change below which iteration stops.
    pub tol: f64,
    pub variant: Variant,
}

impl Default for WnsfConfig {
    fn default() -> Self {
        WnsfConfig { n_grid: vec![20, 30, 40], max_iter: 1000, tol: 1e-6, variant: Variant::Wnsf1 }
    }
}

impl WnsfConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self, orders: &[OrderSpec]) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::Parameter("FIR order grid is empty".into()));
        }
        let max_lag = orders.iter().map(OrderSpec::max_lag).max().unwrap_or(0);
        let max_params = orders.iter().map(OrderSpec::n_params).max().unwrap_or(0);
        if let Some(n) = self.n_grid.iter().find(|&&n| n <= max_lag || n < max_params) {
            return Err(Error::Parameter(format!(
                "FIR order {n} must exceed every module order (max lag {max_lag})"
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Parameter("tol must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics for one FIR order of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderTrial {
    pub n: usize,
    pub step2: ThetaVector,
    pub theta: ThetaVector,
    /// Weighted steps taken.
    pub iterations: usize,
    pub converged: bool,
    /// Relative parameter change after each weighted step.
    pub changes: Vec<f64>,
    /// Prediction-error cost of the final iterate (infinite if unstable).
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub theta: ThetaVector,
    pub chosen_n: usize,
    pub cost: f64,
    pub converged: bool,
    pub trials: Vec<OrderTrial>,
    pub elapsed: Duration,
}

fn check_orders(g_len: usize, n: usize, blocks: usize, theta_len: Option<usize>, d: usize) -> Result<()> {
    if g_len != blocks * n {
        return Err(Error::Dimension(format!(
            "impulse-response vector has {g_len} entries, expected {blocks} blocks of {n}"
        )));
    }
    if let Some(l) = theta_len {
        if l != d {
            return Err(Error::Dimension(format!("theta has {l} entries, orders imply {d}")));
        }
    }
    Ok(())
}

fn build_q(g: &[f64], n: usize, orders: &[OrderSpec], equations: &[Equation]) -> Result<DMatrix<f64>> {
    let d: usize = orders.iter().map(OrderSpec::n_params).sum();
    check_orders(g.len(), n, equations.len(), None, d)?;
    if let Some(o) = orders.iter().find(|o| o.n_params() > n) {
        return Err(Error::Dimension(format!(
            "FIR order {n} is smaller than the {} parameters of a module",
            o.n_params()
        )));
    }
    let offsets: Vec<usize> = orders
        .iter()
        .scan(0, |acc, o| {
            let off = *acc;
            *acc += o.n_params();
            Some(off)
        })
        .collect();
    let block = |b: usize| &g[b * n..(b + 1) * n];
    let unit = [1.0];
    let mut q = DMatrix::zeros(g.len(), d);
    for (r, eq) in equations.iter().enumerate() {
        let o = orders[eq.module];
        let col = offsets[eq.module];
        fill_toeplitz(q.view_mut((r * n, col), (n, o.nf)), block(eq.self_block), 1, -1.0);
        let input: &[f64] = match eq.input_block {
            Some(b) => block(b),
            None => &unit,
        };
        fill_toeplitz(q.view_mut((r * n, col + o.nf), (n, o.nb)), input, o.nk, 1.0);
    }
    Ok(q)
}

/// `Q(g)` for a single output-error model: `[-T{Gamma g}, delayed identity]`.
pub fn build_q_siso(g: &[f64], order: &OrderSpec) -> Result<DMatrix<f64>> {
    build_q(g, g.len(), std::slice::from_ref(order), &SISO_EQUATIONS)
}

/// `Q(g)` for the cascade, `4n x d`, with `g = (g11, g12, g21, g22)`.
pub fn build_q_cascade(g_hat: &[f64], orders: &[OrderSpec; 3], variant: Variant) -> Result<DMatrix<f64>> {
    if !g_hat.len().is_multiple_of(4) {
        return Err(Error::Dimension(format!("{} is not four blocks", g_hat.len())));
    }
    build_q(g_hat, g_hat.len() / 4, orders, &variant.equations())
}

/// `T(theta)`, the exact Jacobian of `g - Q(g) theta` with respect to `g`,
/// in structured form.
///
/// Every equation row `r` has `T{f_m}` on its own diagonal block and
/// `-T{b_m}` on the block of its input, so solves reduce to all-pole and
/// FIR filtering of length-`n` vectors.
#[derive(Debug, Clone)]
pub struct Linearization {
    n: usize,
    rows: Vec<LinRow>,
    order: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LinRow {
    den: Vec<f64>,
    num: Vec<f64>,
    delay: usize,
    input_block: Option<usize>,
}

impl Linearization {
    fn new(theta: &ThetaVector, n: usize, equations: &[Equation]) -> Result<Self> {
        let rows: Vec<LinRow> = equations
            .iter()
            .enumerate()
            .map(|(r, eq)| {
                debug_assert_eq!(r, eq.self_block);
                let (f, b) = theta.module_coeffs(eq.module);
                let mut den = vec![1.0];
                den.extend_from_slice(f);
                LinRow {
                    den,
                    num: b.to_vec(),
                    delay: theta.orders()[eq.module].nk,
                    input_block: eq.input_block,
                }
            })
            .collect();
        // Solve order: a block's input must be solved before the block.
        let mut order = Vec::with_capacity(rows.len());
        let mut state = vec![0u8; rows.len()];
        fn visit(r: usize, rows: &[LinRow], state: &mut [u8], order: &mut Vec<usize>) -> Result<()> {
            match state[r] {
                2 => return Ok(()),
                1 => return Err(Error::Dimension("cyclic equation structure".into())),
                _ => {}
            }
            state[r] = 1;
            if let Some(b) = rows[r].input_block {
                visit(b, rows, state, order)?;
            }
            state[r] = 2;
            order.push(r);
            Ok(())
        }
        for r in 0..rows.len() {
            visit(r, &rows, &mut state, &mut order)?;
        }
        Ok(Linearization { n, rows, order })
    }

    pub fn dim(&self) -> usize {
        self.n * self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut t = DMatrix::zeros(self.dim(), self.dim());
        for (r, row) in self.rows.iter().enumerate() {
            fill_toeplitz(t.view_mut((r * n, r * n), (n, n)), &row.den, 0, 1.0);
            if let Some(b) = row.input_block {
                let mut blk = t.view_mut((r * n, b * n), (n, n));
                // accumulate, in case a row's input is itself
                let mut tmp = DMatrix::zeros(n, n);
                fill_toeplitz(tmp.view_mut((0, 0), (n, n)), &row.num, row.delay, -1.0);
                blk += tmp;
            }
        }
        t
    }

    /// `T x` for a stacked vector.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut out = DVector::zeros(x.len());
        let mut buf = vec![0.0; n];
        for (r, row) in self.rows.iter().enumerate() {
            let xs = &x.as_slice()[r * n..(r + 1) * n];
            fir_into(&row.den, 0, xs, &mut buf);
            out.as_mut_slice()[r * n..(r + 1) * n].copy_from_slice(&buf);
            if let Some(b) = row.input_block {
                fir_into(&row.num, row.delay, &x.as_slice()[b * n..(b + 1) * n], &mut buf);
                for (o, v) in out.as_mut_slice()[r * n..(r + 1) * n].iter_mut().zip(&buf) {
                    *o -= v;
                }
            }
        }
        out
    }

    /// Overwrites every column of `x` with `T^-1 x`.
    pub fn solve_mut(&self, x: &mut DMatrix<f64>) {
        let n = self.n;
        let mut rhs = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut sol = vec![0.0; n];
        for c in 0..x.ncols() {
            let col = x.column_mut(c);
            let data = col.data.into_slice_mut();
            for &r in &self.order {
                let row = &self.rows[r];
                rhs.copy_from_slice(&data[r * n..(r + 1) * n]);
                if let Some(b) = row.input_block {
                    fir_into(&row.num, row.delay, &data[b * n..(b + 1) * n], &mut tmp);
                    for (a, v) in rhs.iter_mut().zip(&tmp) {
                        *a += v;
                    }
                }
                // lower-triangular Toeplitz solve == all-pole filtering
                filter_into(&[1.0], &row.den, 0, &rhs, &mut sol);
                data[r * n..(r + 1) * n].copy_from_slice(&sol);
            }
        }
    }
}

/// Truncated FIR filtering `out(t) = sum_i c[i] x(t - delay - i)`.
fn fir_into(c: &[f64], delay: usize, x: &[f64], out: &mut [f64]) {
    for t in 0..x.len() {
        let mut acc = 0.0;
        for (i, &ci) in c.iter().enumerate() {
            let lag = delay + i;
            if lag > t {
                break;
            }
            acc += ci * x[t - lag];
        }
        out[t] = acc;
    }
}

pub fn linearization_siso(theta: &ThetaVector, n: usize) -> Result<Linearization> {
    if theta.orders().len() != 1 {
        return Err(Error::Dimension("SISO linearization needs a single module".into()));
    }
    Linearization::new(theta, n, &SISO_EQUATIONS)
}

pub fn linearization_cascade(theta: &ThetaVector, n: usize, variant: Variant) -> Result<Linearization> {
    if theta.orders().len() != 3 {
        return Err(Error::Dimension("cascade linearization needs three modules".into()));
    }
    Linearization::new(theta, n, &variant.equations())
}

/// Dense `T(theta)` for the SISO case, `T{[1 f]}`.
pub fn build_t_siso(theta: &ThetaVector, n: usize) -> Result<DMatrix<f64>> {
    Ok(linearization_siso(theta, n)?.to_dense())
}

/// Dense `4n x 4n` `T(theta)` for the cascade.
pub fn build_t_cascade(theta: &ThetaVector, n: usize, variant: Variant) -> Result<DMatrix<f64>> {
    Ok(linearization_cascade(theta, n, variant)?.to_dense())
}

/// Something that can apply `T^-1` to a block of columns.
pub trait TransformSolve {
    fn dim(&self) -> usize;
    fn solve_in_place(&self, x: &mut DMatrix<f64>) -> Result<()>;
}

impl TransformSolve for Linearization {
    fn dim(&self) -> usize {
        Linearization::dim(self)
    }

    fn solve_in_place(&self, x: &mut DMatrix<f64>) -> Result<()> {
        self.solve_mut(x);
        Ok(())
    }
}

impl TransformSolve for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn solve_in_place(&self, x: &mut DMatrix<f64>) -> Result<()> {
        let lu = self.clone().lu();
        if !lu.solve_mut(x) {
            return Err(Error::Conditioning { rcond: 0.0 });
        }
        Ok(())
    }
}

/// Householder least squares; returns the solution and the diagonal of R.
fn qr_least_squares(a: DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
    let qr = a.qr();
    let r = qr.r();
    let rdiag: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)]).collect();
    let mut rhs = b.clone();
    qr.q_tr_mul(&mut rhs);
    let mut x = rhs.rows(0, r.ncols()).clone_owned();
    if !r.solve_upper_triangular_mut(&mut x) {
        x.fill(f64::NAN);
    }
    (x, rdiag)
}

fn rank_tolerance(rdiag: &[f64], rows: usize) -> f64 {
    let max = rdiag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max * rows.max(rdiag.len()) as f64 * f64::EPSILON
}

/// Unweighted step: `argmin |g - Q theta|`.
pub fn step2_ls(q: &DMatrix<f64>, g_hat: &DVector<f64>) -> Result<DVector<f64>> {
    if q.nrows() != g_hat.len() || q.nrows() < q.ncols() {
        return Err(Error::Dimension(format!(
            "Q is {}x{}, g has {} entries",
            q.nrows(),
            q.ncols(),
            g_hat.len()
        )));
    }
    let (x, rdiag) = qr_least_squares(q.clone(), g_hat);
    let tol = rank_tolerance(&rdiag, q.nrows());
    let deficient: Vec<usize> =
        rdiag.iter().enumerate().filter(|(_, v)| v.abs() <= tol).map(|(i, _)| i).collect();
    if !deficient.is_empty() {
        return Err(Error::RankDeficient { columns: deficient });
    }
    Ok(x)
}

/// Weighted step with `W^-1 = T P T^T`:
/// minimizes `|C^T T^-1 (g - Q theta)|^2` where `P^-1 = C C^T`.
pub fn step3_wls<T: TransformSolve>(
    q: &DMatrix<f64>,
    g_hat: &DVector<f64>,
    t: &T,
    p: &FirCovariance,
) -> Result<DVector<f64>> {
    let m = q.nrows();
    if g_hat.len() != m || t.dim() != m || p.dim() != m {
        return Err(Error::Dimension(format!(
            "Q has {m} rows, g {} entries, T {} and P {}",
            g_hat.len(),
            t.dim(),
            p.dim()
        )));
    }
    let d = q.ncols();
    let mut aug = DMatrix::zeros(m, d + 1);
    aug.view_mut((0, 0), (m, d)).copy_from(q);
    aug.set_column(d, g_hat);
    t.solve_in_place(&mut aug)?;
    let white = p.whiten(&aug);
    let a = white.columns(0, d).clone_owned();
    let b = white.column(d).clone_owned();
    let (x, rdiag) = qr_least_squares(a, &b);
    let (lo, hi) = rdiag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    let rcond = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
    if !(rcond >= f64::EPSILON) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning { rcond });
    }
    Ok(x)
}

/// Diagonal of the sample covariance of the cascade's prediction errors.
pub fn residual_covariance(data: &DataRecord, theta: &ThetaVector) -> Result<[f64; 2]> {
    let [e1, e2] = pem::predict_errors(theta, data)?;
    let n = data.len() as f64;
    Ok([e1.iter().map(|v| v * v).sum::<f64>() / n, e2.iter().map(|v| v * v).sum::<f64>() / n])
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Keeps the weighting finite when residuals vanish (noiseless data).
fn floor_variance(lambda: f64, signal: &[f64]) -> f64 {
    let floor = 1e-12 * mean_square(signal);
    if floor > 0.0 {
        lambda.max(floor)
    } else if lambda > 0.0 {
        lambda
    } else {
        1.0
    }
}

fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    let diff = (new - old).norm();
    let base = old.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Iterates the weighted step from `start` until the relative change drops
/// below `tol` or `max_iter` steps were taken.
fn iterate<W, L>(
    q: &DMatrix<f64>,
    g_hat: &DVector<f64>,
    start: &ThetaVector,
    config: &WnsfConfig,
    mut weighting: W,
    linearize: L,
) -> Result<(ThetaVector, usize, bool, Vec<f64>)>
where
    W: FnMut(&ThetaVector) -> Result<FirCovariance>,
    L: Fn(&ThetaVector) -> Result<Linearization>,
{
    let mut theta = start.clone();
    let mut changes = Vec::new();
    let mut converged = false;
    let mut it = 0;
    while it < config.max_iter {
        let p = weighting(&theta)?;
        let t = linearize(&theta)?;
        let next = step3_wls(q, g_hat, &t, &p)?;
        let change = relative_change(&next, &DVector::from_column_slice(theta.values()));
        theta = theta.with_values(next.as_slice().to_vec())?;
        changes.push(change);
        it += 1;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok((theta, it, converged, changes))
}

fn pick_best(trials: Vec<OrderTrial>, started: Instant) -> Result<EstimateReport> {
    let best = trials
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Parameter("empty order grid".into()))?;
    let chosen = &trials[best];
    Ok(EstimateReport {
        theta: chosen.theta.clone(),
        chosen_n: chosen.n,
        cost: chosen.cost,
        converged: chosen.converged,
        elapsed: started.elapsed(),
        trials,
    })
}

/// Step 1 and Step 2 of the cascade estimator at one FIR order.
pub fn step2_estimate(
    data: &DataRecord,
    orders: &[OrderSpec; 3],
    n: usize,
    variant: Variant,
) -> Result<(FirEstimate, DMatrix<f64>, ThetaVector)> {
    let fir = estimate_fir(data, n)?;
    let q = build_q_cascade(fir.g_hat().as_slice(), orders, variant)?;
    let ls = step2_ls(&q, fir.g_hat())?;
    let theta = ThetaVector::new(ls.as_slice().to_vec(), orders.to_vec())?;
    Ok((fir, q, theta))
}

/// Full cascade estimator: for every FIR order in the grid, FIR fit,
/// unweighted fit and iterated weighted fit; the final iterate with the
/// smallest prediction-error cost is returned.
pub fn wnsf_identify(data: &DataRecord, orders: &[OrderSpec; 3], config: &WnsfConfig) -> Result<EstimateReport> {
    let started = Instant::now();
    config.validate(orders)?;
    let mut trials = Vec::with_capacity(config.n_grid.len());
    for &n in &config.n_grid {
        let (fir, q, step2) = step2_estimate(data, orders, n, config.variant)?;
        let mut lambda = if step2.is_stable() {
            let l = residual_covariance(data, &step2)?;
            [floor_variance(l[0], &data.y1), floor_variance(l[1], &data.y2)]
        } else {
            [1.0, 1.0]
        };
        let weighting = |th: &ThetaVector| {
            if th.is_stable() {
                let l = residual_covariance(data, th)?;
                lambda = [floor_variance(l[0], &data.y1), floor_variance(l[1], &data.y2)];
            }
            fir_covariance(&fir, &lambda)
        };
        let linearize = |th: &ThetaVector| linearization_cascade(th, n, config.variant);
        let (theta, iterations, converged, changes) =
            iterate(&q, fir.g_hat(), &step2, config, weighting, linearize)?;
        let cost = if theta.is_stable() { pem::pem_cost(&theta, data)? } else { f64::INFINITY };
        trials.push(OrderTrial { n, step2, theta, iterations, converged, changes, cost });
    }
    pick_best(trials, started)
}

/// SISO output-error estimator. The noise variance is a common scale of the
/// weighting and drops out.
pub fn wnsf_siso(data: &SisoRecord, order: &OrderSpec, config: &WnsfConfig) -> Result<EstimateReport> {
    let started = Instant::now();
    config.validate(std::slice::from_ref(order))?;
    let mut trials = Vec::with_capacity(config.n_grid.len());
    for &n in &config.n_grid {
        let fir = estimate_fir_siso(&data.u, &data.y, n)?;
        let q = build_q_siso(fir.g_hat().as_slice(), order)?;
        let ls = step2_ls(&q, fir.g_hat())?;
        let step2 = ThetaVector::new(ls.as_slice().to_vec(), vec![*order])?;
        let p = fir_covariance(&fir, &[1.0])?;
        let weighting = |_: &ThetaVector| Ok(p.clone());
        let linearize = |th: &ThetaVector| linearization_siso(th, n);
        let (theta, iterations, converged, changes) =
            iterate(&q, fir.g_hat(), &step2, config, weighting, linearize)?;
        let cost = if theta.is_stable() {
            let yhat = theta.module(0).filter(&data.u);
            data.y.iter().zip(&yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / data.len() as f64
        } else {
            f64::INFINITY
        };
        trials.push(OrderTrial { n, step2, theta, iterations, converged, changes, cost });
    }
    pick_best(trials, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{impulse_response, TransferFunction};
    use crate::netsim::{gen_inputs, simulate_network, white_noise, CascadeModel, InputSpec};
    use proptest::prelude::*;

    fn orders() -> [OrderSpec; 3] {
        let m = CascadeModel::benchmark();
        [m.g1.order_spec(), m.g2.order_spec(), m.g3.order_spec()]
    }

    fn true_g(m: &CascadeModel, n: usize) -> Vec<f64> {
        let g11 = impulse_response(&m.g2.series(&m.g1), n);
        let g12 = impulse_response(&m.g2, n);
        let g21 = impulse_response(&m.g3.series(&m.g2.series(&m.g1)), n);
        let g22 = impulse_response(&m.g3.series(&m.g2), n);
        [g11, g12, g21, g22].concat()
    }

    #[test]
    fn q_siso_definition() {
        let mut g = vec![0.0; 5];
        g[0] = 1.0;
        let q = build_q_siso(&g, &OrderSpec { nb: 1, nf: 1, nk: 0 }).unwrap();
        let expect = DMatrix::from_row_slice(
            5,
            2,
            &[0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        assert_eq!(q, expect);
    }

    #[test]
    fn q_siso_pure_fir_recovers_g() {
        let g = vec![0.0, 0.5, -0.3, 0.2, 0.1, 0.0];
        let o = OrderSpec { nb: 4, nf: 0, nk: 1 };
        let q = build_q_siso(&g, &o).unwrap();
        let th = step2_ls(&q, &DVector::from_vec(g.clone())).unwrap();
        for (a, b) in th.iter().zip([0.5, -0.3, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn q_siso_null_space_at_truth() {
        let tf = TransferFunction::from_coeffs(&[0.7, 0.5], &[-1.2, 0.5], 1).unwrap();
        let g = impulse_response(&tf, 50);
        let q = build_q_siso(&g, &tf.order_spec()).unwrap();
        let th = ThetaVector::from_modules(&[&tf]);
        let r = DVector::from_vec(g) - &q * DVector::from_column_slice(th.values());
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn q_cascade_dimensions_and_zero_input() {
        let o = orders();
        let q = build_q_cascade(&vec![0.3; 160], &o, Variant::Wnsf1).unwrap();
        assert_eq!(q.shape(), (160, 13));
        let z = build_q_cascade(&vec![0.0; 160], &o, Variant::Wnsf1).unwrap();
        // only the delay-identity of the G2 equation survives: rows 40.., b2 columns 6,7
        let mut expect = DMatrix::zeros(160, 13);
        expect[(40, 6)] = 1.0;
        expect[(41, 7)] = 1.0;
        assert_eq!(z, expect);
        assert!(build_q_cascade(&vec![0.0; 10], &o, Variant::Wnsf1).is_err());
    }

    #[test]
    fn null_space_consistency_both_variants() {
        let m = CascadeModel::benchmark();
        let g = true_g(&m, 60);
        let th = ThetaVector::from_cascade(&m);
        for v in [Variant::Wnsf1, Variant::Wnsf3] {
            let q = build_q_cascade(&g, &orders(), v).unwrap();
            let r = DVector::from_vec(g.clone()) - &q * DVector::from_column_slice(th.values());
            assert!(r.amax() <= 1e-5, "{v:?}: {}", r.amax());
        }
    }

    #[test]
    fn t_at_zero_theta() {
        let th = ThetaVector::zeros(orders().to_vec());
        let n = 5;
        let t = build_t_cascade(&th, n, Variant::Wnsf1).unwrap();
        assert_eq!(t, DMatrix::identity(4 * n, 4 * n));
        let t3 = build_t_cascade(&th, n, Variant::Wnsf3).unwrap();
        assert_eq!(t3, DMatrix::identity(4 * n, 4 * n));
    }

    #[test]
    fn t_block_layout_wnsf1() {
        let th = ThetaVector::from_cascade(&CascadeModel::benchmark());
        let n = 6;
        let t = build_t_cascade(&th, n, Variant::Wnsf1).unwrap();
        // (1,1): T{f1}
        assert_eq!(t[(1, 0)], -1.2);
        // (1,2): -T{b1} with delay 1
        assert_eq!(t[(0, n)], 0.0);
        assert_eq!(t[(1, n)], -0.7);
        assert_eq!(t[(2, n)], -0.5);
        // (4,2): -T{b3}
        assert_eq!(t[(3 * n, n)], -0.6);
        assert_eq!(t[(3 * n + 2, n)], 1.2);
        // (3,4): -T{b1}
        assert_eq!(t[(2 * n + 1, 3 * n)], -0.7);
        // zero (2,1)
        assert_eq!(t.view((n, 0), (n, n)).amax(), 0.0);
        let t3 = build_t_cascade(&th, n, Variant::Wnsf3).unwrap();
        // WNSF3 row 3: [-T{b3}, 0, T{f3}, 0]
        assert_eq!(t3[(2 * n, 0)], -0.6);
        assert_eq!(t3[(2 * n + 1, 2 * n)], -0.75);
        assert_eq!(t3.view((2 * n, 3 * n), (n, n)).amax(), 0.0);
    }

    #[test]
    fn structured_solve_and_apply_match_dense() {
        let th = ThetaVector::from_cascade(&CascadeModel::benchmark());
        let n = 12;
        for v in [Variant::Wnsf1, Variant::Wnsf3] {
            let lin = linearization_cascade(&th, n, v).unwrap();
            let dense = lin.to_dense();
            let x = DVector::from_vec(white_noise(4 * n, 1.0, 3).unwrap());
            let tx = lin.apply(&x);
            assert!((&tx - &dense * &x).amax() < 1e-12);
            let mut m = DMatrix::from_column_slice(4 * n, 1, tx.as_slice());
            lin.solve_mut(&mut m);
            assert!((m.column(0) - &x).amax() < 1e-9);
            assert!((dense.clone().lu().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn step2_ls_orthonormal_and_rank_deficient() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let g = DVector::from_vec(vec![2.0, -3.0, 7.0]);
        let th = step2_ls(&q, &g).unwrap();
        assert!((th - q.transpose() * &g).amax() < 1e-14);

        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        match step2_ls(&dup, &g) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![1]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    fn noiseless_data(n_samp: usize, seed: u64) -> DataRecord {
        let m = CascadeModel::benchmark().with_noise(0.0, 0.0);
        let (u1, u2) = gen_inputs(n_samp, &InputSpec::default(), seed).unwrap();
        simulate_network(&m, &u1, &u2, 0).unwrap()
    }

    #[test]
    fn step3_reduces_to_step2_with_identity_weighting() {
        let m = CascadeModel::benchmark();
        let (u1, u2) = gen_inputs(800, &InputSpec::default(), 2).unwrap();
        let data = simulate_network(&m, &u1, &u2, 2).unwrap();
        let (fir, q, ls) = step2_estimate(&data, &orders(), 20, Variant::Wnsf1).unwrap();
        let p = FirCovariance::identity(40, 2);
        let ident = DMatrix::<f64>::identity(80, 80);
        let w = step3_wls(&q, fir.g_hat(), &ident, &p).unwrap();
        assert!((w - DVector::from_column_slice(ls.values())).amax() < 1e-10);
    }

    #[test]
    fn noiseless_identification_both_variants() {
        let data = noiseless_data(20_000, 5);
        let truth = ThetaVector::from_cascade(&CascadeModel::benchmark());
        let cfg = WnsfConfig { n_grid: vec![60], ..WnsfConfig::default() };
        let r1 = wnsf_identify(&data, &orders(), &cfg).unwrap();
        let r3 = wnsf_identify(&data, &orders(), &cfg.clone().with_variant(Variant::Wnsf3)).unwrap();
        for r in [&r1, &r3] {
            let err = r.theta.values().iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-4, "error {err}");
            assert!(r.converged);
            assert_eq!(r.chosen_n, 60);
        }
        let diff = r1.theta.values().iter().zip(r3.theta.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-8, "variants differ by {diff}");
    }

    #[test]
    fn wls_satisfies_weighted_normal_equations() {
        let m = CascadeModel::benchmark();
        let (u1, u2) = gen_inputs(3000, &InputSpec::default(), 9).unwrap();
        let data = simulate_network(&m, &u1, &u2, 9).unwrap();
        let (fir, q, ls) = step2_estimate(&data, &orders(), 25, Variant::Wnsf1).unwrap();
        let p = fir_covariance(&fir, &[2.0, 3.0]).unwrap();
        let t = build_t_cascade(&ls, 25, Variant::Wnsf1).unwrap();
        let th = step3_wls(&q, fir.g_hat(), &t, &p).unwrap();
        // W = T^-T P^-1 T^-1 with P^-1 = diag(1/lambda) * info
        let tinv = t.clone().try_inverse().unwrap();
        let scale = DVector::from_fn(100, |i, _| if i < 50 { 0.5 } else { 1.0 / 3.0 });
        let w = tinv.transpose() * DMatrix::from_diagonal(&scale) * fir.info() * &tinv;
        let resid = fir.g_hat() - &q * &th;
        let grad = q.transpose() * &w * &resid;
        let scale = (q.transpose() * &w * fir.g_hat()).amax();
        assert!(grad.amax() <= 1e-9 * scale, "{} vs {}", grad.amax(), scale);

        // structured T gives the same answer
        let lin = linearization_cascade(&ls, 25, Variant::Wnsf1).unwrap();
        let th2 = step3_wls(&q, fir.g_hat(), &lin, &p).unwrap();
        assert!((th2 - th).amax() < 1e-9);
    }

    #[test]
    fn weighting_scale_does_not_move_the_estimate() {
        let m = CascadeModel::benchmark();
        let (u1, u2) = gen_inputs(2000, &InputSpec::default(), 4).unwrap();
        let data = simulate_network(&m, &u1, &u2, 4).unwrap();
        let (fir, q, ls) = step2_estimate(&data, &orders(), 20, Variant::Wnsf1).unwrap();
        let lin = linearization_cascade(&ls, 20, Variant::Wnsf1).unwrap();
        let a = step3_wls(&q, fir.g_hat(), &lin, &fir_covariance(&fir, &[2.0, 3.0]).unwrap()).unwrap();
        let b = step3_wls(&q, fir.g_hat(), &lin, &fir_covariance(&fir, &[14.0, 21.0]).unwrap()).unwrap();
        assert!((a - b).amax() <= 1e-10);
    }

    #[test]
    fn siso_noiseless_and_scale_invariance() {
        let tf = TransferFunction::from_coeffs(&[0.7, 0.5], &[-1.2, 0.5], 1).unwrap();
        let (u, _) = gen_inputs(5000, &InputSpec::default(), 1).unwrap();
        let y = tf.filter(&u);
        let rec = SisoRecord::new(u.clone(), y).unwrap();
        let cfg = WnsfConfig { n_grid: vec![50], ..WnsfConfig::default() };
        let r = wnsf_siso(&rec, &tf.order_spec(), &cfg).unwrap();
        let truth = ThetaVector::from_modules(&[&tf]);
        let err = r.theta.values().iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");

        let noise = white_noise(5000, 1.0, 2).unwrap();
        let yn: Vec<f64> = tf.filter(&u).iter().zip(&noise).map(|(a, b)| a + b).collect();
        let fir = estimate_fir_siso(&u, &yn, 30).unwrap();
        let q = build_q_siso(fir.g_hat().as_slice(), &tf.order_spec()).unwrap();
        let ls = ThetaVector::new(step2_ls(&q, fir.g_hat()).unwrap().as_slice().to_vec(), vec![tf.order_spec()]).unwrap();
        let lin = linearization_siso(&ls, 30).unwrap();
        let a = step3_wls(&q, fir.g_hat(), &lin, &fir_covariance(&fir, &[1.0]).unwrap()).unwrap();
        let b = step3_wls(&q, fir.g_hat(), &lin, &fir_covariance(&fir, &[37.5]).unwrap()).unwrap();
        assert!((a - b).amax() <= 1e-10);
    }

    #[test]
    fn config_validation() {
        let o = orders();
        assert!(WnsfConfig { n_grid: vec![], ..Default::default() }.validate(&o).is_err());
        assert!(WnsfConfig { n_grid: vec![2], ..Default::default() }.validate(&o).is_err());
        assert!(WnsfConfig { max_iter: 0, ..Default::default() }.validate(&o).is_err());
        assert!(WnsfConfig { tol: 0.0, ..Default::default() }.validate(&o).is_err());
        assert!(WnsfConfig::default().validate(&o).is_ok());
    }

    #[test]
    fn seeded_run_is_reproducible() {
        let m = CascadeModel::benchmark();
        let (u1, u2) = gen_inputs(1000, &InputSpec::default(), 77).unwrap();
        let data = simulate_network(&m, &u1, &u2, 77).unwrap();
        let cfg = WnsfConfig { n_grid: vec![20, 30], ..Default::default() };
        let a = wnsf_identify(&data, &orders(), &cfg).unwrap();
        let b = wnsf_identify(&data, &orders(), &cfg).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.trials, b.trials);
    }

    #[test]
    fn step2_at_true_impulse_response() {
        let m = CascadeModel::benchmark();
        let g = true_g(&m, 60);
        let truth = ThetaVector::from_cascade(&m);
        for v in [Variant::Wnsf1, Variant::Wnsf3] {
            let q = build_q_cascade(&g, &orders(), v).unwrap();
            let th = step2_ls(&q, &DVector::from_vec(g.clone())).unwrap();
            let err = th.iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-4, "{v:?}: {err}");
        }
    }

    #[test]
    fn residual_covariance_cases() {
        let m = CascadeModel::benchmark().with_noise(0.0, 0.0);
        let (u1, u2) = gen_inputs(2000, &InputSpec::default(), 12).unwrap();
        let data = simulate_network(&m, &u1, &u2, 12).unwrap();
        let l = residual_covariance(&data, &ThetaVector::from_cascade(&m)).unwrap();
        assert!(l[0] <= 1e-10 && l[1] <= 1e-10);

        let zero = DataRecord::new(u1.clone(), u2.clone(), vec![0.0; 2000], vec![0.0; 2000]).unwrap();
        let l = residual_covariance(&zero, &ThetaVector::zeros(orders().to_vec())).unwrap();
        assert_eq!(l, [0.0, 0.0]);

        let noisy = CascadeModel::benchmark();
        let (u1, u2) = gen_inputs(60_000, &InputSpec::default(), 13).unwrap();
        let data = simulate_network(&noisy, &u1, &u2, 13).unwrap();
        let l = residual_covariance(&data, &ThetaVector::from_cascade(&noisy)).unwrap();
        assert!((l[0] / 2.0 - 1.0).abs() <= 0.05 && (l[1] / 3.0 - 1.0).abs() <= 0.05, "{l:?}");
    }

    fn random_theta() -> impl Strategy<Value = ThetaVector> {
        prop::collection::vec(-1.0..1.0f64, 13)
            .prop_map(|v| ThetaVector::new(v, orders().to_vec()).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn linearization_identity(th in random_theta(), seed in 0u64..1000, wnsf3 in any::<bool>()) {
            let n = 40;
            let v = if wnsf3 { Variant::Wnsf3 } else { Variant::Wnsf1 };
            let ga = white_noise(4 * n, 1.0, seed).unwrap();
            let gb = white_noise(4 * n, 1.0, seed + 5000).unwrap();
            let x = DVector::from_column_slice(th.values());
            let ra = DVector::from_vec(ga.clone()) - build_q_cascade(&ga, &orders(), v).unwrap() * &x;
            let rb = DVector::from_vec(gb.clone()) - build_q_cascade(&gb, &orders(), v).unwrap() * &x;
            let t = build_t_cascade(&th, n, v).unwrap();
            let dg = DVector::from_vec(ga) - DVector::from_vec(gb);
            let lhs = ra - rb - t * &dg;
            prop_assert!(lhs.amax() <= 1e-12 * dg.amax() * 10.0);
        }

        #[test]
        fn q_is_affine_in_g(seed in 0u64..1000, alpha in 0.0..1.0f64) {
            let ga = white_noise(80, 1.0, seed).unwrap();
            let gb = white_noise(80, 1.0, seed + 1).unwrap();
            let mix: Vec<f64> = ga.iter().zip(&gb).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let o = orders();
            let qa = build_q_cascade(&ga, &o, Variant::Wnsf1).unwrap();
            let qb = build_q_cascade(&gb, &o, Variant::Wnsf1).unwrap();
            let qm = build_q_cascade(&mix, &o, Variant::Wnsf1).unwrap();
            prop_assert!((qm - (qa * alpha + qb * (1.0 - alpha))).amax() < 1e-14);
        }
    }
}
