//! Prediction-error baseline on the structured cascade parametrization.
//!
//! The cost is `V(theta) = det((1/N) sum eps eps^T)`. It is minimized by
//! relaxation: at each iterate the sample covariance `S` is frozen as the
//! weighting and a damped Gauss-Newton step is taken on
//! `tr(S^-1 (1/N) sum eps eps^T)`. A decrease of that trace below 2 implies
//! a decrease of the determinant, and both share stationary points.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{filter_into, TransferFunction};
use crate::netsim::{noise_free_outputs, DataRecord};
use crate::theta::ThetaVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PemConfig {
    pub max_iter: usize,
    /// Stop once the relaxed-criterion gradient norm is below
    /// `tol * (1 + criterion)`.
    pub tol: f64,
}

impl Default for PemConfig {
    fn default() -> Self {
        PemConfig { max_iter: 1000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PemResult {
    pub theta: ThetaVector,
    pub cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Cost before the first and after every accepted step.
    pub trajectory: Vec<f64>,
}

fn check_cascade(theta: &ThetaVector) -> Result<()> {
    if theta.orders().len() != 3 {
        return Err(Error::Dimension(format!(
            "cascade needs three modules, theta has {}",
            theta.orders().len()
        )));
    }
    if let Some(module) = theta.unstable_module() {
        return Err(Error::Unstable { module });
    }
    Ok(())
}

/// `eps(t) = y(t) - G(q, theta) u(t)` for both outputs.
pub fn predict_errors(theta: &ThetaVector, data: &DataRecord) -> Result<[Vec<f64>; 2]> {
    check_cascade(theta)?;
    let (g1, g2, g3) = (theta.module(0), theta.module(1), theta.module(2));
    let (mut e1, mut e2) = noise_free_outputs(&g1, &g2, &g3, &data.u1, &data.u2);
    for t in 0..data.len() {
        e1[t] = data.y1[t] - e1[t];
        e2[t] = data.y2[t] - e2[t];
    }
    Ok([e1, e2])
}

fn sample_covariance(e: &[Vec<f64>; 2]) -> Matrix2<f64> {
    let n = e[0].len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
    let s12 = dot(&e[0], &e[1]);
    Matrix2::new(dot(&e[0], &e[0]), s12, s12, dot(&e[1], &e[1]))
}

/// Determinant of the 2x2 prediction-error sample covariance.
pub fn pem_cost(theta: &ThetaVector, data: &DataRecord) -> Result<f64> {
    let e = predict_errors(theta, data)?;
    Ok(sample_covariance(&e).determinant())
}

fn delayed_into(col: &mut [f64], src: &[f64], lag: usize, sign: f64) {
    for (t, c) in col.iter_mut().enumerate() {
        *c = if t >= lag { sign * src[t - lag] } else { 0.0 };
    }
}

/// Base sensitivity signals of `w = G v`: `1/F w` (for the denominator)
/// and `1/F v` (for the numerator).
fn module_bases(g: &TransferFunction, v: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let den = g.den.coeffs();
    let mut a = vec![0.0; v.len()];
    let mut c = vec![0.0; v.len()];
    filter_into(&[1.0], den, 0, w, &mut a);
    filter_into(&[1.0], den, 0, v, &mut c);
    (a, c)
}

/// Writes the columns of one module into `jac`: `+1/F w` delayed by `k` for
/// `f_k` and `-1/F v` delayed by `nk + k` for `b_k`, which is the derivative
/// of the prediction error (the sign of the output derivative flipped).
fn write_module(jac: &mut DMatrix<f64>, offset: usize, g: &TransferFunction, a: &[f64], c: &[f64]) {
    let o = g.order_spec();
    for k in 1..=o.nf {
        let mut col = jac.column_mut(offset + k - 1);
        delayed_into(col.as_mut_slice(), a, k, 1.0);
    }
    for k in 0..o.nb {
        let mut col = jac.column_mut(offset + o.nf + k);
        delayed_into(col.as_mut_slice(), c, o.nk + k, -1.0);
    }
}

/// Analytic `d eps_i / d theta` for both outputs, each `N x d`, by filtering
/// the internal signals through the sensitivity paths.
pub fn prediction_jacobian(theta: &ThetaVector, data: &DataRecord) -> Result<[DMatrix<f64>; 2]> {
    check_cascade(theta)?;
    let (g1, g2, g3) = (theta.module(0), theta.module(1), theta.module(2));
    let n = data.len();
    let d = theta.len();
    let x1 = g1.filter(&data.u1);
    let v2: Vec<f64> = x1.iter().zip(&data.u2).map(|(a, b)| a + b).collect();
    let s = g2.filter(&v2);
    let y2 = g3.filter(&s);

    let mut j1 = DMatrix::zeros(n, d);
    let mut j2 = DMatrix::zeros(n, d);

    // module 1 reaches y1 through G2 and y2 through G3 G2
    let (a, c) = module_bases(&g1, &data.u1, &x1);
    let (a, c) = (g2.filter(&a), g2.filter(&c));
    write_module(&mut j1, theta.offset(0), &g1, &a, &c);
    let (a, c) = (g3.filter(&a), g3.filter(&c));
    write_module(&mut j2, theta.offset(0), &g1, &a, &c);

    // module 2 reaches y1 directly and y2 through G3
    let (a, c) = module_bases(&g2, &v2, &s);
    write_module(&mut j1, theta.offset(1), &g2, &a, &c);
    let (a, c) = (g3.filter(&a), g3.filter(&c));
    write_module(&mut j2, theta.offset(1), &g2, &a, &c);

    // module 3 only reaches y2
    let (a, c) = module_bases(&g3, &s, &y2);
    write_module(&mut j2, theta.offset(2), &g3, &a, &c);

    Ok([j1, j2])
}

/// Central finite-difference Jacobian of the prediction errors. Used to
/// validate [`prediction_jacobian`].
pub fn finite_difference_jacobian(
    theta: &ThetaVector,
    data: &DataRecord,
    step: f64,
) -> Result<[DMatrix<f64>; 2]> {
    check_cascade(theta)?;
    let n = data.len();
    let mut j1 = DMatrix::zeros(n, theta.len());
    let mut j2 = DMatrix::zeros(n, theta.len());
    for k in 0..theta.len() {
        let h = step * theta.values()[k].abs().max(1.0);
        let mut plus = theta.clone();
        plus.values_mut()[k] += h;
        let mut minus = theta.clone();
        minus.values_mut()[k] -= h;
        let [p1, p2] = predict_errors(&plus, data)?;
        let [m1, m2] = predict_errors(&minus, data)?;
        for t in 0..n {
            j1[(t, k)] = (p1[t] - m1[t]) / (2.0 * h);
            j2[(t, k)] = (p2[t] - m2[t]) / (2.0 * h);
        }
    }
    Ok([j1, j2])
}

/// Relaxed criterion with frozen weighting `w = Lambda^-1`: value, gradient
/// and Gauss-Newton Hessian.
struct Relaxed {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn relaxed(w: &Matrix2<f64>, e: &[Vec<f64>; 2], jac: &[DMatrix<f64>; 2]) -> Relaxed {
    let n = e[0].len() as f64;
    let s = sample_covariance(e);
    let value = (w * s).trace();
    let d = jac[0].ncols();
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let ev = [DVector::from_column_slice(&e[0]), DVector::from_column_slice(&e[1])];
    for i in 0..2 {
        for j in 0..2 {
            let wij = w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            grad += jac[i].tr_mul(&ev[j]) * (2.0 * wij / n);
            hess += jac[i].tr_mul(&jac[j]) * (2.0 * wij / n);
        }
    }
    Relaxed { value, grad, hess }
}

fn weighting(e: &[Vec<f64>; 2]) -> Matrix2<f64> {
    let s = sample_covariance(e);
    let ridge = 1e-9 * 0.5 * s.trace() + f64::MIN_POSITIVE;
    (s + Matrix2::identity() * ridge).try_inverse().unwrap_or_else(Matrix2::identity)
}

/// Gradient of the relaxed criterion at `theta`, weighting frozen at the
/// current sample covariance. Returns `(criterion, gradient)`.
pub fn relaxed_gradient(theta: &ThetaVector, data: &DataRecord) -> Result<(f64, DVector<f64>)> {
    let e = predict_errors(theta, data)?;
    let jac = prediction_jacobian(theta, data)?;
    let r = relaxed(&weighting(&e), &e, &jac);
    Ok((r.value, r.grad))
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Local minimization of the determinant criterion from `theta_init`.
pub fn pem_minimize(data: &DataRecord, theta_init: &ThetaVector, config: &PemConfig) -> Result<PemResult> {
    if config.max_iter == 0 || !(config.tol > 0.0) {
        return Err(Error::Parameter("PEM needs max_iter >= 1 and tol > 0".into()));
    }
    check_cascade(theta_init)?;
    // Below this the fit is exact to working precision.
    let exact = 1e-30 * mean_square(&data.y1) * mean_square(&data.y2);

    let mut theta = theta_init.clone();
    let mut e = predict_errors(&theta, data)?;
    let mut cost = sample_covariance(&e).determinant();
    let mut trajectory = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    let mut damping = 1e-4;

    'outer: for _ in 0..config.max_iter {
        if cost <= exact {
            converged = true;
            break;
        }
        let jac = prediction_jacobian(&theta, data)?;
        let r = relaxed(&weighting(&e), &e, &jac);
        if r.grad.norm() <= config.tol * (1.0 + r.value) {
            converged = true;
            break;
        }
        let diag = DVector::from_fn(r.hess.nrows(), |i, _| r.hess[(i, i)].max(1e-300));
        loop {
            let mut a = r.hess.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * diag[i];
            }
            let step = a.cholesky().map(|c| -c.solve(&r.grad));
            if let Some(step) = step {
                let values: Vec<f64> = theta.values().iter().zip(step.iter()).map(|(t, s)| t + s).collect();
                let cand = theta.with_values(values)?;
                if cand.is_stable() {
                    let ce = predict_errors(&cand, data)?;
                    let cc = sample_covariance(&ce).determinant();
                    if cc < cost {
                        theta = cand;
                        e = ce;
                        cost = cc;
                        trajectory.push(cost);
                        iterations += 1;
                        damping = (damping * 0.1).max(1e-12);
                        continue 'outer;
                    }
                }
            }
            damping *= 10.0;
            if damping > 1e12 {
                converged = cost <= exact;
                break 'outer;
            }
        }
    }

    Ok(PemResult { theta, cost, iterations, converged, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{gen_inputs, simulate_network, white_noise, CascadeModel, InputSpec};

    fn dataset(n: usize, noise: bool, seed: u64) -> (CascadeModel, DataRecord) {
        let mut m = CascadeModel::benchmark();
        if !noise {
            m = m.with_noise(0.0, 0.0);
        }
        let (u1, u2) = gen_inputs(n, &InputSpec::default(), seed).unwrap();
        let d = simulate_network(&m, &u1, &u2, seed).unwrap();
        (m, d)
    }

    #[test]
    fn errors_at_truth() {
        let (m, d) = dataset(500, false, 1);
        let th = ThetaVector::from_cascade(&m);
        let [e1, e2] = predict_errors(&th, &d).unwrap();
        assert!(e1.iter().chain(&e2).all(|v| v.abs() < 1e-10));
        assert!(pem_cost(&th, &d).unwrap() <= 1e-18);

        let (m, d) = dataset(500, true, 2);
        let [e1, e2] = predict_errors(&ThetaVector::from_cascade(&m), &d).unwrap();
        let n1 = white_noise(500, 2.0, 2).unwrap();
        let n2 = white_noise(500, 3.0, 3).unwrap();
        assert!(e1.iter().zip(&n1).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(e2.iter().zip(&n2).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn zero_gain_model_returns_outputs() {
        let (m, d) = dataset(100, true, 3);
        let zero = ThetaVector::zeros(ThetaVector::from_cascade(&m).orders().to_vec());
        let [e1, e2] = predict_errors(&zero, &d).unwrap();
        assert_eq!(e1, d.y1);
        assert_eq!(e2, d.y2);
    }

    #[test]
    fn unstable_theta_is_rejected() {
        let (m, d) = dataset(100, true, 3);
        let mut th = ThetaVector::from_cascade(&m);
        th.values_mut()[1] = 1.5;
        assert!(matches!(predict_errors(&th, &d), Err(Error::Unstable { module: 1 })));
    }

    #[test]
    fn cost_homogeneity() {
        let (m, d) = dataset(400, true, 4);
        let th = ThetaVector::from_cascade(&m);
        let c = 1.7;
        let scaled = DataRecord::new(
            d.u1.clone(),
            d.u2.clone(),
            d.y1.iter().map(|v| v * c).collect(),
            d.y2.iter().map(|v| v * c).collect(),
        )
        .unwrap();
        // scale the gain of G2 (the common factor of both outputs)
        let mut ths = th.clone();
        let off = th.offset(1) + 2;
        ths.values_mut()[off] *= c;
        ths.values_mut()[off + 1] *= c;
        let v = pem_cost(&th, &d).unwrap();
        let vs = pem_cost(&ths, &scaled).unwrap();
        assert!((vs / v - c.powi(4)).abs() < 1e-9);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (m, d) = dataset(300, true, 5);
        let mut th = ThetaVector::from_cascade(&m);
        for (k, v) in th.values_mut().iter_mut().enumerate() {
            *v += 0.01 * ((k as f64) * 1.3).sin();
        }
        let an = prediction_jacobian(&th, &d).unwrap();
        let fd = finite_difference_jacobian(&th, &d, 1e-6).unwrap();
        for i in 0..2 {
            let scale = fd[i].amax().max(1.0);
            assert!((&an[i] - &fd[i]).amax() <= 1e-5 * scale);
        }
    }

    #[test]
    fn start_at_truth_noiseless_is_already_optimal() {
        let (m, d) = dataset(400, false, 6);
        let r = pem_minimize(&d, &ThetaVector::from_cascade(&m), &PemConfig::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
        assert!(r.cost <= 1e-18);
    }

    #[test]
    fn perturbed_start_noiseless_converges() {
        let (m, d) = dataset(2000, false, 7);
        let truth = ThetaVector::from_cascade(&m);
        let mut init = truth.clone();
        for v in init.values_mut() {
            *v *= 1.01;
        }
        let r = pem_minimize(&d, &init, &PemConfig::default()).unwrap();
        assert!(r.converged);
        let err = r.theta.values().iter().zip(truth.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert!(r.trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn noisy_minimization_decreases_cost_and_stops_at_stationary_point() {
        let (m, d) = dataset(3000, true, 8);
        let cfg = PemConfig::default();
        let r = pem_minimize(&d, &ThetaVector::from_cascade(&m), &cfg).unwrap();
        assert!(r.cost <= r.trajectory[0]);
        assert!(r.trajectory.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.converged);
        let (value, grad) = relaxed_gradient(&r.theta, &d).unwrap();
        assert!(grad.norm() <= cfg.tol * (1.0 + value));
    }
}
