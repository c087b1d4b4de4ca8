//! Non-parametric FIR estimation by least squares.
//!
//! Every output is regressed on `n` lags (0..n-1) of every input, with
//! samples before the start of the record taken as zero. Since each output
//! sees the same regressors, the information matrix is block diagonal with
//! one shared Gram block per output; only that block is stored.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::netsim::DataRecord;

/// Reciprocal condition below which a Gram block is rejected.
pub const MIN_RCOND: f64 = 1e-12;

/// Stacked FIR coefficients with the unit-variance information matrix.
#[derive(Debug, Clone)]
pub struct FirEstimate {
    n: usize,
    n_inputs: usize,
    n_outputs: usize,
    g_hat: DVector<f64>,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl FirEstimate {
    /// FIR order (coefficients per input-output channel).
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Blocks in output-major order: `(g11, g12, g21, g22)` for two inputs
    /// and two outputs.
    pub fn g_hat(&self) -> &DVector<f64> {
        &self.g_hat
    }

    /// Channel `(output, input)` coefficients, both 0-based.
    pub fn channel(&self, output: usize, input: usize) -> &[f64] {
        let start = (output * self.n_inputs + input) * self.n;
        &self.g_hat.as_slice()[start..start + self.n]
    }

    /// Shared per-output Gram block `sum_t phi(t) phi(t)^T`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Full block-diagonal information matrix with unit noise variances.
    pub fn info(&self) -> DMatrix<f64> {
        block_diag(&self.gram, self.n_outputs)
    }

    pub(crate) fn gram_factor(&self) -> &DMatrix<f64> {
        self.chol.l_dirty()
    }
}

fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let m = block.nrows();
    let mut out = DMatrix::zeros(m * copies, m * copies);
    for c in 0..copies {
        out.view_mut((c * m, c * m), (m, m)).copy_from(block);
    }
    out
}

/// `sum_t a(t-k) b(t-l)` for `k, l < n`, zero-padded before t = 0.
///
/// Uses `R(k+1, l+1) = R(k, l) - a(N-1-k) b(N-1-l)` so the cost is
/// `O(N n + n^2)` instead of `O(N n^2)`.
fn lagged_cross_gram(a: &[f64], b: &[f64], n: usize) -> DMatrix<f64> {
    let len = a.len();
    let mut r = DMatrix::zeros(n, n);
    for d in 0..n.min(len) {
        // k = 0, l = d:  sum_{t=d}^{N-1} a(t) b(t-d)
        let mut acc: f64 = (d..len).map(|t| a[t] * b[t - d]).sum();
        r[(0, d)] = acc;
        for k in 1..n - d {
            let l = k + d;
            if l > len {
                break;
            }
            acc -= a[len - k] * b[len - l];
            r[(k, l)] = acc;
        }
        if d == 0 {
            continue;
        }
        // k = d, l = 0:  sum_{t=d}^{N-1} a(t-d) b(t)
        let mut acc: f64 = (d..len).map(|t| a[t - d] * b[t]).sum();
        r[(d, 0)] = acc;
        for l in 1..n - d {
            let k = l + d;
            if k > len {
                break;
            }
            acc -= a[len - k] * b[len - l];
            r[(k, l)] = acc;
        }
    }
    r
}

/// `sum_t u(t-k) y(t)` for `k < n`.
fn lagged_cross(u: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let len = u.len();
    (0..n)
        .map(|k| if k >= len { 0.0 } else { (k..len).map(|t| u[t - k] * y[t]).sum() })
        .collect()
}

/// Gram block over the stacked regressor `[u_1 lags, u_2 lags, ...]`.
pub fn regressor_gram(inputs: &[&[f64]], n: usize) -> DMatrix<f64> {
    let p = inputs.len();
    let mut g = DMatrix::zeros(p * n, p * n);
    for i in 0..p {
        for j in i..p {
            let r = lagged_cross_gram(inputs[i], inputs[j], n);
            g.view_mut((i * n, j * n), (n, n)).copy_from(&r);
            if i != j {
                g.view_mut((j * n, i * n), (n, n)).copy_from(&r.transpose());
            }
        }
    }
    g
}

fn cross_vector(inputs: &[&[f64]], outputs: &[&[f64]], n: usize) -> DVector<f64> {
    let mut v = Vec::with_capacity(inputs.len() * outputs.len() * n);
    for y in outputs {
        for u in inputs {
            v.extend(lagged_cross(u, y, n));
        }
    }
    DVector::from_vec(v)
}

fn check_lengths(inputs: &[&[f64]], outputs: &[&[f64]], n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Parameter("FIR order must be at least 1".into()));
    }
    let len = inputs[0].len();
    if inputs.iter().chain(outputs).any(|s| s.len() != len) {
        return Err(Error::Dimension("signals have different lengths".into()));
    }
    let required = inputs.len() * n;
    if len <= required {
        return Err(Error::InsufficientData { samples: len, required });
    }
    Ok(len)
}

/// `(sum phi phi^T, sum phi y)` for the two-input, two-output record.
///
/// The information matrix is `4n x 4n` block diagonal; the cross vector is
/// ordered `(g11, g12, g21, g22)`.
pub fn build_normal_equations(data: &DataRecord, n: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let inputs = [data.u1.as_slice(), data.u2.as_slice()];
    let outputs = [data.y1.as_slice(), data.y2.as_slice()];
    check_lengths(&inputs, &outputs, n)?;
    let gram = regressor_gram(&inputs, n);
    Ok((block_diag(&gram, 2), cross_vector(&inputs, &outputs, n)))
}

/// Crude reciprocal condition from a Cholesky factor's diagonal.
fn chol_rcond(l: &DMatrix<f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if hi == 0.0 {
        0.0
    } else {
        (lo / hi).powi(2)
    }
}

fn factor_checked(gram: &DMatrix<f64>, n: usize, n_inputs: usize) -> Result<Cholesky<f64, Dyn>> {
    let good = Cholesky::new(gram.clone()).filter(|c| chol_rcond(c.l_dirty()) >= MIN_RCOND);
    if let Some(c) = good {
        return Ok(c);
    }
    // Find which input is to blame.
    for i in 0..n_inputs {
        let sub = gram.view((i * n, i * n), (n, n)).clone_owned();
        let rcond = Cholesky::new(sub).map(|c| chol_rcond(c.l_dirty())).unwrap_or(0.0);
        if rcond < MIN_RCOND {
            return Err(Error::Excitation { block: format!("u{}", i + 1), rcond });
        }
    }
    let rcond = Cholesky::new(gram.clone()).map(|c| chol_rcond(c.l_dirty())).unwrap_or(0.0);
    let names: Vec<String> = (1..=n_inputs).map(|i| format!("u{i}")).collect();
    Err(Error::Excitation { block: format!("{} jointly", names.join(",")), rcond })
}

/// Least-squares FIR fit for arbitrary input and output channel counts.
pub fn estimate_fir_mimo(inputs: &[&[f64]], outputs: &[&[f64]], n: usize) -> Result<FirEstimate> {
    if inputs.is_empty() || outputs.is_empty() {
        return Err(Error::Dimension("need at least one input and one output".into()));
    }
    check_lengths(inputs, outputs, n)?;
    let gram = regressor_gram(inputs, n);
    let chol = factor_checked(&gram, n, inputs.len())?;
    let m = inputs.len() * n;
    let cross = cross_vector(inputs, outputs, n);
    let mut g_hat = DVector::zeros(cross.len());
    for o in 0..outputs.len() {
        let rhs = cross.rows(o * m, m).clone_owned();
        g_hat.rows_mut(o * m, m).copy_from(&chol.solve(&rhs));
    }
    Ok(FirEstimate { n, n_inputs: inputs.len(), n_outputs: outputs.len(), g_hat, gram, chol })
}

/// FIR estimate of the cascade's 2x2 transfer matrix.
pub fn estimate_fir(data: &DataRecord, n: usize) -> Result<FirEstimate> {
    estimate_fir_mimo(
        &[data.u1.as_slice(), data.u2.as_slice()],
        &[data.y1.as_slice(), data.y2.as_slice()],
        n,
    )
}

/// Single-input, single-output FIR estimate.
pub fn estimate_fir_siso(u: &[f64], y: &[f64], n: usize) -> Result<FirEstimate> {
    estimate_fir_mimo(&[u], &[y], n)
}

/// Covariance `P = (sum phi Lambda^-1 phi^T)^-1` of a FIR estimate, kept in
/// factored form.
///
/// With `L L^T` the Gram block, `P^-1 = C C^T` where `C` is block diagonal
/// with blocks `L / sqrt(lambda_i)`.
#[derive(Debug, Clone)]
pub struct FirCovariance {
    factor: DMatrix<f64>,
    inv_sqrt_lambda: Vec<f64>,
}

/// Scales the stored information by the output noise variances.
pub fn fir_covariance(est: &FirEstimate, lambdas: &[f64]) -> Result<FirCovariance> {
    if lambdas.len() != est.n_outputs {
        return Err(Error::Dimension(format!(
            "{} variances for {} outputs",
            lambdas.len(),
            est.n_outputs
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::Parameter(format!("noise variance must be positive, got {l}")));
    }
    let mut factor = est.gram_factor().clone();
    factor.fill_upper_triangle(0.0, 1);
    Ok(FirCovariance { factor, inv_sqrt_lambda: lambdas.iter().map(|l| 1.0 / l.sqrt()).collect() })
}

impl FirCovariance {
    /// `P = I` for `outputs` blocks of size `block`.
    pub fn identity(block: usize, outputs: usize) -> Self {
        FirCovariance { factor: DMatrix::identity(block, block), inv_sqrt_lambda: vec![1.0; outputs] }
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows() * self.inv_sqrt_lambda.len()
    }

    fn block(&self) -> usize {
        self.factor.nrows()
    }

    /// `C^T X`, so that `x^T P^-1 x = |C^T x|^2`.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.block();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let lt = self.factor.transpose();
        for (o, s) in self.inv_sqrt_lambda.iter().enumerate() {
            let b = &lt * x.rows(o * m, m) * *s;
            out.rows_mut(o * m, m).copy_from(&b);
        }
        out
    }

    /// `P^-1 x`.
    pub fn apply_info(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.block();
        let mut out = DVector::zeros(x.len());
        for (o, s) in self.inv_sqrt_lambda.iter().enumerate() {
            let v = &self.factor * (self.factor.transpose() * x.rows(o * m, m));
            out.rows_mut(o * m, m).copy_from(&(v * (s * s)));
        }
        out
    }

    /// `P x`, by two triangular solves per block.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.block();
        let mut out = DVector::zeros(x.len());
        for (o, s) in self.inv_sqrt_lambda.iter().enumerate() {
            let mut v = x.rows(o * m, m).clone_owned();
            self.factor.solve_lower_triangular_mut(&mut v);
            self.factor.tr_solve_lower_triangular_mut(&mut v);
            out.rows_mut(o * m, m).copy_from(&(v / (s * s)));
        }
        out
    }

    /// Dense `P`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut p = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            p.set_column(j, &self.apply(&e));
        }
        p
    }
}
