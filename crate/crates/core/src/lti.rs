//! Polynomials in the backward shift operator and the discrete-time
//! transfer functions built from them.
//!
//! Coefficients are stored in ascending powers of `q^-1`, so `coeffs[k]`
//! multiplies `q^-k`. All filtering assumes zero initial conditions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polynomial in `q^-1`, never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Polynomial(Vec<f64>);

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Parameter("polynomial needs at least one coefficient".into()));
        }
        Ok(Polynomial(coeffs))
    }

    /// The constant polynomial `1`.
    pub fn one() -> Self {
        Polynomial(vec![1.0])
    }

    /// Monic polynomial `1 + tail[0] q^-1 + tail[1] q^-2 + ...`.
    pub fn monic(tail: &[f64]) -> Self {
        let mut c = Vec::with_capacity(tail.len() + 1);
        c.push(1.0);
        c.extend_from_slice(tail);
        Polynomial(c)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Degree in `q^-1` (index of the last stored coefficient).
    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_monic(&self) -> bool {
        self.0[0] == 1.0
    }
}

impl TryFrom<Vec<f64>> for Polynomial {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Polynomial::new(v)
    }
}

impl From<Polynomial> for Vec<f64> {
    fn from(p: Polynomial) -> Vec<f64> {
        p.0
    }
}

/// Discrete convolution of two coefficient sequences.
pub fn poly_mul(a: &Polynomial, b: &Polynomial) -> Polynomial {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.coeffs().iter().enumerate() {
        for (j, &y) in b.coeffs().iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    Polynomial(out)
}

/// Schur-Cohn stability test for a monic denominator.
///
/// Returns `true` iff every root of `z^d den(z^-1)` lies strictly inside
/// the unit circle. A reflection coefficient of magnitude one (a marginal
/// root) is reported as unstable. Non-monic input is normalized first.
pub fn is_stable(den: &Polynomial) -> bool {
    let lead = den.coeffs()[0];
    if lead == 0.0 || !lead.is_finite() {
        return false;
    }
    let mut a: Vec<f64> = den.coeffs().iter().map(|c| c / lead).collect();
    if a.iter().any(|c| !c.is_finite()) {
        return false;
    }
    // Step-down recursion: strip one degree at a time, checking the
    // reflection coefficient (the trailing coefficient of the monic
    // polynomial at the current order).
    while a.len() > 1 {
        let m = a.len() - 1;
        let k = a[m];
        if k.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..m).map(|i| (a[i] - k * a[m - i]) / denom).collect();
        a = next;
    }
    true
}

/// Per-module structure: numerator length, denominator order and delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderSpec {
    /// Number of numerator coefficients.
    pub nb: usize,
    /// Number of free denominator coefficients (the leading 1 excluded).
    pub nf: usize,
    /// Input delay in samples.
    pub nk: usize,
}

impl OrderSpec {
    pub fn new(nb: usize, nf: usize, nk: usize) -> Result<Self> {
        if nb == 0 {
            return Err(Error::Parameter("numerator needs at least one coefficient".into()));
        }
        Ok(OrderSpec { nb, nf, nk })
    }

    /// Number of parameters `nf + nb`.
    pub fn n_params(&self) -> usize {
        self.nf + self.nb
    }

    /// Largest lag that appears in either polynomial.
    pub fn max_lag(&self) -> usize {
        self.nf.max(self.nk + self.nb - 1)
    }
}

/// Rational transfer function `q^-nk B(q) / F(q)` with monic `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub num: Polynomial,
    pub den: Polynomial,
    #[serde(default)]
    pub delay: usize,
}

impl TransferFunction {
    pub fn new(num: Polynomial, den: Polynomial, delay: usize) -> Result<Self> {
        if !den.is_monic() {
            return Err(Error::Parameter(format!(
                "denominator must be monic, leading coefficient is {}",
                den.coeffs()[0]
            )));
        }
        Ok(TransferFunction { num, den, delay })
    }

    /// Builds `q^-nk (num) / (1 + den_tail)` from raw coefficient slices.
    pub fn from_coeffs(num: &[f64], den_tail: &[f64], delay: usize) -> Result<Self> {
        TransferFunction::new(Polynomial::new(num.to_vec())?, Polynomial::monic(den_tail), delay)
    }

    /// The identity system.
    pub fn unit() -> Self {
        TransferFunction { num: Polynomial::one(), den: Polynomial::one(), delay: 0 }
    }

    /// Pure delay `q^-k`.
    pub fn delay(k: usize) -> Self {
        TransferFunction { num: Polynomial::one(), den: Polynomial::one(), delay: k }
    }

    pub fn is_stable(&self) -> bool {
        is_stable(&self.den)
    }

    pub fn order_spec(&self) -> OrderSpec {
        OrderSpec { nb: self.num.len(), nf: self.den.degree(), nk: self.delay }
    }

    /// Series connection `self * other`.
    pub fn series(&self, other: &TransferFunction) -> TransferFunction {
        TransferFunction {
            num: poly_mul(&self.num, &other.num),
            den: poly_mul(&self.den, &other.den),
            delay: self.delay + other.delay,
        }
    }

    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        filter(self, input)
    }

    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        impulse_response(self, n)
    }
}

/// Runs the difference equation
/// `y(t) = sum_i num[i] u(t - nk - i) - sum_{k>=1} den[k] y(t - k)`
/// with zero initial conditions.
pub fn filter(tf: &TransferFunction, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    filter_into(tf.num.coeffs(), tf.den.coeffs(), tf.delay, input, &mut out);
    out
}

/// In-place kernel shared by [`filter`] and the sensitivity code.
pub(crate) fn filter_into(num: &[f64], den: &[f64], delay: usize, input: &[f64], out: &mut [f64]) {
    debug_assert_eq!(input.len(), out.len());
    let nu = input.len();
    for t in 0..nu {
        let mut acc = 0.0;
        for (i, &b) in num.iter().enumerate() {
            let lag = delay + i;
            if lag > t {
                break;
            }
            acc += b * input[t - lag];
        }
        for (k, &a) in den.iter().enumerate().skip(1) {
            if k > t {
                break;
            }
            acc -= a * out[t - k];
        }
        out[t] = acc;
    }
}

/// First `n` impulse-response coefficients (polynomial long division).
pub fn impulse_response(tf: &TransferFunction, n: usize) -> Vec<f64> {
    let mut impulse = vec![0.0; n];
    if n > 0 {
        impulse[0] = 1.0;
    }
    filter(tf, &impulse)
}

/// `rows x cols` lower-triangular Toeplitz matrix whose column `j` holds
/// `x` delayed by `shift + j` rows, zero elsewhere.
///
/// `shift = 0` is the plain Toeplitz embedding of `x`; `shift = 1` applies
/// the down-shift first.
pub fn toeplitz_lower(x: &[f64], rows: usize, cols: usize, shift: usize) -> Result<DMatrix<f64>> {
    if rows < cols {
        return Err(Error::Dimension(format!(
            "toeplitz needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    fill_toeplitz(m.view_mut((0, 0), (rows, cols)), x, shift, 1.0);
    Ok(m)
}

/// Writes `sign * toeplitz(x, shift)` into an existing block.
pub(crate) fn fill_toeplitz(
    mut block: nalgebra::DMatrixViewMut<'_, f64>,
    x: &[f64],
    shift: usize,
    sign: f64,
) {
    let (rows, cols) = block.shape();
    for j in 0..cols {
        for (i, &v) in x.iter().enumerate() {
            let r = shift + j + i;
            if r >= rows {
                break;
            }
            block[(r, j)] = sign * v;
        }
    }
}
