//! Stacked parameter vector of a structured model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{OrderSpec, Polynomial, TransferFunction};
use crate::netsim::CascadeModel;

/// Per-module layout `[f_1 .. f_nf, b_0 .. b_{nb-1}]`, modules concatenated.
/// The leading 1 of each denominator is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    values: Vec<f64>,
    orders: Vec<OrderSpec>,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>, orders: Vec<OrderSpec>) -> Result<Self> {
        let d: usize = orders.iter().map(OrderSpec::n_params).sum();
        if values.len() != d {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, orders imply {d}",
                values.len()
            )));
        }
        Ok(ThetaVector { values, orders })
    }

    pub fn zeros(orders: Vec<OrderSpec>) -> Self {
        let d = orders.iter().map(OrderSpec::n_params).sum();
        ThetaVector { values: vec![0.0; d], orders }
    }

    /// Parameters of a list of transfer functions, orders taken from them.
    pub fn from_modules(modules: &[&TransferFunction]) -> Self {
        let mut values = Vec::new();
        let mut orders = Vec::new();
        for g in modules {
            values.extend_from_slice(&g.den.coeffs()[1..]);
            values.extend_from_slice(g.num.coeffs());
            orders.push(g.order_spec());
        }
        ThetaVector { values, orders }
    }

    /// True parameter vector of a cascade model.
    pub fn from_cascade(model: &CascadeModel) -> Self {
        ThetaVector::from_modules(&model.modules())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn orders(&self) -> &[OrderSpec] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces the values, keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ThetaVector::new(values, self.orders.clone())
    }

    /// Offset of module `j`'s block within the flat vector.
    pub fn offset(&self, j: usize) -> usize {
        self.orders[..j].iter().map(OrderSpec::n_params).sum()
    }

    /// `(f_1..f_nf, b_0..b_{nb-1})` of module `j`.
    pub fn module_coeffs(&self, j: usize) -> (&[f64], &[f64]) {
        let o = self.orders[j];
        let off = self.offset(j);
        (&self.values[off..off + o.nf], &self.values[off + o.nf..off + o.nf + o.nb])
    }

    pub fn module(&self, j: usize) -> TransferFunction {
        let (f, b) = self.module_coeffs(j);
        TransferFunction {
            num: Polynomial::new(b.to_vec()).expect("nb >= 1"),
            den: Polynomial::monic(f),
            delay: self.orders[j].nk,
        }
    }

    /// First unstable module (1-based), if any.
    pub fn unstable_module(&self) -> Option<usize> {
        (0..self.orders.len()).find(|&j| !self.module(j).is_stable()).map(|j| j + 1)
    }

    pub fn is_stable(&self) -> bool {
        self.unstable_module().is_none()
    }

    /// Squared Euclidean distance to another vector of the same layout.
    pub fn squared_error(&self, other: &ThetaVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).powi(2)).sum()
    }

    /// Module-major names `f{j}_{k}` / `b{j}_{k}` for reporting.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for (j, o) in self.orders.iter().enumerate() {
            out.extend((1..=o.nf).map(|k| format!("f{}_{k}", j + 1)));
            out.extend((0..o.nb).map(|k| format!("b{}_{k}", j + 1)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_layout() {
        let th = ThetaVector::from_cascade(&CascadeModel::benchmark());
        assert_eq!(th.len(), 13);
        assert_eq!(
            th.values(),
            &[-1.2, 0.5, 0.7, 0.5, -1.3, 0.6, 0.6, -0.2, -0.75, 0.56, 0.6, 0.8, -1.2]
        );
        assert_eq!(th.offset(2), 8);
        assert_eq!(th.module(0), CascadeModel::benchmark().g1);
        assert_eq!(th.module(2), CascadeModel::benchmark().g3);
        assert!(th.is_stable());
        assert_eq!(th.labels()[0], "f1_1");
        assert_eq!(th.labels()[12], "b3_2");
    }

    #[test]
    fn length_must_match_orders() {
        let o = vec![OrderSpec { nb: 2, nf: 1, nk: 0 }];
        assert!(ThetaVector::new(vec![0.0; 2], o.clone()).is_err());
        assert!(ThetaVector::new(vec![0.0; 3], o).is_ok());
    }

    #[test]
    fn detects_unstable_module() {
        let o = vec![OrderSpec { nb: 1, nf: 1, nk: 0 }; 2];
        let th = ThetaVector::new(vec![-0.5, 1.0, -1.5, 1.0], o).unwrap();
        assert_eq!(th.unstable_module(), Some(2));
    }
}
