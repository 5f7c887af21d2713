use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// A complex kernel `f(t, s)` sampled on a time grid as an `M_t × M_t` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexKernel {
    values: DMatrix<Complex64>,
}

impl ComplexKernel {
    pub fn new(values: DMatrix<Complex64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Dimension(format!(
                "kernel must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(n: usize) -> Self {
        Self { values: DMatrix::zeros(n, n) }
    }

    pub fn from_real(values: &DMatrix<f64>) -> Result<Self> {
        Self::new(values.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> DMatrix<Complex64> {
        self.values
    }

    pub fn scale(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `max |f(a,b) - conj(f(b,a))|`.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in a..n {
                let d = (self.values[(a, b)] - self.values[(b, a)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Hermitian within `rel_tol · scale`.
    pub fn is_hermitian(&self, rel_tol: f64) -> bool {
        self.hermitian_defect() <= rel_tol * self.scale().max(f64::MIN_POSITIVE)
    }

    pub fn conj(&self) -> Self {
        Self { values: self.values.map(|z| z.conj()) }
    }
}
