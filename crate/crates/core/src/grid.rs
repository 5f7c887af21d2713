//! Time and frequency discretizations with trapezoidal quadrature.
//!
//! Every integral in the estimator is reduced to a weighted sum on one of
//! these grids: `∫ f(t) dt ≈ Σ_m w_m f(t_m)` on `[0, 1]` and
//! `∫ g(ω) dω ≈ Σ_a v_a g(ω_a)` on `[-π, π]`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Tolerance used when merging frequencies that coincide up to rounding.
const MERGE_TOL: f64 = 1e-12;

/// Trapezoid weights for an increasing sequence of nodes.
fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let n = points.len();
    let mut w = vec![0.0; n];
    for m in 0..n.saturating_sub(1) {
        let half = 0.5 * (points[m + 1] - points[m]);
        w[m] += half;
        w[m + 1] += half;
    }
    w
}

/// Ordered sampling points on `[0, 1]` together with trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Argument(format!(
                "time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 {
            return Err(Error::Argument("time grid must lie within [0, 1]".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("time grid must be strictly increasing".into()));
        }
        let weights = trapezoid_weights(&points);
        Ok(Self { points, weights })
    }

    /// `count` evenly spaced points covering `[0, 1]` inclusive.
    pub fn uniform(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Argument(format!("time grid count must be >= 2, got {count}")));
        }
        let last = (count - 1) as f64;
        let points = (0..count).map(|m| m as f64 / last).collect();
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn span(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Bracketing index `m` and fraction `θ` such that
    /// `t ≈ (1-θ)·t_m + θ·t_{m+1}`; `t` is clamped to the grid range.
    fn locate(&self, t: f64) -> (usize, f64) {
        let pts = &self.points;
        let n = pts.len();
        if t <= pts[0] {
            return (0, 0.0);
        }
        if t >= pts[n - 1] {
            return (n - 2, 1.0);
        }
        let hi = pts.partition_point(|&x| x <= t).min(n - 1);
        let lo = hi - 1;
        let frac = (t - pts[lo]) / (pts[hi] - pts[lo]);
        (lo, frac)
    }

    /// Linear interpolation of a grid-sampled function at `t`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let (m, frac) = self.locate(t);
        if frac == 0.0 {
            values[m]
        } else if frac == 1.0 {
            values[m + 1]
        } else {
            (1.0 - frac) * values[m] + frac * values[m + 1]
        }
    }

    /// Resample a grid function onto another grid by linear interpolation.
    pub fn resample(&self, values: &[f64], target: &TimeGrid) -> Vec<f64> {
        target.points.iter().map(|&t| self.interpolate(values, t)).collect()
    }

    /// `∫ f g dt` for real grid functions.
    pub fn inner_real(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn norm_sq(&self, f: &[f64]) -> f64 {
        self.inner_real(f, f)
    }
}

/// `⟨f, g⟩ = ∫ conj(f) g dt` by the trapezoid rule on `grid`.
pub fn trapezoid_inner_product(
    f: &[Complex64],
    g: &[Complex64],
    grid: &TimeGrid,
) -> Result<Complex64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::Dimension(format!(
            "inner product on a {}-point grid received lengths {} and {}",
            grid.len(),
            f.len(),
            g.len()
        )));
    }
    Ok(grid
        .weights()
        .iter()
        .zip(f.iter().zip(g))
        .map(|(&w, (a, b))| a.conj() * b * w)
        .sum())
}

/// Frequencies on `[-π, π]` with trapezoid weights.
///
/// Grids built by [`FrequencyGrid::with_whittle`] are mirror images of their
/// nonnegative half, so `points[len-1-a] == -points[a]` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
    symmetric: bool,
}

impl FrequencyGrid {
    /// Builds a grid from its nonnegative half by mirroring.
    fn from_half(mut half: Vec<f64>) -> Self {
        half.sort_by(|a, b| a.total_cmp(b));
        let mut dedup: Vec<f64> = Vec::with_capacity(half.len());
        for w in half {
            if dedup.last().map_or(true, |&last| w - last > MERGE_TOL) {
                dedup.push(w);
            }
        }
        let mut points: Vec<f64> = dedup.iter().rev().filter(|&&w| w > 0.0).map(|&w| -w).collect();
        points.extend_from_slice(&dedup);
        let weights = trapezoid_weights(&points);
        Self { points, weights, symmetric: true }
    }

    /// Uniform grid `ω_m = -π + 2πm/M`, `m = 0..=M`.
    pub fn uniform(m_omega: usize) -> Result<Self> {
        if m_omega < 2 {
            return Err(Error::Argument(format!("frequency count must be >= 2, got {m_omega}")));
        }
        let m = m_omega as f64;
        let half = (0..=m_omega)
            .filter(|&k| 2 * k >= m_omega)
            .map(|k| PI * (2 * k - m_omega) as f64 / m)
            .collect();
        Ok(Self::from_half(half))
    }

    /// Uniform grid augmented with the Whittle set `{2πj/J : j ∈ [J]}`,
    /// folded into `(-π, π]` by periodicity.
    pub fn with_whittle(m_omega: usize, j: usize) -> Result<Self> {
        if j < 1 {
            return Err(Error::Argument("curve count J must be >= 1".into()));
        }
        let base = Self::uniform(m_omega)?;
        let mut half: Vec<f64> = base.points.iter().copied().filter(|&w| w >= 0.0).collect();
        half.extend((1..=j).map(|jj| PI * (2 * jj.min(j - jj)) as f64 / j as f64));
        Ok(Self::from_half(half))
    }

    /// Arbitrary increasing frequencies; the symmetric flag is detected.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Argument("frequency grid needs at least 2 points".into()));
        }
        if points.iter().any(|w| w.abs() > PI + 1e-12) {
            return Err(Error::Argument("frequencies must lie within [-π, π]".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("frequency grid must be strictly increasing".into()));
        }
        let n = points.len();
        let symmetric = (0..n).all(|a| points[n - 1 - a] == -points[a]);
        let weights = trapezoid_weights(&points);
        Ok(Self { points, weights, symmetric })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Index of `-ω_a`. Only meaningful on symmetric grids.
    pub fn mirror(&self, a: usize) -> usize {
        debug_assert!(self.symmetric);
        self.points.len() - 1 - a
    }

    /// First index with `ω >= 0`; indices `nonnegative_start()..len()` form
    /// the half grid on which computations are carried out.
    pub fn nonnegative_start(&self) -> usize {
        self.points.partition_point(|&w| w < 0.0)
    }

    /// Frequencies at which conjugate symmetry forces real values
    /// (`0` and `±π`).
    pub fn is_self_conjugate(&self, a: usize) -> bool {
        let w = self.points[a];
        w == 0.0 || (w.abs() - PI).abs() < MERGE_TOL
    }

    /// Nearest grid index to `omega` (after folding into `[-π, π]`), if
    /// within `tol`.
    pub fn index_of(&self, omega: f64, tol: f64) -> Option<usize> {
        let mut w = omega.rem_euclid(2.0 * PI);
        if w > PI {
            w -= 2.0 * PI;
        }
        let pos = self.points.partition_point(|&x| x < w);
        let candidates = [pos.checked_sub(1), Some(pos).filter(|&p| p < self.len())];
        let best = candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (self.points[a] - w).abs().total_cmp(&(self.points[b] - w).abs()))?;
        ((self.points[best] - w).abs() <= tol).then_some(best)
    }

    /// Linear interpolation of grid values at `omega`, folded into `[-π, π]`.
    pub fn interpolate(&self, values: &[f64], omega: f64) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        let mut w = omega.rem_euclid(2.0 * PI);
        if w > PI {
            w -= 2.0 * PI;
        }
        let n = self.len();
        if w <= self.points[0] {
            return values[0];
        }
        if w >= self.points[n - 1] {
            return values[n - 1];
        }
        let hi = self.points.partition_point(|&x| x < w);
        if self.points[hi] == w {
            return values[hi];
        }
        let lo = hi - 1;
        let s = (w - self.points[lo]) / (self.points[hi] - self.points[lo]);
        values[lo] * (1.0 - s) + values[hi] * s
    }

    /// Grid indices of `ω_j = 2πj/J`, `j = 1..=J`, in order.
    pub fn whittle_indices(&self, j: usize) -> Result<Vec<usize>> {
        (1..=j)
            .map(|jj| {
                let omega = 2.0 * PI * jj as f64 / j as f64;
                self.index_of(omega, 1e-9).ok_or_else(|| {
                    Error::Argument(format!("frequency grid does not contain 2π·{jj}/{j}"))
                })
            })
            .collect()
    }
}

/// Builds the default grid pair for a panel of `j` curves.
pub fn build_uniform_grids(m_t: usize, m_omega: usize, j: usize) -> Result<(TimeGrid, FrequencyGrid)> {
    if m_t < 2 || m_omega < 2 {
        return Err(Error::Argument(format!(
            "grid counts must be >= 2 (got M_t = {m_t}, M_ω = {m_omega})"
        )));
    }
    Ok((TimeGrid::uniform(m_t)?, FrequencyGrid::with_whittle(m_omega, j)?))
}
