#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use smpca_core::spectral::{FieldScope, SpectralField};
use smpca_core::{gen_panel, Case, ComplexKernel, FrequencyGrid, NRange, SimConfig, TimeGrid, TruthPanel};
use std::f64::consts::PI;

pub fn sim(case: Case, j: usize, nrange: NRange, seed: u64) -> SimConfig {
    SimConfig { case, j, nrange, seed, ..SimConfig::default() }
}

pub fn panel(case: Case, j: usize, nrange: NRange, seed: u64) -> TruthPanel {
    gen_panel(&sim(case, j, nrange, seed)).unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gram-Schmidt under the grid inner product.
pub fn orthonormalize(grid: &TimeGrid, mut fs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for a in 0..fs.len() {
        for b in 0..a {
            let c = grid.inner_real(&fs[a], &fs[b]);
            let prev = fs[b].clone();
            fs[a].iter_mut().zip(&prev).for_each(|(x, y)| *x -= c * y);
        }
        let n = grid.norm_sq(&fs[a]).sqrt();
        fs[a].iter_mut().for_each(|x| *x /= n);
    }
    fs
}

pub fn random_functions<R: Rng>(grid: &TimeGrid, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let raw = (0..count).map(|_| (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect()).collect();
    orthonormalize(grid, raw)
}

/// One component of a population model: an AR(1) score with innovation
/// variance `sigma2` passed through the filter `Σ_l φ_l B^{-l}`.
pub struct Component {
    pub rho: f64,
    pub sigma2: f64,
    /// `φ_l` for `l = -L..=L`.
    pub filters: Vec<Vec<f64>>,
}

impl Component {
    fn transfer(&self, omega: f64) -> Vec<Complex64> {
        let l_max = (self.filters.len() / 2) as i64;
        let n = self.filters[0].len();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for (idx, f) in self.filters.iter().enumerate() {
            let e = Complex64::from_polar(1.0, (idx as i64 - l_max) as f64 * omega);
            out.iter_mut().zip(f).for_each(|(o, v)| *o += e * v);
        }
        out
    }

    fn score_density(&self, omega: f64) -> f64 {
        let d = Complex64::new(1.0, 0.0) - Complex64::from_polar(self.rho, -omega);
        self.sigma2 / (2.0 * PI * d.norm_sqr())
    }
}

/// Subjects made of independent filtered AR(1) components; their spectral
/// kernels are known in closed form.
pub struct Population {
    pub tgrid: TimeGrid,
    pub fgrid: FrequencyGrid,
    pub subjects: Vec<Vec<Component>>,
}

impl Population {
    pub fn kernel(&self, i: usize, omega: f64) -> DMatrix<Complex64> {
        let n = self.tgrid.len();
        let mut f = DMatrix::zeros(n, n);
        for c in &self.subjects[i] {
            let v = c.transfer(omega);
            let s = c.score_density(omega);
            f += DMatrix::from_fn(n, n, |a, b| v[a] * v[b].conj() * s);
        }
        f
    }

    pub fn fields(&self) -> Vec<SpectralField> {
        (0..self.subjects.len())
            .map(|i| {
                let ks = self.fgrid.points().iter().map(|&w| ComplexKernel::new(self.kernel(i, w)).unwrap()).collect();
                SpectralField::new(FieldScope::Subject(i), self.tgrid.clone(), self.fgrid.clone(), ks).unwrap()
            })
            .collect()
    }

    /// `Σ_i E‖X_ij − X̂_ij‖²` when every subject is reduced with `bank[k][l]`
    /// (lags `-L..=L`): `∫ tr[(I − ΦΦ*) f_ii (I − ΦΦ*)*] dω` with
    /// `Φ(ω) = Σ_l φ_l e^{ilω}`, in quadrature-weighted coordinates.
    pub fn reconstruction_mse(&self, bank: &[Vec<Vec<f64>>]) -> f64 {
        let n = self.tgrid.len();
        let sw: Vec<f64> = self.tgrid.weights().iter().map(|w| w.sqrt()).collect();
        let mut total = 0.0;
        for (a, &omega) in self.fgrid.points().iter().enumerate() {
            let mut phi = DMatrix::<Complex64>::zeros(n, bank.len());
            for (k, filters) in bank.iter().enumerate() {
                let l_max = (filters.len() / 2) as i64;
                for (idx, f) in filters.iter().enumerate() {
                    let e = Complex64::from_polar(1.0, (idx as i64 - l_max) as f64 * omega);
                    for r in 0..n {
                        phi[(r, k)] += e * f[r] * sw[r];
                    }
                }
            }
            let resid = DMatrix::<Complex64>::identity(n, n) - &phi * phi.adjoint();
            for i in 0..self.subjects.len() {
                let f = self.kernel(i, omega);
                let m = DMatrix::from_fn(n, n, |r, c| f[(r, c)] * sw[r] * sw[c]);
                let e = &resid * m * resid.adjoint();
                total += self.fgrid.weights()[a] * e.trace().re;
            }
        }
        total
    }
}

pub fn harmonic(grid: &TimeGrid, r: usize) -> Vec<f64> {
    grid.points().iter().map(|&t| if r == 0 { 1.0 } else { (2.0 * PI * r as f64 * t).cos() }).collect()
}

/// Three subjects sharing a dominant lag-one component plus a weak
/// subject-specific one.
pub fn population() -> Population {
    let tgrid = TimeGrid::uniform(21).unwrap();
    let fgrid = FrequencyGrid::uniform(64).unwrap();
    let base = orthonormalize(&tgrid, (0..4).map(|r| harmonic(&tgrid, r)).collect());
    let weights = [0.3, 0.9, 0.3];
    let norm = weights.iter().map(|w: &f64| w * w).sum::<f64>().sqrt();
    let subjects = (1..=3)
        .map(|i| {
            let bend = |f: &[f64]| -> Vec<f64> {
                f.iter().zip(tgrid.points()).map(|(v, t)| v * (1.0 + 0.3 * (i as f64 * t).sin())).collect()
            };
            let main = Component {
                rho: 0.6,
                sigma2: 1.0,
                filters: (0..3).map(|l| bend(&base[l]).iter().map(|v| v * weights[l] / norm).collect()).collect(),
            };
            let minor = Component { rho: -0.3, sigma2: 0.3, filters: vec![bend(&base[3])] };
            vec![main, minor]
        })
        .collect();
    Population { tgrid, fgrid, subjects }
}

/// Random bank of `k` components and lags `-l..=l`: orthonormal functions
/// scaled by unit-norm random weights, so `‖Φ(ω)‖ = 1` for every `ω`.
pub fn random_bank(grid: &TimeGrid, k: usize, l: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let g = random_functions(grid, k * (2 * l + 1), rng);
    (0..k)
        .map(|kk| {
            let w: Vec<f64> = (0..=2 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            (0..=2 * l).map(|c| g[kk * (2 * l + 1) + c].iter().map(|v| v * w[c] / n).collect()).collect()
        })
        .collect()
}

