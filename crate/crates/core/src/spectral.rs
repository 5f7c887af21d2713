//! Lag-window spectral density estimation, marginalization, per-frequency
//! eigendecomposition and score spectral densities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::kernel::ComplexKernel;
use crate::smoothing::AutocovField;

/// Relative tolerance for the Hermitian checks on spectral kernels.
pub const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldScope {
    Subject(usize),
    Marginal,
}

/// Kernels `f(·,·|ω)` on a time grid for every frequency of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    scope: FieldScope,
    tgrid: TimeGrid,
    fgrid: FrequencyGrid,
    kernels: Vec<ComplexKernel>,
}

impl SpectralField {
    pub fn new(scope: FieldScope, tgrid: TimeGrid, fgrid: FrequencyGrid, kernels: Vec<ComplexKernel>) -> Result<Self> {
        if kernels.len() != fgrid.len() {
            return Err(Error::Dimension(format!(
                "{} kernels for {} frequencies",
                kernels.len(),
                fgrid.len()
            )));
        }
        if kernels.iter().any(|k| k.dim() != tgrid.len()) {
            return Err(Error::Dimension("kernel size differs from the time grid".into()));
        }
        Ok(Self { scope, tgrid, fgrid, kernels })
    }

    pub fn scope(&self) -> FieldScope {
        self.scope
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn fgrid(&self) -> &FrequencyGrid {
        &self.fgrid
    }

    pub fn kernels(&self) -> &[ComplexKernel] {
        &self.kernels
    }

    pub fn at(&self, a: usize) -> &ComplexKernel {
        &self.kernels[a]
    }

    /// Largest Hermitian defect relative to the kernel scale, over all ω.
    pub fn max_hermitian_defect(&self) -> f64 {
        self.kernels
            .iter()
            .map(|k| k.hermitian_defect() / k.scale().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    /// `max |f(·,·|-ω) - conj f(·,·|ω)|` over the grid.
    pub fn max_reflection_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.fgrid.len() {
            let b = self.fgrid.mirror(a);
            let d = self.kernels[b]
                .values()
                .iter()
                .zip(self.kernels[a].values().iter())
                .map(|(x, y)| (x - y.conj()).norm())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
        worst
    }
}

/// `h_max = ⌊(J·N̄)^{1/4}⌋`, clamped to `[1, J-1]`.
pub fn select_h_max(j: usize, mean_count: f64) -> usize {
    let raw = (j as f64 * mean_count.max(0.0)).powf(0.25).floor();
    let upper = j.saturating_sub(1).max(1);
    (raw as usize).clamp(1, upper)
}

/// `(cos hω, sin hω)`, exact at the self-conjugate frequencies.
fn twiddle(h: usize, omega: f64, self_conjugate: bool) -> (f64, f64) {
    if self_conjugate {
        let c = if omega == 0.0 || h % 2 == 0 { 1.0 } else { -1.0 };
        return (c, 0.0);
    }
    let x = h as f64 * omega;
    (x.cos(), x.sin())
}

/// `f̂(t,s|ω) = (1/2π) Σ_{|h|<h_max} (1 - |h|/h_max) Ĉ_h(t,s) e^{ihω}`.
///
/// Lag `h_max` carries zero weight and need not be stored.
pub fn bartlett_spectral(
    autocov: &AutocovField,
    h_max: usize,
    tgrid: &TimeGrid,
    fgrid: &FrequencyGrid,
    scope: FieldScope,
) -> Result<SpectralField> {
    if h_max == 0 {
        return Err(Error::Argument("h_max must be at least 1".into()));
    }
    if autocov.max_lag() + 1 < h_max {
        return Err(Error::Argument(format!(
            "lags up to {} are required, only {} stored",
            h_max - 1,
            autocov.max_lag()
        )));
    }
    if autocov.dim() != tgrid.len() {
        return Err(Error::Dimension("autocovariance surface differs from the time grid".into()));
    }
    if !fgrid.is_symmetric() {
        return Err(Error::Argument("frequency grid must be symmetric".into()));
    }
    let n = tgrid.len();
    let lags = autocov.nonnegative_lags();
    // even and odd parts in h: S_h = C_h + C_hᵀ, D_h = C_h - C_hᵀ
    let parts: Vec<(f64, DMatrix<f64>, DMatrix<f64>)> = (1..h_max)
        .map(|h| {
            let w = 1.0 - h as f64 / h_max as f64;
            let c = &lags[h];
            let ct = c.transpose();
            (w, c + &ct, c - ct)
        })
        .collect();
    let c0 = &lags[0];
    let start = fgrid.nonnegative_start();
    let half: Vec<ComplexKernel> = (start..fgrid.len())
        .into_par_iter()
        .map(|a| {
            let omega = fgrid.points()[a];
            let sc = fgrid.is_self_conjugate(a);
            let mut re = c0.clone();
            let mut im = DMatrix::<f64>::zeros(n, n);
            for (idx, (w, s, d)) in parts.iter().enumerate() {
                let (cs, sn) = twiddle(idx + 1, omega, sc);
                let (a1, a2) = (w * cs, w * sn);
                re.zip_apply(s, |x, y| *x += a1 * y);
                if sn != 0.0 {
                    im.zip_apply(d, |x, y| *x += a2 * y);
                }
            }
            let vals = DMatrix::from_fn(n, n, |r, c| Complex64::new(re[(r, c)], im[(r, c)]) / (2.0 * PI));
            ComplexKernel::new(vals).expect("square by construction")
        })
        .collect();
    SpectralField::new(scope, tgrid.clone(), fgrid.clone(), mirror_fill(fgrid, half))
}

/// Expands kernels on the nonnegative half grid to the full grid by
/// conjugate reflection.
fn mirror_fill<T>(fgrid: &FrequencyGrid, half: Vec<T>) -> Vec<T>
where
    T: Conjugate,
{
    let start = fgrid.nonnegative_start();
    let mut full: Vec<T> = (0..start).map(|a| half[fgrid.mirror(a) - start].conjugate()).collect();
    full.extend(half);
    full
}

trait Conjugate {
    fn conjugate(&self) -> Self;
}

impl Conjugate for ComplexKernel {
    fn conjugate(&self) -> Self {
        self.conj()
    }
}

/// `f̂_S = (1/p) Σ_i f̂_ii`.
pub fn marginal_spectral(fields: &[SpectralField]) -> Result<SpectralField> {
    let Some(first) = fields.first() else {
        return Err(Error::Argument("at least one subject field is required".into()));
    };
    if fields.iter().any(|f| f.fgrid != first.fgrid || f.tgrid != first.tgrid) {
        return Err(Error::Dimension("subject spectral fields live on different grids".into()));
    }
    let p = fields.len() as f64;
    let kernels = (0..first.fgrid.len())
        .map(|a| {
            let mut acc = first.kernels[a].values().clone();
            for f in &fields[1..] {
                acc += f.kernels[a].values();
            }
            ComplexKernel::new(acc.map(|z| z / p))
        })
        .collect::<Result<Vec<_>>>()?;
    SpectralField::new(FieldScope::Marginal, first.tgrid.clone(), first.fgrid.clone(), kernels)
}

/// Leading eigenpairs of a spectral field at every frequency.
///
/// Eigenfunctions follow the expansion `f(t,s|ω) = Σ η_k conj ψ_k(t) ψ_k(s)`
/// and have unit norm under trapezoid quadrature. Their phase at each
/// frequency is arbitrary except that `ψ(·|-ω) = conj ψ(·|ω)` and that
/// eigenfunctions at `ω = 0, ±π` are real.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    tgrid: TimeGrid,
    fgrid: FrequencyGrid,
    values: Vec<Vec<f64>>,
    functions: Vec<DMatrix<Complex64>>,
    raw_extremes: Vec<(f64, f64)>,
}

impl EigenSystem {
    pub fn from_parts(
        tgrid: TimeGrid,
        fgrid: FrequencyGrid,
        values: Vec<Vec<f64>>,
        functions: Vec<DMatrix<Complex64>>,
    ) -> Result<Self> {
        if values.len() != fgrid.len() || functions.len() != fgrid.len() {
            return Err(Error::Dimension("eigensystem size differs from the frequency grid".into()));
        }
        let keep = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != keep)
            || functions.iter().any(|f| f.ncols() != keep || f.nrows() != tgrid.len())
        {
            return Err(Error::Dimension("ragged eigensystem".into()));
        }
        let raw_extremes = values
            .iter()
            .map(|v| (v.last().copied().unwrap_or(0.0), v.first().copied().unwrap_or(0.0)))
            .collect();
        Ok(Self { tgrid, fgrid, values, functions, raw_extremes })
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn fgrid(&self) -> &FrequencyGrid {
        &self.fgrid
    }

    /// Number of stored eigenpairs per frequency.
    pub fn k_max(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn eigenvalues(&self, a: usize) -> &[f64] {
        &self.values[a]
    }

    pub fn eigenvalue(&self, a: usize, k: usize) -> f64 {
        self.values[a][k]
    }

    pub fn eigenfunction(&self, a: usize, k: usize) -> &[Complex64] {
        let n = self.tgrid.len();
        &self.functions[a].as_slice()[k * n..(k + 1) * n]
    }

    pub fn eigenfunctions(&self, a: usize) -> &DMatrix<Complex64> {
        &self.functions[a]
    }

    /// `(smallest, largest)` eigenvalue of the weighted kernel before clipping.
    pub fn raw_extremes(&self, a: usize) -> (f64, f64) {
        self.raw_extremes[a]
    }

    /// `∫ η_k(ω) dω` for every stored `k`.
    pub fn integrated_eigenvalues(&self) -> Vec<f64> {
        let w = self.fgrid.weights();
        (0..self.k_max())
            .map(|k| self.values.iter().zip(w).map(|(v, w)| v[k] * w).sum())
            .collect()
    }

    /// Multiplies `ψ_k(·|ω_a)` by `ν(ω_a)` for every `a`.
    pub fn apply_phase(&mut self, k: usize, nu: &[Complex64]) -> Result<()> {
        if nu.len() != self.fgrid.len() {
            return Err(Error::Dimension("phase multiplier differs from the frequency grid".into()));
        }
        for (f, &z) in self.functions.iter_mut().zip(nu) {
            f.column_mut(k).iter_mut().for_each(|x| *x *= z);
        }
        Ok(())
    }

    /// Keeps only the first `k` eigenpairs.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.k_max());
        Self {
            tgrid: self.tgrid.clone(),
            fgrid: self.fgrid.clone(),
            values: self.values.iter().map(|v| v[..k].to_vec()).collect(),
            functions: self.functions.iter().map(|f| f.columns(0, k).into_owned()).collect(),
            raw_extremes: self.raw_extremes.clone(),
        }
    }
}

struct FrequencyEigen {
    values: Vec<f64>,
    functions: DMatrix<Complex64>,
    extremes: (f64, f64),
}

impl Conjugate for FrequencyEigen {
    fn conjugate(&self) -> Self {
        Self {
            values: self.values.clone(),
            functions: self.functions.map(|z| z.conj()),
            extremes: self.extremes,
        }
    }
}

fn decompose(kernel: &ComplexKernel, sqrt_w: &[f64], keep: usize, real: bool) -> FrequencyEigen {
    let n = kernel.dim();
    let f = kernel.values();
    // Hermitian part of D^{1/2} F D^{1/2}
    let weighted = DMatrix::from_fn(n, n, |a, b| {
        (f[(a, b)] + f[(b, a)].conj()) * (0.5 * sqrt_w[a] * sqrt_w[b])
    });
    let (evals, evecs): (Vec<f64>, DMatrix<Complex64>) = if real {
        let eig = SymmetricEigen::new(weighted.map(|z| z.re));
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors.map(|x| Complex64::new(x, 0.0)))
    } else {
        let eig = SymmetricEigen::new(weighted);
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| evals[b].total_cmp(&evals[a]));
    let extremes = (evals[order[n - 1]], evals[order[0]]);
    let keep = keep.min(n);
    let mut values = Vec::with_capacity(keep);
    let mut functions = DMatrix::<Complex64>::zeros(n, keep);
    for (c, &idx) in order.iter().take(keep).enumerate() {
        values.push(evals[idx].max(0.0));
        // Mercer form conj ψ(t) ψ(s) makes ψ the conjugate of the
        // eigenvector; D^{-1/2} restores unit L² norm.
        for r in 0..n {
            functions[(r, c)] = evecs[(r, idx)].conj() / sqrt_w[r];
        }
    }
    FrequencyEigen { values, functions, extremes }
}

/// Eigendecomposes the quadrature-weighted kernel at every frequency and
/// keeps the leading `k_max` pairs. Negative frequencies are filled by
/// conjugation.
pub fn eigendecompose_per_frequency(field: &SpectralField, k_max: usize) -> Result<EigenSystem> {
    if k_max == 0 {
        return Err(Error::Argument("k_max must be positive".into()));
    }
    let fgrid = field.fgrid();
    if !fgrid.is_symmetric() {
        return Err(Error::Argument("frequency grid must be symmetric".into()));
    }
    for (a, k) in field.kernels().iter().enumerate() {
        if !k.is_hermitian(HERMITIAN_TOL) {
            return Err(Error::Invariant(format!(
                "spectral kernel at ω = {:.6} is not Hermitian (defect {:.3e})",
                fgrid.points()[a],
                k.hermitian_defect()
            )));
        }
    }
    let sqrt_w: Vec<f64> = field.tgrid().weights().iter().map(|w| w.sqrt()).collect();
    let start = fgrid.nonnegative_start();
    let half: Vec<FrequencyEigen> = (start..fgrid.len())
        .into_par_iter()
        .map(|a| decompose(field.at(a), &sqrt_w, k_max, fgrid.is_self_conjugate(a)))
        .collect();
    let full = mirror_fill(fgrid, half);
    let mut values = Vec::with_capacity(full.len());
    let mut functions = Vec::with_capacity(full.len());
    let mut raw_extremes = Vec::with_capacity(full.len());
    for e in full {
        values.push(e.values);
        functions.push(e.functions);
        raw_extremes.push(e.extremes);
    }
    Ok(EigenSystem { tgrid: field.tgrid().clone(), fgrid: fgrid.clone(), values, functions, raw_extremes })
}

/// Variance-explained ratio rule on integrated eigenvalues: the `k` that
/// maximizes `I_k / I_{k+1}`, smaller `k` on ties.
pub fn select_k_from_integrals(integrals: &[f64]) -> Result<usize> {
    if integrals.len() < 2 {
        return Err(Error::Argument("K selection needs at least two eigenvalues".into()));
    }
    let top = integrals[0];
    if integrals.iter().all(|&v| v < 1e-12) {
        return Err(Error::DegenerateSpectrum("all integrated eigenvalues are below 1e-12".into()));
    }
    let denom_floor = 1e-12 * top.abs().max(1e-300);
    let mut best = (f64::NEG_INFINITY, 1usize);
    for k in 0..integrals.len() - 1 {
        let r = integrals[k] / integrals[k + 1].max(denom_floor);
        if r > best.0 {
            best = (r, k + 1);
        }
    }
    Ok(best.1)
}

/// `K` for a fitted eigensystem; `k_max` caps the candidates.
pub fn select_k(eigsys: &EigenSystem, k_max: usize) -> Result<usize> {
    let ints = eigsys.integrated_eigenvalues();
    let m = k_max.min(ints.len());
    select_k_from_integrals(&ints[..m])
}

/// `η̃_ik(ω)` for subjects `i`, components `k`, on the full frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSpectralDensity {
    fgrid: FrequencyGrid,
    /// `values[i][k][a]`
    values: Vec<Vec<Vec<f64>>>,
}

impl ScoreSpectralDensity {
    /// Clips at `1e-8 ×` the overall maximum.
    pub fn from_raw(fgrid: FrequencyGrid, mut values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if values.iter().flatten().any(|v| v.len() != fgrid.len()) {
            return Err(Error::Dimension("score spectrum differs from the frequency grid".into()));
        }
        let max = values.iter().flatten().flatten().copied().fold(0.0, f64::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::DegenerateSpectrum("score spectral densities vanish".into()));
        }
        let floor = 1e-8 * max;
        values.iter_mut().flatten().flatten().for_each(|v| *v = v.max(floor));
        Ok(Self { fgrid, values })
    }

    pub fn fgrid(&self) -> &FrequencyGrid {
        &self.fgrid
    }

    pub fn p(&self) -> usize {
        self.values.len()
    }

    pub fn k(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn values(&self, i: usize, k: usize) -> &[f64] {
        &self.values[i][k]
    }

    pub fn all(&self) -> &[Vec<Vec<f64>>] {
        &self.values
    }

    pub fn at(&self, i: usize, k: usize, omega: f64) -> f64 {
        self.fgrid.interpolate(&self.values[i][k], omega)
    }

    /// Values at `ω_j = 2πj/J`, `j = 1..=J`: exact when the grid holds them,
    /// interpolated otherwise.
    pub fn whittle(&self, i: usize, k: usize, j: usize) -> Vec<f64> {
        (1..=j).map(|jj| self.at(i, k, 2.0 * PI * jj as f64 / j as f64)).collect()
    }
}

/// `∫∫ ψ(t) f(t,s) conj ψ(s) dt ds` by double trapezoid quadrature, before
/// flooring.
pub fn quadratic_form(psi: &[Complex64], f: &ComplexKernel, weights: &[f64]) -> Complex64 {
    let n = psi.len();
    let vals = f.values();
    let mut acc = Complex64::new(0.0, 0.0);
    for b in 0..n {
        let right = (psi[b] * weights[b]).conj();
        let mut col = Complex64::new(0.0, 0.0);
        for a in 0..n {
            col += psi[a] * weights[a] * vals[(a, b)];
        }
        acc += col * right;
    }
    acc
}

fn raw_score_density(eigsys: &EigenSystem, field: &SpectralField, k: usize) -> Result<Vec<f64>> {
    if field.fgrid() != eigsys.fgrid() || field.tgrid() != eigsys.tgrid() {
        return Err(Error::Dimension("eigensystem and subject field live on different grids".into()));
    }
    let w = eigsys.tgrid().weights();
    Ok((0..eigsys.fgrid().len())
        .map(|a| quadratic_form(eigsys.eigenfunction(a, k), field.at(a), w).re)
        .collect())
}

/// Score spectra under shared eigenfunctions (the marginal model).
pub fn score_spectral_density(
    eigsys: &EigenSystem,
    subject_fields: &[SpectralField],
    k: usize,
) -> Result<ScoreSpectralDensity> {
    if k > eigsys.k_max() {
        return Err(Error::Argument(format!("K = {k} exceeds the {} stored eigenpairs", eigsys.k_max())));
    }
    let values = subject_fields
        .par_iter()
        .map(|f| (0..k).map(|kk| raw_score_density(eigsys, f, kk)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    ScoreSpectralDensity::from_raw(eigsys.fgrid().clone(), values)
}

/// Score spectra where subject `i` uses its own eigenfunctions.
pub fn score_spectral_density_individual(
    eigsys: &[EigenSystem],
    subject_fields: &[SpectralField],
    k: usize,
) -> Result<ScoreSpectralDensity> {
    if eigsys.len() != subject_fields.len() {
        return Err(Error::Dimension("one eigensystem per subject is required".into()));
    }
    let fgrid = subject_fields
        .first()
        .map(|f| f.fgrid().clone())
        .ok_or_else(|| Error::Argument("no subjects".into()))?;
    let values = eigsys
        .par_iter()
        .zip(subject_fields)
        .map(|(e, f)| (0..k).map(|kk| raw_score_density(e, f, kk)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    ScoreSpectralDensity::from_raw(fgrid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::trapezoid_inner_product;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grids(mt: usize, mw: usize, j: usize) -> (TimeGrid, FrequencyGrid) {
        crate::grid::build_uniform_grids(mt, mw, j).unwrap()
    }

    fn scalar_field(tg: &TimeGrid, rho: f64, lags: usize) -> AutocovField {
        let pts = tg.points();
        let base = DMatrix::from_fn(tg.len(), tg.len(), |a, b| (-(pts[a] - pts[b]).abs()).exp());
        AutocovField::new((0..=lags).map(|h| &base * rho.powi(h as i32)).collect()).unwrap()
    }

    /// Asymmetric lag surfaces so that the imaginary part is exercised.
    fn random_field(rng: &mut ChaCha8Rng, n: usize, lags: usize) -> AutocovField {
        let mut out = Vec::new();
        for h in 0..=lags {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0) / (1.0 + h as f64));
            out.push(if h == 0 { &m * m.transpose() } else { m });
        }
        AutocovField::new(out).unwrap()
    }

    #[test]
    fn h_max_rule() {
        assert_eq!(select_h_max(60, 7.5), 4);
        assert_eq!(select_h_max(2, 0.5), 1);
        assert_eq!(select_h_max(90, 12.5), 5);
        assert_eq!(select_h_max(3, 1e6), 2);
    }

    #[test]
    fn h_max_one_is_flat() {
        let (tg, fg) = grids(11, 16, 8);
        let field = scalar_field(&tg, 0.5, 0);
        let f = bartlett_spectral(&field, 1, &tg, &fg, FieldScope::Subject(0)).unwrap();
        let expect = field.lag(0) / (2.0 * PI);
        for k in f.kernels() {
            for (z, e) in k.values().iter().zip(expect.iter()) {
                assert!((z.re - e).abs() < 1e-15 && z.im == 0.0);
            }
        }
    }

    #[test]
    fn bartlett_matches_loop_oracle() {
        let (tg, fg) = grids(9, 32, 10);
        let field = scalar_field(&tg, 0.5, 4);
        let h_max = 4;
        let f = bartlett_spectral(&field, h_max, &tg, &fg, FieldScope::Subject(0)).unwrap();
        for (a, &omega) in fg.points().iter().enumerate() {
            for r in 0..tg.len() {
                for c in 0..tg.len() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for h in -(h_max as i64)..=(h_max as i64) {
                        let w = 1.0 - h.unsigned_abs() as f64 / h_max as f64;
                        let e = Complex64::from_polar(1.0, h as f64 * omega);
                        acc += e * (w * field.get(h, r, c));
                    }
                    acc /= 2.0 * PI;
                    assert!((acc - f.at(a).values()[(r, c)]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn missing_lag_rejected() {
        let (tg, fg) = grids(5, 8, 4);
        let field = scalar_field(&tg, 0.5, 1);
        assert!(bartlett_spectral(&field, 3, &tg, &fg, FieldScope::Marginal).is_err());
        // lag h_max itself carries no weight
        assert!(bartlett_spectral(&field, 2, &tg, &fg, FieldScope::Marginal).is_ok());
    }

    #[test]
    fn reflection_and_hermitian_on_asymmetric_lags() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (tg, fg) = grids(7, 16, 6);
        let field = random_field(&mut rng, 7, 3);
        let f = bartlett_spectral(&field, 3, &tg, &fg, FieldScope::Subject(0)).unwrap();
        assert!(f.max_reflection_defect() <= 1e-12);
        assert!(f.max_hermitian_defect() <= 1e-10);
    }

    #[test]
    fn fourier_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // J divides M_ω so the grid is purely uniform
        let (tg, fg) = grids(6, 128, 64);
        let h_max = 4;
        let field = random_field(&mut rng, 6, h_max);
        let f = bartlett_spectral(&field, h_max, &tg, &fg, FieldScope::Subject(0)).unwrap();
        for h in -(h_max as i64 - 1)..(h_max as i64) {
            let w = 1.0 - h.unsigned_abs() as f64 / h_max as f64;
            let target = field.lag(h) * w;
            let mut back = DMatrix::<f64>::zeros(6, 6);
            for (a, (&omega, &q)) in fg.points().iter().zip(fg.weights()).enumerate() {
                let e = Complex64::from_polar(1.0, -(h as f64) * omega);
                back += f.at(a).values().map(|z| (z * e).re * q);
            }
            let err = (&back - &target).norm() / target.norm().max(1e-12);
            assert!(err <= 1e-3, "lag {h}: relative error {err}");
        }
    }

    /// Sample autocovariances of a random vector series: the triangular
    /// weights turn these into a positive semidefinite spectral estimate.
    fn sample_field(rng: &mut ChaCha8Rng, n: usize, lags: usize, len: usize) -> AutocovField {
        let x: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let c = (0..=lags)
            .map(|h| {
                DMatrix::from_fn(n, n, |a, b| {
                    (0..len - h).map(|j| x[j + h][a] * x[j][b]).sum::<f64>() / len as f64
                })
            })
            .collect();
        AutocovField::new(c).unwrap()
    }

    fn field_from(tg: &TimeGrid, fg: &FrequencyGrid, f: impl Fn(usize) -> DMatrix<Complex64>) -> SpectralField {
        let kernels = (0..fg.len()).map(|a| ComplexKernel::new(f(a)).unwrap()).collect();
        SpectralField::new(FieldScope::Marginal, tg.clone(), fg.clone(), kernels).unwrap()
    }

    #[test]
    fn marginal_means() {
        let (tg, fg) = grids(4, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fields: Vec<SpectralField> = (0..5)
            .map(|_| {
                let m = DMatrix::from_fn(4, 4, |_, _| Complex64::new(rng.random(), rng.random()));
                let h = &m * m.adjoint();
                field_from(&tg, &fg, |_| h.clone())
            })
            .collect();
        let marg = marginal_spectral(&fields).unwrap();
        for a in 0..fg.len() {
            let mut oracle = DMatrix::<Complex64>::zeros(4, 4);
            for f in &fields {
                oracle += f.at(a).values();
            }
            oracle /= Complex64::new(5.0, 0.0);
            assert!((marg.at(a).values() - oracle).norm() < 1e-14);
        }
        let same = marginal_spectral(&[fields[0].clone(), fields[0].clone()]).unwrap();
        assert_eq!(same.kernels(), fields[0].kernels());
        let zero = field_from(&tg, &fg, |_| DMatrix::zeros(4, 4));
        let half = marginal_spectral(&[fields[1].clone(), zero]).unwrap();
        for a in 0..fg.len() {
            assert!((half.at(a).values() - fields[1].at(a).values() * Complex64::new(0.5, 0.0)).norm() < 1e-15);
        }
        let (tg2, _) = grids(5, 8, 4);
        let other = field_from(&tg2, &fg, |_| DMatrix::zeros(5, 5));
        assert!(matches!(marginal_spectral(&[fields[0].clone(), other]), Err(Error::Dimension(_))));
    }

    #[test]
    fn rank_one_spectrum() {
        let (tg, fg) = grids(31, 16, 8);
        let pts = tg.points().to_vec();
        let norm = tg.norm_sq(&pts.iter().map(|t| 1.0 + t).collect::<Vec<_>>()).sqrt();
        let u: Vec<Complex64> = pts
            .iter()
            .map(|t| Complex64::from_polar((1.0 + t) / norm, 2.0 * t))
            .collect();
        let g = |w: f64| 1.0 + 0.5 * w.cos();
        let f = field_from(&tg, &fg, |a| {
            let s = fg.points()[a];
            // conjugate reflection: u at -ω is conj(u)
            let uu: Vec<Complex64> = if s < 0.0 { u.iter().map(|z| z.conj()).collect() } else { u.clone() };
            DMatrix::from_fn(31, 31, |r, c| uu[r].conj() * uu[c] * g(s))
        });
        let eig = eigendecompose_per_frequency(&f, 3).unwrap();
        for (a, &w) in fg.points().iter().enumerate() {
            if fg.is_self_conjugate(a) {
                continue;
            }
            assert!((eig.eigenvalue(a, 0) - g(w)).abs() < 1e-8);
            assert!(eig.eigenvalue(a, 1).abs() < 1e-8);
            let uu: Vec<Complex64> = if w < 0.0 { u.iter().map(|z| z.conj()).collect() } else { u.clone() };
            let ip = trapezoid_inner_product(eig.eigenfunction(a, 0), &uu, &tg).unwrap();
            assert!((ip.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn completeness_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (tg, fg) = grids(8, 8, 4);
        let field = sample_field(&mut rng, 8, 3, 40);
        let f = bartlett_spectral(&field, 3, &tg, &fg, FieldScope::Subject(0)).unwrap();
        let eig = eigendecompose_per_frequency(&f, 8).unwrap();
        for a in 0..fg.len() {
            let mut recon = DMatrix::<Complex64>::zeros(8, 8);
            for k in 0..8 {
                let (lo, _) = eig.raw_extremes(a);
                assert!(lo > -1e-10 * eig.eigenvalue(a, 0), "Fejér-weighted PSD at a = {a}: {lo}");
                let psi = eig.eigenfunction(a, k);
                for r in 0..8 {
                    for c in 0..8 {
                        recon[(r, c)] += psi[r].conj() * psi[c] * eig.eigenvalue(a, k);
                    }
                }
                for k2 in 0..8 {
                    let ip = trapezoid_inner_product(psi, eig.eigenfunction(a, k2), &tg).unwrap();
                    let target = if k == k2 { 1.0 } else { 0.0 };
                    assert!((ip - target).norm() < 1e-6);
                }
            }
            let err = (&recon - f.at(a).values()).norm() / f.at(a).values().norm();
            assert!(err < 1e-8, "a = {a}: {err}");
            assert!(eig.eigenvalues(a).windows(2).all(|w| w[0] >= w[1]));
        }
        for a in 0..fg.len() {
            let b = fg.mirror(a);
            for k in 0..8 {
                let (x, y) = (eig.eigenfunction(a, k), eig.eigenfunction(b, k));
                assert!(x.iter().zip(y).all(|(p, q)| *p == q.conj()));
            }
            if fg.is_self_conjugate(a) {
                assert!(eig.eigenfunction(a, 0).iter().all(|z| z.im == 0.0));
            }
        }
    }

    #[test]
    fn non_hermitian_input_rejected() {
        let (tg, fg) = grids(3, 4, 2);
        let f = field_from(&tg, &fg, |_| DMatrix::from_fn(3, 3, |r, c| Complex64::new((r * 3 + c) as f64, 0.0)));
        assert!(matches!(eigendecompose_per_frequency(&f, 2), Err(Error::Invariant(_))));
    }

    #[test]
    fn k_rule_examples() {
        assert_eq!(select_k_from_integrals(&[10.0, 1.0, 0.5, 0.4]).unwrap(), 1);
        assert_eq!(select_k_from_integrals(&[10.0, 9.0, 0.9, 0.8]).unwrap(), 2);
        assert_eq!(select_k_from_integrals(&[4.0, 2.0, 1.0]).unwrap(), 1);
        assert!(matches!(select_k_from_integrals(&[1e-13, 1e-14]), Err(Error::DegenerateSpectrum(_))));
    }

    #[test]
    fn single_subject_score_spectrum_equals_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (tg, fg) = grids(10, 16, 8);
        let field = random_field(&mut rng, 10, 3);
        let f = bartlett_spectral(&field, 3, &tg, &fg, FieldScope::Subject(0)).unwrap();
        let marg = marginal_spectral(std::slice::from_ref(&f)).unwrap();
        let mut eig = eigendecompose_per_frequency(&marg, 2).unwrap();
        let s = score_spectral_density(&eig, std::slice::from_ref(&f), 2).unwrap();
        let floor = 1e-8 * s.all().iter().flatten().flatten().copied().fold(0.0, f64::max);
        for a in 0..fg.len() {
            for k in 0..2 {
                assert!((s.values(0, k)[a] - eig.eigenvalue(a, k).max(floor)).abs() < 1e-10);
            }
        }
        // phase invariance
        let nu: Vec<Complex64> = fg.points().iter().map(|w| Complex64::from_polar(1.0, 3.0 * w)).collect();
        eig.apply_phase(0, &nu).unwrap();
        let s2 = score_spectral_density(&eig, std::slice::from_ref(&f), 2).unwrap();
        for a in 0..fg.len() {
            assert!((s.values(0, 0)[a] - s2.values(0, 0)[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_form_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tg = TimeGrid::new(vec![0.0, 0.1, 0.35, 0.5, 0.8, 1.0]).unwrap();
        let n = tg.len();
        let m = DMatrix::from_fn(n, n, |_, _| Complex64::new(rng.random(), rng.random()));
        let f = ComplexKernel::new(&m * m.adjoint()).unwrap();
        let psi: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let w = tg.weights();
        let mut oracle = Complex64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                oracle += psi[a] * f.values()[(a, b)] * psi[b].conj() * w[a] * w[b];
            }
        }
        let q = quadratic_form(&psi, &f, w);
        assert!((q - oracle).norm() < 1e-10);
        assert!(q.im.abs() < 1e-10 && q.re >= 0.0);
    }

    #[test]
    fn whittle_extraction_hits_grid_values() {
        let (_, fg) = grids(3, 16, 6);
        let vals: Vec<f64> = fg.points().iter().map(|w| 2.0 + w.cos()).collect();
        let s = ScoreSpectralDensity::from_raw(fg.clone(), vec![vec![vals]]).unwrap();
        for (jj, v) in s.whittle(0, 0, 6).into_iter().enumerate() {
            let w = 2.0 * PI * (jj + 1) as f64 / 6.0;
            assert!((v - (2.0 + w.cos())).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn bartlett_reflection_holds(seed in 0u64..500, h_max in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tg, fg) = grids(5, 16, 7);
            let field = random_field(&mut rng, 5, h_max);
            let f = bartlett_spectral(&field, h_max, &tg, &fg, FieldScope::Subject(0)).unwrap();
            prop_assert!(f.max_reflection_defect() <= 1e-12);
            prop_assert!(f.max_hermitian_defect() <= 1e-10);
        }

        #[test]
        fn score_spectrum_symmetric_in_frequency(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tg, fg) = grids(6, 16, 5);
            let fields: Vec<SpectralField> = (0..3)
                .map(|i| bartlett_spectral(&random_field(&mut rng, 6, 2), 2, &tg, &fg, FieldScope::Subject(i)).unwrap())
                .collect();
            let marg = marginal_spectral(&fields).unwrap();
            let eig = eigendecompose_per_frequency(&marg, 2).unwrap();
            let s = score_spectral_density(&eig, &fields, 2).unwrap();
            for i in 0..3 {
                for k in 0..2 {
                    let v = s.values(i, k);
                    for a in 0..fg.len() {
                        prop_assert!(v[a] >= 0.0);
                        prop_assert!((v[a] - v[fg.mirror(a)]).abs() <= 1e-8 * v[a].max(1.0));
                    }
                }
            }
        }
    }
}
