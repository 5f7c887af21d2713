//! Design matrix, Whittle prior precision and the MAP score solve.
//!
//! Score vectors are laid out component-major, then by shifted curve index,
//! then by subject: `ξ_k = (ξ_{1,1-L,k}, …, ξ_{p,1-L,k}, …, ξ_{p,J+L,k})`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::filters::FilterSet;
use crate::smoothing::MeanFunctions;
use crate::spectral::ScoreSpectralDensity;

/// Largest relative residual accepted from the conjugate gradient solve.
pub const CG_TOL: f64 = 1e-8;
/// Default residual target; tighter than [`CG_TOL`] so that the solution,
/// not just the residual, is accurate on ill-conditioned systems.
pub const CG_TARGET: f64 = 1e-10;
const RIDGE: f64 = 1e-10;
const DENSE_FALLBACK_MAX: usize = 2000;

/// Index arithmetic for the stacked score vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreLayout {
    p: usize,
    j: usize,
    lags: Vec<usize>,
    offsets: Vec<usize>,
}

impl ScoreLayout {
    pub fn new(p: usize, j: usize, lags: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lags.len() + 1);
        let mut acc = 0;
        for &l in &lags {
            offsets.push(acc);
            acc += p * (j + 2 * l);
        }
        offsets.push(acc);
        Self { p, j, lags, offsets }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn k(&self) -> usize {
        self.lags.len()
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    /// `T_k = J + 2 L_k`.
    pub fn length(&self, k: usize) -> usize {
        self.j + 2 * self.lags[k]
    }

    pub fn dim(&self) -> usize {
        self.offsets[self.lags.len()]
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    /// Column of `ξ_{i, j, k}` for zero-based curve `j ∈ [-L_k, J + L_k)`.
    pub fn index(&self, i: usize, j: i64, k: usize) -> usize {
        let r = (j + self.lags[k] as i64) as usize;
        debug_assert!(r < self.length(k) && i < self.p);
        self.offsets[k] + r * self.p + i
    }
}

/// Sparse `Ñ × d_ξ` design in compressed row form.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    /// `(subject, curve, position)` per row.
    rows: Vec<(usize, usize, usize)>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_key(&self, r: usize) -> (usize, usize, usize) {
        self.rows[r]
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (r, &s) in v.iter().enumerate() {
            for (c, a) in self.row(r) {
                out[c] += a * s;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for r in 0..self.nrows() {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

/// Diagonal observation weights `σ_i^{-2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    diag: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(diag: Vec<f64>) -> Result<Self> {
        if diag.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Invariant("weights must be positive and finite".into()));
        }
        Ok(Self { diag })
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }
}

/// Assembles `A`, the demeaned responses `y` and `W` for the given panel.
pub fn build_design(
    obs: &ObservationSet,
    filters: &FilterSet,
    means: &MeanFunctions,
    sigma2: &[f64],
) -> Result<(DesignMatrix, Vec<f64>, WeightMatrix)> {
    let (p, j) = (obs.p(), obs.j());
    if sigma2.len() != p || means.p() != p {
        return Err(Error::Dimension("noise variances or means do not match the panel".into()));
    }
    if let FilterSet::PerSubject(b) = filters {
        if b.len() != p {
            return Err(Error::Dimension("one filter bank per subject is required".into()));
        }
        if b.iter().any(|x| x.lags() != b[0].lags()) {
            return Err(Error::Dimension("per-subject filter banks must share L_k".into()));
        }
    }
    let layout = ScoreLayout::new(p, j, filters.lags().to_vec());
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    for i in 0..p {
        let bank = filters.bank(i);
        for jj in 0..j {
            let c = obs.curve(i, jj);
            for (z, (&t, &v)) in c.times.iter().zip(&c.values).enumerate() {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Validation(format!(
                        "time {t} of subject {}, curve {} lies outside [0, 1]",
                        i + 1,
                        jj + 1
                    )));
                }
                for k in 0..bank.k() {
                    let lk = bank.lag(k) as i64;
                    for l in -lk..=lk {
                        cols.push(layout.index(i, jj as i64 + l, k));
                        vals.push(bank.eval(k, l, t));
                    }
                }
                row_ptr.push(cols.len());
                rows.push((i, jj, z));
                y.push(v - means.at(i, t));
                w.push(1.0 / sigma2[i]);
            }
        }
    }
    let design = DesignMatrix { ncols: layout.dim(), row_ptr, cols, vals, rows };
    Ok((design, y, WeightMatrix::new(w)?))
}

/// Block-diagonal Whittle precision `Q = diag(Q_1, …, Q_K)` with
/// `Q_k = (F_k ⊗ I_p)^* D_k (F_k ⊗ I_p)`, applied without densifying.
#[derive(Debug, Clone, PartialEq)]
pub struct WhittlePrecision {
    layout: ScoreLayout,
    /// `phi[k][j * p + i] = 1 / η̃_ik(ω_j)`
    phi: Vec<Vec<f64>>,
    /// `fourier[k][j * T_k + r] = e^{i(r+1)ω_j} / sqrt(2π T_k)`
    fourier: Vec<Vec<Complex64>>,
}

impl WhittlePrecision {
    /// From inverse score spectra `phi[k][j * p + i]` at `ω_j = 2π(j+1)/J`.
    pub fn from_inverse_spectra(layout: ScoreLayout, phi: Vec<Vec<f64>>) -> Result<Self> {
        let (p, j) = (layout.p(), layout.j());
        if phi.len() != layout.k() || phi.iter().any(|v| v.len() != p * j) {
            return Err(Error::Dimension("inverse spectra do not match the score layout".into()));
        }
        if phi.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invariant("inverse spectra must be finite and nonnegative".into()));
        }
        let fourier = (0..layout.k())
            .map(|k| {
                let t = layout.length(k);
                let norm = 1.0 / (2.0 * PI * t as f64).sqrt();
                let mut f = Vec::with_capacity(j * t);
                for jj in 0..j {
                    let omega = 2.0 * PI * (jj + 1) as f64 / j as f64;
                    for r in 0..t {
                        f.push(Complex64::from_polar(norm, (r + 1) as f64 * omega));
                    }
                }
                f
            })
            .collect();
        Ok(Self { layout, phi, fourier })
    }

    pub fn layout(&self) -> &ScoreLayout {
        &self.layout
    }

    /// `ξ̃_k(ω_j)[i]` for real or complex scores of component `k`.
    pub fn transform(&self, x: &[Complex64], k: usize) -> Vec<Complex64> {
        let (p, j, t) = (self.layout.p(), self.layout.j(), self.layout.length(k));
        let off = self.layout.offset(k);
        let f = &self.fourier[k];
        let mut out = vec![Complex64::new(0.0, 0.0); j * p];
        for jj in 0..j {
            let row = &f[jj * t..(jj + 1) * t];
            for (r, e) in row.iter().enumerate() {
                let base = off + r * p;
                for i in 0..p {
                    out[jj * p + i] += e * x[base + i];
                }
            }
        }
        out
    }

    /// `Re(Q) x` for real `x`.
    pub fn apply_real(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let p = self.layout.p();
        for k in 0..self.layout.k() {
            let (j, t) = (self.layout.j(), self.layout.length(k));
            let off = self.layout.offset(k);
            let f = &self.fourier[k];
            for jj in 0..j {
                let row = &f[jj * t..(jj + 1) * t];
                let mut tilde = vec![Complex64::new(0.0, 0.0); p];
                for (r, e) in row.iter().enumerate() {
                    let base = off + r * p;
                    for i in 0..p {
                        tilde[i] += e * x[base + i];
                    }
                }
                for i in 0..p {
                    tilde[i] *= self.phi[k][jj * p + i];
                }
                for (r, e) in row.iter().enumerate() {
                    let base = off + r * p;
                    let ec = e.conj();
                    for i in 0..p {
                        out[base + i] += (ec * tilde[i]).re;
                    }
                }
            }
        }
        out
    }

    /// `ξ^* Q ξ` through the per-frequency sum.
    pub fn quadratic_form(&self, x: &[Complex64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.layout.k() {
            let tilde = self.transform(x, k);
            for (n, z) in tilde.iter().enumerate() {
                acc += z.norm_sqr() * self.phi[k][n];
            }
        }
        acc
    }

    /// Diagonal of `Re(Q)`.
    pub fn diag_real(&self) -> Vec<f64> {
        let p = self.layout.p();
        let mut out = vec![0.0; self.layout.dim()];
        for k in 0..self.layout.k() {
            let t = self.layout.length(k);
            let norm = 1.0 / (2.0 * PI * t as f64);
            for i in 0..p {
                let s: f64 = (0..self.layout.j()).map(|jj| self.phi[k][jj * p + i]).sum::<f64>() * norm;
                for r in 0..t {
                    out[self.layout.offset(k) + r * p + i] = s;
                }
            }
        }
        out
    }

    /// Dense complex `Q` (tests and small problems).
    pub fn dense(&self) -> DMatrix<Complex64> {
        let d = self.layout.dim();
        let p = self.layout.p();
        let mut q = DMatrix::<Complex64>::zeros(d, d);
        for k in 0..self.layout.k() {
            let (j, t) = (self.layout.j(), self.layout.length(k));
            let off = self.layout.offset(k);
            let f = &self.fourier[k];
            for jj in 0..j {
                for r in 0..t {
                    for r2 in 0..t {
                        let e = f[jj * t + r].conj() * f[jj * t + r2];
                        for i in 0..p {
                            q[(off + r * p + i, off + r2 * p + i)] += e * self.phi[k][jj * p + i];
                        }
                    }
                }
            }
        }
        q
    }

    pub fn dense_real(&self) -> DMatrix<f64> {
        self.dense().map(|z| z.re)
    }
}

/// `Φ_k(ω_j) = diag(1 / η̃_ik(ω_j))` at `ω_j = 2πj/J`, `j = 1..=J`.
pub fn build_whittle_precision(eta: &ScoreSpectralDensity, j: usize, lags: &[usize]) -> Result<WhittlePrecision> {
    let p = eta.p();
    if lags.len() > eta.k() {
        return Err(Error::Dimension(format!("{} components requested, {} spectra available", lags.len(), eta.k())));
    }
    let phi = (0..lags.len())
        .map(|k| {
            let per_subject: Vec<Vec<f64>> = (0..p).map(|i| eta.whittle(i, k, j)).collect();
            let mut v = vec![0.0; j * p];
            for jj in 0..j {
                for i in 0..p {
                    v[jj * p + i] = 1.0 / per_subject[i][jj];
                }
            }
            v
        })
        .collect();
    WhittlePrecision::from_inverse_spectra(ScoreLayout::new(p, j, lags.to_vec()), phi)
}

/// Real scores `ξ_{i,j,k}` in the stacked layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArray {
    layout: ScoreLayout,
    values: Vec<f64>,
}

impl ScoreArray {
    pub fn new(layout: ScoreLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension(format!("{} scores for layout of size {}", values.len(), layout.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("scores must be finite".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ScoreLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `ξ_{i,j,k}` for zero-based curve `j ∈ [-L_k, J + L_k)`.
    pub fn get(&self, i: usize, j: i64, k: usize) -> f64 {
        self.values[self.layout.index(i, j, k)]
    }

    /// Score path of component `k` as rows `j = -L_k..J+L_k`, columns `i`.
    pub fn series(&self, k: usize) -> DMatrix<f64> {
        let (p, t) = (self.layout.p(), self.layout.length(k));
        let off = self.layout.offset(k);
        DMatrix::from_fn(t, p, |r, i| self.values[off + r * p + i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub ridge: bool,
    pub dense_fallback: bool,
}

/// `½‖W^{1/2}(y - Aξ)‖² + ½ ξᵀ Re(Q) ξ`.
pub fn posterior_objective(a: &DesignMatrix, y: &[f64], w: &WeightMatrix, q: &WhittlePrecision, xi: &[f64]) -> f64 {
    let fit = a.apply(xi);
    let lik: f64 = fit.iter().zip(y).zip(w.diag()).map(|((f, y), w)| w * (y - f) * (y - f)).sum();
    let prior: f64 = q.apply_real(xi).iter().zip(xi).map(|(a, b)| a * b).sum();
    0.5 * (lik + prior)
}

struct NormalOperator<'a> {
    a: &'a DesignMatrix,
    w: &'a WeightMatrix,
    q: &'a WhittlePrecision,
    ridge: f64,
}

impl NormalOperator<'_> {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let ax = self.a.apply(x);
        let wax: Vec<f64> = ax.iter().zip(self.w.diag()).map(|(v, w)| v * w).collect();
        let mut out = self.a.apply_transpose(&wax);
        for ((o, qx), xv) in out.iter_mut().zip(self.q.apply_real(x)).zip(x) {
            *o += qx + self.ridge * xv;
        }
        out
    }

    fn diag(&self) -> Vec<f64> {
        let mut d = self.q.diag_real();
        for r in 0..self.a.nrows() {
            let wr = self.w.diag()[r];
            for (c, v) in self.a.row(r) {
                d[c] += wr * v * v;
            }
        }
        d.iter_mut().for_each(|v| *v += self.ridge);
        d
    }

    fn dense(&self) -> DMatrix<f64> {
        let ad = self.a.to_dense();
        let wd = DMatrix::from_diagonal(&DVector::from_column_slice(self.w.diag()));
        let mut h = ad.transpose() * wd * &ad + self.q.dense_real();
        for c in 0..h.nrows() {
            h[(c, c)] += self.ridge;
        }
        (&h + h.transpose()) * 0.5
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum CgOutcome {
    Converged(Vec<f64>, usize, f64),
    Breakdown,
    Stalled(Vec<f64>, usize, f64),
}

fn pcg(op: &NormalOperator<'_>, b: &[f64], tol: f64, max_iter: usize) -> CgOutcome {
    let d = b.len();
    let precond: Vec<f64> = op.diag().iter().map(|&v| if v > 0.0 { 1.0 / v } else { 0.0 }).collect();
    if precond.iter().any(|&v| v == 0.0) {
        return CgOutcome::Breakdown;
    }
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; d];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, m)| a * m).collect();
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let hp = op.apply(&dir);
        let php = dot(&dir, &hp);
        if !(php > 0.0) {
            return CgOutcome::Breakdown;
        }
        let alpha = rz / php;
        for c in 0..d {
            x[c] += alpha * dir[c];
            r[c] -= alpha * hp[c];
        }
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            // confirm on the true residual
            let hx = op.apply(&x);
            let true_res = hx.iter().zip(b).map(|(h, b)| (b - h) * (b - h)).sum::<f64>().sqrt() / bnorm;
            if true_res <= tol {
                return CgOutcome::Converged(x, it, true_res);
            }
            r = b.iter().zip(&hx).map(|(b, h)| b - h).collect();
        }
        z = r.iter().zip(&precond).map(|(a, m)| a * m).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..d {
            dir[c] = z[c] + beta * dir[c];
        }
    }
    let hx = op.apply(&x);
    let res = hx.iter().zip(b).map(|(h, b)| (b - h) * (b - h)).sum::<f64>().sqrt() / bnorm;
    CgOutcome::Stalled(x, max_iter, res)
}

/// Stopping rule of the score solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Relative residual target.
    pub tolerance: f64,
    /// Iteration cap as a multiple of the score dimension.
    pub max_iter_factor: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: CG_TARGET, max_iter_factor: 10 }
    }
}

/// Solves `(AᵀWA + Re Q) ξ = AᵀWy` by Jacobi-preconditioned conjugate
/// gradients.
pub fn map_scores(
    a: &DesignMatrix,
    y: &[f64],
    w: &WeightMatrix,
    q: &WhittlePrecision,
) -> Result<(ScoreArray, SolveReport)> {
    map_scores_with(a, y, w, q, &SolverConfig::default())
}

pub fn map_scores_with(
    a: &DesignMatrix,
    y: &[f64],
    w: &WeightMatrix,
    q: &WhittlePrecision,
    opts: &SolverConfig,
) -> Result<(ScoreArray, SolveReport)> {
    let d = q.layout().dim();
    if a.ncols() != d || a.nrows() != y.len() || w.diag().len() != y.len() {
        return Err(Error::Dimension("design, responses, weights and prior do not agree".into()));
    }
    let wy: Vec<f64> = y.iter().zip(w.diag()).map(|(y, w)| y * w).collect();
    let b = a.apply_transpose(&wy);
    if b.iter().all(|&v| v == 0.0) {
        let report = SolveReport { iterations: 0, relative_residual: 0.0, ridge: false, dense_fallback: false };
        return Ok((ScoreArray::new(q.layout().clone(), vec![0.0; d])?, report));
    }
    let max_iter = opts.max_iter_factor.max(1) * d;
    let tol = opts.tolerance;
    let mut ridge = false;
    let mut op = NormalOperator { a, w, q, ridge: 0.0 };
    let mut outcome = pcg(&op, &b, tol, max_iter);
    if matches!(outcome, CgOutcome::Breakdown) {
        log::warn!("normal equations are singular; adding a {RIDGE:e} ridge");
        ridge = true;
        op.ridge = RIDGE;
        outcome = pcg(&op, &b, tol, max_iter);
    }
    if let CgOutcome::Stalled(x, iterations, res) = outcome {
        outcome = if res <= CG_TOL.max(tol) {
            log::debug!("conjugate gradients stopped at residual {res:.3e}, within the accepted bound");
            CgOutcome::Converged(x, iterations, res)
        } else {
            CgOutcome::Stalled(x, iterations, res)
        };
    }
    match outcome {
        CgOutcome::Converged(x, iterations, res) => Ok((
            ScoreArray::new(q.layout().clone(), x)?,
            SolveReport { iterations, relative_residual: res, ridge, dense_fallback: false },
        )),
        CgOutcome::Breakdown | CgOutcome::Stalled(..) => {
            let (iterations, residual) = match outcome {
                CgOutcome::Stalled(_, i, r) => (i, r),
                _ => (0, f64::NAN),
            };
            if d > DENSE_FALLBACK_MAX {
                return Err(Error::Solver { iterations, residual });
            }
            log::warn!("conjugate gradients stopped at residual {residual:.3e}; using a dense Cholesky solve");
            if !ridge {
                op.ridge = RIDGE;
                ridge = true;
            }
            let h = op.dense();
            let chol = h.cholesky().ok_or(Error::Solver { iterations, residual })?;
            let x = chol.solve(&DVector::from_column_slice(&b));
            let hx = op.apply(x.as_slice());
            let bnorm = dot(&b, &b).sqrt();
            let res = hx.iter().zip(&b).map(|(h, b)| (b - h) * (b - h)).sum::<f64>().sqrt() / bnorm;
            Ok((
                ScoreArray::new(q.layout().clone(), x.as_slice().to_vec())?,
                SolveReport { iterations, relative_residual: res, ridge, dense_fallback: true },
            ))
        }
    }
}

/// Gradient of the log posterior written per subject and component:
/// `-σ_i^{-2}(Σ_k' ξ_{i·k'} Σ_j φ*_{ik'j} φ_{ikj} - Σ_j Ỹ_ij φ_{ikj}) - [Re{Σ_j Φ_k ξ_{··k} ρ ρ^*}]_i`.
///
/// Independent of the sparse assembly; used to cross-check it.
pub fn log_posterior_gradient(
    obs: &ObservationSet,
    filters: &FilterSet,
    means: &MeanFunctions,
    sigma2: &[f64],
    q: &WhittlePrecision,
    xi: &ScoreArray,
) -> Vec<f64> {
    let layout = xi.layout();
    let (p, j, kk) = (layout.p(), layout.j(), layout.k());
    let mut grad = vec![0.0; layout.dim()];
    for i in 0..p {
        let bank = filters.bank(i);
        for jj in 0..j {
            let c = obs.curve(i, jj);
            // φ_{ikj}: N_ij × T_k blocks, evaluated once per curve
            let blocks: Vec<DMatrix<f64>> = (0..kk)
                .map(|k| {
                    let lk = bank.lag(k) as i64;
                    let mut m = DMatrix::zeros(c.len(), layout.length(k));
                    for (z, &t) in c.times.iter().enumerate() {
                        for l in -lk..=lk {
                            m[(z, (jj as i64 + l + lk) as usize)] = bank.eval(k, l, t);
                        }
                    }
                    m
                })
                .collect();
            let ytil = DVector::from_iterator(c.len(), c.times.iter().zip(&c.values).map(|(&t, &v)| v - means.at(i, t)));
            for k in 0..kk {
                let mut g = -(blocks[k].transpose() * &ytil);
                for k2 in 0..kk {
                    let row = DVector::from_iterator(layout.length(k2), (0..layout.length(k2)).map(|r| xi.get(i, r as i64 - layout.lags()[k2] as i64, k2)));
                    g += blocks[k].transpose() * (&blocks[k2] * row);
                }
                for r in 0..layout.length(k) {
                    grad[layout.offset(k) + r * p + i] -= g[r] / sigma2[i];
                }
            }
        }
    }
    // prior part: Re{Σ_j Φ_k(ω_j) ξ_{··k} ρ_k(ω_j) ρ_k(ω_j)^*}
    for k in 0..kk {
        let t = layout.length(k);
        let norm = 1.0 / (2.0 * PI * t as f64).sqrt();
        for jj in 0..j {
            let omega = 2.0 * PI * (jj + 1) as f64 / j as f64;
            let rho: Vec<Complex64> = (0..t).map(|r| Complex64::from_polar(norm, -((r + 1) as f64) * omega)).collect();
            for i in 0..p {
                let proj: Complex64 = (0..t).map(|r| rho[r] * xi.get(i, r as i64 - layout.lags()[k] as i64, k)).sum();
                let phi = q.phi[k][jj * p + i];
                for r in 0..t {
                    grad[layout.offset(k) + r * p + i] -= (phi * proj * rho[r].conj()).re;
                }
            }
        }
    }
    grad
}
