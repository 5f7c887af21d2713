//! Phase alignment of frequency-wise eigenfunctions and construction of real
//! functional filters by inverse Fourier transform.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::spectral::EigenSystem;

pub const PHASE_MAX_ITER: usize = 500;
pub const PHASE_REL_TOL: f64 = 1e-8;
/// Imaginary residue (relative to the filter scale) above which filter
/// construction fails.
pub const IMAG_RESIDUE_TOL: f64 = 1e-6;

/// `Ψ_k(ω_a, ω_b) = ∫ conj ψ_k(t|ω_a) ψ_k(t|ω_b) dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapKernel {
    values: DMatrix<Complex64>,
}

impl OverlapKernel {
    pub fn new(values: DMatrix<Complex64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Dimension("overlap kernel must be square".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<Complex64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Flips signs of `ψ_k(·|ω)` along the nonnegative half grid so that
/// neighbouring eigenfunctions have nonnegative real overlap. Mirrored
/// frequencies receive the same sign, which keeps conjugate reflection.
pub fn align_signs(eigsys: &mut EigenSystem, k: usize) -> Result<()> {
    let fgrid = eigsys.fgrid().clone();
    let tgrid = eigsys.tgrid().clone();
    let n = fgrid.len();
    let start = fgrid.nonnegative_start();
    let mut signs = vec![1.0f64; n];
    for a in start + 1..n {
        let ip = inner(&tgrid, eigsys.eigenfunction(a - 1, k), eigsys.eigenfunction(a, k));
        let s = if ip.re * signs[a - 1] < 0.0 { -1.0 } else { 1.0 };
        signs[a] = s;
    }
    for a in 0..start {
        signs[a] = signs[fgrid.mirror(a)];
    }
    let nu: Vec<Complex64> = signs.into_iter().map(|s| Complex64::new(s, 0.0)).collect();
    eigsys.apply_phase(k, &nu)
}

fn inner(tgrid: &TimeGrid, f: &[Complex64], g: &[Complex64]) -> Complex64 {
    f.iter().zip(g).zip(tgrid.weights()).map(|((a, b), w)| a.conj() * b * w).sum()
}

pub fn overlap_kernel(eigsys: &EigenSystem, k: usize) -> Result<OverlapKernel> {
    if k >= eigsys.k_max() {
        return Err(Error::Argument(format!("component {k} not stored")));
    }
    let n = eigsys.fgrid().len();
    let m = eigsys.tgrid().len();
    let w = eigsys.tgrid().weights();
    // rows: frequencies, columns: time points, scaled by sqrt weights
    let mut v = DMatrix::<Complex64>::zeros(n, m);
    for a in 0..n {
        for (t, z) in eigsys.eigenfunction(a, k).iter().enumerate() {
            v[(a, t)] = z * w[t].sqrt();
        }
    }
    let gram = v.conjugate() * v.transpose();
    let herm = (&gram + gram.adjoint()) * Complex64::new(0.5, 0.0);
    OverlapKernel::new(herm)
}

/// Unit-modulus, conjugate-symmetric multiplier `ν_k(ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMultiplier {
    values: Vec<Complex64>,
}

impl PhaseMultiplier {
    pub fn new(fgrid: &FrequencyGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != fgrid.len() {
            return Err(Error::Dimension("multiplier length differs from the frequency grid".into()));
        }
        for (a, z) in values.iter().enumerate() {
            if (z.norm() - 1.0).abs() > 1e-10 || *z != values[fgrid.mirror(a)].conj() {
                return Err(Error::Invariant("multiplier must be unit-modulus and conjugate-symmetric".into()));
            }
        }
        Ok(Self { values })
    }

    pub fn ones(fgrid: &FrequencyGrid) -> Self {
        Self { values: vec![Complex64::new(1.0, 0.0); fgrid.len()] }
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseReport {
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `(1/4π²) Σ_ab w_a w_b Ψ(ω_a, ω_b) conj ν(ω_a) ν(ω_b)`.
pub fn phase_objective(psi: &OverlapKernel, fgrid: &FrequencyGrid, nu: &[Complex64]) -> f64 {
    let g = weighted_apply(psi, fgrid.weights(), nu);
    objective_from(&g, fgrid.weights(), nu)
}

/// `g = M ν` with `M_ab = w_a w_b Ψ(a, b)`.
fn weighted_apply(psi: &OverlapKernel, w: &[f64], nu: &[Complex64]) -> Vec<Complex64> {
    let n = nu.len();
    let v = psi.values();
    let wn: Vec<Complex64> = nu.iter().zip(w).map(|(z, w)| z * w).collect();
    (0..n)
        .map(|a| {
            let mut acc = Complex64::new(0.0, 0.0);
            for b in 0..n {
                acc += v[(a, b)] * wn[b];
            }
            acc * w[a]
        })
        .collect()
}

fn objective_from(g: &[Complex64], _w: &[f64], nu: &[Complex64]) -> f64 {
    let q: Complex64 = nu.iter().zip(g).map(|(n, g)| n.conj() * g).sum();
    q.re / (4.0 * PI * PI)
}

/// Feasible point closest in direction to `g`: unit modulus, real signs at
/// `ω = 0, ±π`, conjugate mirror on negative frequencies.
fn project(fgrid: &FrequencyGrid, g: &[Complex64], fallback: &[Complex64]) -> Vec<Complex64> {
    let n = g.len();
    let start = fgrid.nonnegative_start();
    let mut out = fallback.to_vec();
    for a in start..n {
        let z = g[a];
        if fgrid.is_self_conjugate(a) {
            if z.re != 0.0 {
                out[a] = Complex64::new(z.re.signum(), 0.0);
            }
        } else if z.norm() > 0.0 {
            out[a] = z / z.norm();
        }
    }
    for a in 0..start {
        out[a] = out[fgrid.mirror(a)].conj();
    }
    out
}

/// Greedy chain: `ν(0) = 1`, then each next frequency takes the phase that
/// maximizes its real overlap with the previous one.
fn greedy_init(psi: &OverlapKernel, fgrid: &FrequencyGrid) -> Vec<Complex64> {
    let n = fgrid.len();
    let start = fgrid.nonnegative_start();
    let one = Complex64::new(1.0, 0.0);
    let mut nu = vec![one; n];
    for a in start + 1..n {
        let c = psi.values()[(a - 1, a)];
        let target = if c.norm() > 0.0 { nu[a - 1] * c.conj() / c.norm() } else { nu[a - 1] };
        nu[a] = if fgrid.is_self_conjugate(a) {
            Complex64::new(if target.re < 0.0 { -1.0 } else { 1.0 }, 0.0)
        } else {
            target / target.norm()
        };
    }
    for a in 0..start {
        nu[a] = nu[fgrid.mirror(a)].conj();
    }
    nu
}

/// Maximizes the phase objective over conjugate-symmetric unit-modulus
/// multipliers by projected power steps with step halving.
pub fn optimize_phase(psi: &OverlapKernel, fgrid: &FrequencyGrid) -> Result<(PhaseMultiplier, PhaseReport)> {
    if psi.len() != fgrid.len() {
        return Err(Error::Dimension("overlap kernel differs from the frequency grid".into()));
    }
    if !fgrid.is_symmetric() {
        return Err(Error::Argument("frequency grid must be symmetric".into()));
    }
    let w = fgrid.weights();
    let mut nu = greedy_init(psi, fgrid);
    let mut g = weighted_apply(psi, w, &nu);
    let mut obj = objective_from(&g, w, &nu);
    if !obj.is_finite() {
        return Err(Error::Numeric("phase objective is not finite".into()));
    }
    let initial = obj;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PHASE_MAX_ITER {
        iterations += 1;
        let scale = g.iter().map(|z| z.norm()).sum::<f64>() / g.len() as f64;
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-6 {
            let dir: Vec<Complex64> = nu.iter().zip(&g).map(|(v, gg)| v * (scale * (1.0 - step)) + gg * step).collect();
            let cand = project(fgrid, &dir, &nu);
            let cg = weighted_apply(psi, w, &cand);
            let cobj = objective_from(&cg, w, &cand);
            if !cobj.is_finite() {
                return Err(Error::Numeric("phase objective is not finite".into()));
            }
            if cobj >= obj - 1e-12 * obj.abs() {
                accepted = Some((cand, cg, cobj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cg, cobj)) = accepted else {
            converged = true;
            break;
        };
        let change = (cobj - obj).abs() / obj.abs().max(f64::MIN_POSITIVE);
        nu = cand;
        g = cg;
        obj = cobj.max(obj);
        if change < PHASE_REL_TOL {
            converged = true;
            break;
        }
    }
    Ok((PhaseMultiplier { values: nu }, PhaseReport { initial_objective: initial, objective: obj, iterations, converged }))
}

/// `φ_kl(t) = (1/2π) Σ_a w_a ψ_k(t|ω_a) ν(ω_a) e^{-ilω_a}` for `|l| ≤ l_max`,
/// returned in order `l = -l_max..=l_max`.
pub fn build_filters(eigsys: &EigenSystem, k: usize, nu: &PhaseMultiplier, l_max: usize) -> Result<Vec<Vec<f64>>> {
    let fgrid = eigsys.fgrid();
    if nu.values.len() != fgrid.len() {
        return Err(Error::Dimension("multiplier length differs from the frequency grid".into()));
    }
    let m = eigsys.tgrid().len();
    let w = fgrid.weights();
    let mut re = Vec::with_capacity(2 * l_max + 1);
    let mut worst_im = 0.0f64;
    let mut scale = 0.0f64;
    for l in -(l_max as i64)..=(l_max as i64) {
        let mut acc = vec![Complex64::new(0.0, 0.0); m];
        for (a, &omega) in fgrid.points().iter().enumerate() {
            let c = nu.values[a] * Complex64::from_polar(w[a] / (2.0 * PI), -(l as f64) * omega);
            for (x, z) in acc.iter_mut().zip(eigsys.eigenfunction(a, k)) {
                *x += z * c;
            }
        }
        for z in &acc {
            worst_im = worst_im.max(z.im.abs());
            scale = scale.max(z.norm());
        }
        re.push(acc.into_iter().map(|z| z.re).collect::<Vec<f64>>());
    }
    if worst_im > IMAG_RESIDUE_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Invariant(format!(
            "filters have imaginary residue {worst_im:.3e} (scale {scale:.3e}); conjugate symmetry violated"
        )));
    }
    Ok(re)
}

/// Smallest `L` with `Σ_{|l|≤L} ‖φ_l‖² ≥ 1 - ε`, or `l_max` when
/// unreachable. `norms_sq` is indexed `l = -l_max..=l_max`.
pub fn select_l_k(norms_sq: &[f64], eps: f64, l_max: usize) -> usize {
    debug_assert_eq!(norms_sq.len(), 2 * l_max + 1);
    let target = 1.0 - eps - 1e-12;
    let mut total = norms_sq[l_max];
    for l in 0..=l_max {
        if l > 0 {
            total += norms_sq[l_max - l] + norms_sq[l_max + l];
        }
        if total >= target {
            return l;
        }
    }
    l_max
}

/// Real filters `φ_kl` on a time grid, `k ∈ [K]`, `|l| ≤ L_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    tgrid: TimeGrid,
    lags: Vec<usize>,
    /// `filters[k][l + L_k]`
    filters: Vec<Vec<Vec<f64>>>,
}

impl FilterBank {
    pub fn new(tgrid: TimeGrid, filters: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut lags = Vec::with_capacity(filters.len());
        for f in &filters {
            if f.len() % 2 != 1 {
                return Err(Error::Dimension("each component needs 2L+1 filters".into()));
            }
            if f.iter().any(|v| v.len() != tgrid.len()) {
                return Err(Error::Dimension("filter length differs from the time grid".into()));
            }
            lags.push(f.len() / 2);
        }
        if filters.is_empty() {
            return Err(Error::Argument("filter bank needs at least one component".into()));
        }
        Ok(Self { tgrid, lags, filters })
    }

    pub fn tgrid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn k(&self) -> usize {
        self.filters.len()
    }

    pub fn lag(&self, k: usize) -> usize {
        self.lags[k]
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn filter(&self, k: usize, l: i64) -> &[f64] {
        &self.filters[k][(l + self.lags[k] as i64) as usize]
    }

    pub fn eval(&self, k: usize, l: i64, t: f64) -> f64 {
        self.tgrid.interpolate(self.filter(k, l), t)
    }

    pub fn components(&self) -> &[Vec<Vec<f64>>] {
        &self.filters
    }

    /// `‖φ_kl‖²` for `l = -L_k..=L_k`.
    pub fn norms_sq(&self, k: usize) -> Vec<f64> {
        self.filters[k].iter().map(|f| self.tgrid.norm_sq(f)).collect()
    }

    /// Keeps lags `|l| ≤ lags[k]`; each new lag must not exceed the current one.
    pub fn truncated(&self, lags: &[usize]) -> Result<Self> {
        if lags.len() != self.k() {
            return Err(Error::Dimension("one lag per component is required".into()));
        }
        let mut filters = Vec::with_capacity(self.k());
        for (k, &l) in lags.iter().enumerate() {
            let cur = self.lags[k];
            if l > cur {
                return Err(Error::Argument(format!("cannot extend component {k} from L = {cur} to {l}")));
            }
            filters.push(self.filters[k][cur - l..=cur + l].to_vec());
        }
        Self::new(self.tgrid.clone(), filters)
    }
}

/// Filters shared by all subjects (marginal model) or one bank per subject
/// (individual baseline).
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSet {
    Shared(FilterBank),
    PerSubject(Vec<FilterBank>),
}

impl FilterSet {
    pub fn bank(&self, i: usize) -> &FilterBank {
        match self {
            FilterSet::Shared(b) => b,
            FilterSet::PerSubject(v) => &v[i],
        }
    }

    pub fn k(&self) -> usize {
        self.bank(0).k()
    }

    /// `L_k`, common to all banks.
    pub fn lags(&self) -> &[usize] {
        self.bank(0).lags()
    }

    pub fn tgrid(&self) -> &TimeGrid {
        self.bank(0).tgrid()
    }
}

/// Output of [`estimate_filter_bank`]: filters at `L_max`, the selected
/// lags, the multipliers and the phase-aligned eigensystem.
#[derive(Debug, Clone)]
pub struct FilterEstimate {
    pub full: FilterBank,
    pub selected_lags: Vec<usize>,
    pub multipliers: Vec<PhaseMultiplier>,
    pub reports: Vec<PhaseReport>,
    pub aligned: EigenSystem,
}

impl FilterEstimate {
    pub fn bank(&self) -> FilterBank {
        self.full.truncated(&self.selected_lags).expect("selected lags never exceed L_max")
    }
}

/// Resolves the phase of each of the first `k_count` components and builds
/// their filters up to `l_max`, selecting `L_k` by the cumulative-norm rule.
pub fn estimate_filter_bank(eigsys: &EigenSystem, k_count: usize, l_max: usize, eps: f64) -> Result<FilterEstimate> {
    if k_count == 0 || k_count > eigsys.k_max() {
        return Err(Error::Argument(format!(
            "K = {k_count} must be between 1 and the {} stored eigenpairs",
            eigsys.k_max()
        )));
    }
    let mut aligned = eigsys.truncated(k_count);
    let mut filters = Vec::with_capacity(k_count);
    let mut multipliers = Vec::with_capacity(k_count);
    let mut reports = Vec::with_capacity(k_count);
    let mut selected = Vec::with_capacity(k_count);
    for k in 0..k_count {
        align_signs(&mut aligned, k)?;
        let psi = overlap_kernel(&aligned, k)?;
        let (nu, report) = optimize_phase(&psi, aligned.fgrid())?;
        log::debug!(
            "component {}: phase objective {:.6} -> {:.6} in {} iterations",
            k + 1,
            report.initial_objective,
            report.objective,
            report.iterations
        );
        let f = build_filters(&aligned, k, &nu, l_max)?;
        let norms: Vec<f64> = f.iter().map(|v| aligned.tgrid().norm_sq(v)).collect();
        selected.push(select_l_k(&norms, eps, l_max));
        aligned.apply_phase(k, nu.values())?;
        filters.push(f);
        multipliers.push(nu);
        reports.push(report);
    }
    let full = FilterBank::new(aligned.tgrid().clone(), filters)?;
    Ok(FilterEstimate { full, selected_lags: selected, multipliers, reports, aligned })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_uniform_grids;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_real(tg: &TimeGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let v: Vec<f64> = tg.points().iter().map(|&t| f(t)).collect();
        let n = tg.norm_sq(&v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    /// Eigensystem with a single component `ψ(t|ω) = u(t)·e^{iθ(ω)}`.
    fn one_component(
        tg: &TimeGrid,
        fg: &FrequencyGrid,
        u: &[f64],
        phase: impl Fn(f64) -> Complex64,
    ) -> EigenSystem {
        let funcs = fg
            .points()
            .iter()
            .map(|&w| DMatrix::from_fn(tg.len(), 1, |r, _| phase(w) * u[r]))
            .collect();
        let vals = vec![vec![1.0]; fg.len()];
        EigenSystem::from_parts(tg.clone(), fg.clone(), vals, funcs).unwrap()
    }

    #[test]
    fn overlap_of_constant_functions_is_all_ones() {
        let (tg, fg) = build_uniform_grids(21, 16, 4).unwrap();
        let u = unit_real(&tg, |t| 1.0 + t);
        let e = one_component(&tg, &fg, &u, |_| Complex64::new(1.0, 0.0));
        let psi = overlap_kernel(&e, 0).unwrap();
        assert!(psi.values().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-10));
    }

    #[test]
    fn overlap_of_phase_offset() {
        let (tg, fg) = build_uniform_grids(21, 16, 4).unwrap();
        let u = unit_real(&tg, |t| (3.0 * t).cos() + 2.0);
        let e = one_component(&tg, &fg, &u, |w| Complex64::from_polar(1.0, 0.7 * w));
        let psi = overlap_kernel(&e, 0).unwrap();
        let pts = fg.points();
        for a in 0..fg.len() {
            for b in 0..fg.len() {
                let z = psi.values()[(a, b)];
                assert!((z.norm() - 1.0).abs() < 1e-10);
                let expect = Complex64::from_polar(1.0, 0.7 * (pts[b] - pts[a]));
                assert!((z - expect).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn overlap_of_orthogonal_pair_vanishes() {
        let tg = TimeGrid::uniform(201).unwrap();
        let fg = FrequencyGrid::from_points(vec![-1.0, 1.0]).unwrap();
        let s = unit_real(&tg, |t| (2.0 * PI * t).sin());
        let c = unit_real(&tg, |t| (2.0 * PI * t).cos());
        let funcs = vec![
            DMatrix::from_fn(tg.len(), 1, |r, _| Complex64::new(s[r], 0.0)),
            DMatrix::from_fn(tg.len(), 1, |r, _| Complex64::new(c[r], 0.0)),
        ];
        let e = EigenSystem::from_parts(tg, fg, vec![vec![1.0]; 2], funcs).unwrap();
        let psi = overlap_kernel(&e, 0).unwrap();
        assert!(psi.values()[(0, 1)].norm() < 1e-10);
    }

    #[test]
    fn constant_kernel_keeps_constant_multiplier() {
        let (_, fg) = build_uniform_grids(3, 16, 4).unwrap();
        let n = fg.len();
        let psi = OverlapKernel::new(DMatrix::from_element(n, n, Complex64::new(1.0, 0.0))).unwrap();
        let (nu, rep) = optimize_phase(&psi, &fg).unwrap();
        let c = nu.values()[0];
        assert!(nu.values().iter().all(|z| (z - c).norm() < 1e-12 && (z.norm() - 1.0).abs() < 1e-12));
        let at_one = phase_objective(&psi, &fg, PhaseMultiplier::ones(&fg).values());
        assert!((at_one - 1.0).abs() < 1e-12);
        assert!((rep.objective - at_one).abs() < 1e-8);
    }

    #[test]
    fn injected_ramp_is_cancelled() {
        let (tg, fg) = build_uniform_grids(21, 32, 8).unwrap();
        let u = unit_real(&tg, |t| 1.0 + t * t);
        let e = one_component(&tg, &fg, &u, |w| Complex64::from_polar(1.0, 3.0 * w));
        let psi = overlap_kernel(&e, 0).unwrap();
        let (nu, _) = optimize_phase(&psi, &fg).unwrap();
        let v = nu.values();
        for a in 0..fg.len() {
            for b in 0..fg.len() {
                let z = psi.values()[(a, b)] * v[a].conj() * v[b];
                assert!(z.arg().abs() <= 1e-4, "({a},{b}): arg {}", z.arg());
            }
        }
    }

    fn random_kernel(rng: &mut ChaCha8Rng, fg: &FrequencyGrid) -> OverlapKernel {
        // Gram matrix of random unit vectors with conjugate reflection
        let n = fg.len();
        let dim = 4;
        let start = fg.nonnegative_start();
        let mut vecs = vec![vec![Complex64::new(0.0, 0.0); dim]; n];
        for a in start..n {
            let mut v: Vec<Complex64> = (0..dim)
                .map(|_| {
                    let re = rng.random_range(-1.0..1.0);
                    let im = if fg.is_self_conjugate(a) { 0.0 } else { rng.random_range(-1.0..1.0) };
                    Complex64::new(re, im)
                })
                .collect();
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            v.iter_mut().for_each(|z| *z /= norm);
            vecs[a] = v;
        }
        for a in 0..start {
            vecs[a] = vecs[fg.mirror(a)].iter().map(|z| z.conj()).collect();
        }
        let m = DMatrix::from_fn(n, n, |a, b| vecs[a].iter().zip(&vecs[b]).map(|(x, y)| x.conj() * y).sum());
        OverlapKernel::new(m).unwrap()
    }

    fn random_feasible(rng: &mut ChaCha8Rng, fg: &FrequencyGrid) -> Vec<Complex64> {
        let g: Vec<Complex64> = (0..fg.len())
            .map(|_| Complex64::from_polar(1.0, rng.random_range(-PI..PI)))
            .collect();
        let sym: Vec<Complex64> = (0..fg.len()).map(|a| if fg.points()[a] >= 0.0 { g[a] } else { g[fg.mirror(a)].conj() }).collect();
        project(fg, &sym, &sym)
    }

    #[test]
    fn beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fg = FrequencyGrid::from_points(vec![-3.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 3.0]).unwrap();
        let psi = random_kernel(&mut rng, &fg);
        let (nu, rep) = optimize_phase(&psi, &fg).unwrap();
        assert!(rep.objective >= rep.initial_objective - 1e-12);
        for _ in 0..100 {
            let cand = random_feasible(&mut rng, &fg);
            assert!(phase_objective(&psi, &fg, nu.values()) >= phase_objective(&psi, &fg, &cand) - 1e-12);
        }
    }

    #[test]
    fn constant_eigenfunction_gives_single_filter() {
        let (tg, fg) = build_uniform_grids(31, 64, 8).unwrap();
        let u = unit_real(&tg, |t| (PI * t).sin() + 0.5);
        let e = one_component(&tg, &fg, &u, |_| Complex64::new(1.0, 0.0));
        let f = build_filters(&e, 0, &PhaseMultiplier::ones(&fg), 3).unwrap();
        for (idx, phi) in f.iter().enumerate() {
            let l = idx as i64 - 3;
            for (x, y) in phi.iter().zip(&u) {
                let target = if l == 0 { *y } else { 0.0 };
                assert!((x - target).abs() < 1e-8, "l = {l}");
            }
        }
    }

    #[test]
    fn single_harmonic_shifts_to_lag_plus_one() {
        let (tg, fg) = build_uniform_grids(31, 64, 8).unwrap();
        let u = unit_real(&tg, |t| 1.0 + t);
        let e = one_component(&tg, &fg, &u, |w| Complex64::from_polar(1.0, w));
        let f = build_filters(&e, 0, &PhaseMultiplier::ones(&fg), 2).unwrap();
        for (idx, phi) in f.iter().enumerate() {
            let l = idx as i64 - 2;
            for (x, y) in phi.iter().zip(&u) {
                let target = if l == 1 { *y } else { 0.0 };
                assert!((x - target).abs() < 1e-8, "l = {l}: {x} vs {target}");
            }
        }
    }

    #[test]
    fn broken_symmetry_is_rejected() {
        let (tg, fg) = build_uniform_grids(11, 16, 4).unwrap();
        let u = unit_real(&tg, |_| 1.0);
        // not conjugate-symmetric in ω
        let e = one_component(&tg, &fg, &u, |w| Complex64::from_polar(1.0, 0.3 + w.abs()));
        assert!(matches!(build_filters(&e, 0, &PhaseMultiplier::ones(&fg), 1), Err(Error::Invariant(_))));
    }

    #[test]
    fn lag_rule_examples() {
        // l = -1, 0, 1 with 0.95 at zero
        assert_eq!(select_l_k(&[0.02, 0.95, 0.02], 0.1, 1), 0);
        // (0.5, 0.2, 0.2, 0.05, 0.05) for l = 0, ±1, ±2
        assert_eq!(select_l_k(&[0.05, 0.2, 0.5, 0.2, 0.05], 0.1, 2), 1);
        assert_eq!(select_l_k(&[1e-6; 7], 0.1, 3), 3);
    }

    #[test]
    fn truncation_keeps_central_lags() {
        let tg = TimeGrid::uniform(3).unwrap();
        let f: Vec<Vec<f64>> = (0..5).map(|l| vec![l as f64; 3]).collect();
        let bank = FilterBank::new(tg, vec![f]).unwrap();
        let t = bank.truncated(&[1]).unwrap();
        assert_eq!(t.lag(0), 1);
        assert_eq!(t.filter(0, -1), &[1.0, 1.0, 1.0]);
        assert_eq!(t.filter(0, 1), &[3.0, 3.0, 3.0]);
        assert!(bank.truncated(&[3]).is_err());
    }

    proptest! {
        #[test]
        fn power_steps_never_decrease(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, fg) = build_uniform_grids(3, 8, 3).unwrap();
            let psi = random_kernel(&mut rng, &fg);
            let w = fg.weights();
            let mut nu = random_feasible(&mut rng, &fg);
            let mut obj = phase_objective(&psi, &fg, &nu);
            for _ in 0..20 {
                let g = weighted_apply(&psi, w, &nu);
                let next = project(&fg, &g, &nu);
                let o = phase_objective(&psi, &fg, &next);
                prop_assert!(o >= obj - 1e-12 * obj.abs().max(1.0));
                for (a, z) in next.iter().enumerate() {
                    prop_assert!((z.norm() - 1.0).abs() <= 1e-12);
                    prop_assert_eq!(*z, next[fg.mirror(a)].conj());
                }
                nu = next;
                obj = o;
            }
        }
    }
}
