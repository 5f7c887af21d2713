//! Reconstruction, VAR score forecasting and the NMSE/NMSPE metrics.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::filters::FilterSet;
use crate::fit::{FitConfig, Method};
use crate::grid::TimeGrid;
use crate::scores::{ScoreArray, SolveReport};
use crate::smoothing::{MeanFunctions, NoiseVariances};
use crate::spectral::ScoreSpectralDensity;

/// Ridge added to a rank-deficient VAR regressor Gram matrix.
pub const VAR_RIDGE: f64 = 1e-8;
/// Spectral radius above which forecasts are flagged as explosive.
pub const EXPLOSIVE_RADIUS: f64 = 1.2;

/// Selection results and provenance of a fit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitMetadata {
    pub p: usize,
    pub j: usize,
    pub k: usize,
    pub lags: Vec<usize>,
    pub h_max: usize,
    pub m_t: usize,
    pub m_omega: usize,
    /// Hex SHA-256 of the canonical configuration JSON.
    pub config_hash: String,
    /// `∫ η_k(ω) dω` of the eigensystem used for `K` selection.
    pub integrated_eigenvalues: Vec<f64>,
    /// `Σ_{|l| ≤ L_k} ‖φ_kl‖²` per component (averaged over subjects for
    /// per-subject banks).
    pub filter_norms: Vec<f64>,
    pub solve: SolveReport,
}

/// Everything needed to reconstruct and forecast a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub method: Method,
    pub config: FitConfig,
    pub means: MeanFunctions,
    pub filters: FilterSet,
    pub noise: NoiseVariances,
    pub eta: ScoreSpectralDensity,
    pub scores: ScoreArray,
    pub meta: FitMetadata,
}

impl FittedModel {
    pub fn tgrid(&self) -> &TimeGrid {
        self.means.grid()
    }

    pub fn p(&self) -> usize {
        self.meta.p
    }

    pub fn j(&self) -> usize {
        self.meta.j
    }
}

/// Real curves sampled on a common grid, `p` subjects by `j` curves.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveArray {
    grid: TimeGrid,
    p: usize,
    j: usize,
    values: Vec<f64>,
}

impl CurveArray {
    pub fn zeros(grid: TimeGrid, p: usize, j: usize) -> Self {
        let n = p * j * grid.len();
        Self { grid, p, j, values: vec![0.0; n] }
    }

    /// `values[(i * j + jj) * M + m]`
    pub fn new(grid: TimeGrid, p: usize, j: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != p * j * grid.len() {
            return Err(Error::Dimension(format!(
                "{} values for {p} x {j} curves on {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, p, j, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn curve(&self, i: usize, jj: usize) -> &[f64] {
        let m = self.grid.len();
        let s = (i * self.j + jj) * m;
        &self.values[s..s + m]
    }

    pub fn curve_mut(&mut self, i: usize, jj: usize) -> &mut [f64] {
        let m = self.grid.len();
        let s = (i * self.j + jj) * m;
        &mut self.values[s..s + m]
    }

    /// Curves `from..to` of every subject.
    pub fn slice_curves(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.j {
            return Err(Error::Argument(format!("curve range {from}..{to} outside 0..{}", self.j)));
        }
        let mut out = Self::zeros(self.grid.clone(), self.p, to - from);
        for i in 0..self.p {
            for jj in from..to {
                out.curve_mut(i, jj - from).copy_from_slice(self.curve(i, jj));
            }
        }
        Ok(out)
    }

    /// Linear interpolation onto another grid.
    pub fn resample(&self, target: &TimeGrid) -> Self {
        if &self.grid == target {
            return self.clone();
        }
        let mut out = Self::zeros(target.clone(), self.p, self.j);
        for i in 0..self.p {
            for jj in 0..self.j {
                let v = self.grid.resample(self.curve(i, jj), target);
                out.curve_mut(i, jj).copy_from_slice(&v);
            }
        }
        out
    }

    /// Long format `subject,curve,time,value`; curve numbers start at
    /// `first_curve` (1-based).
    pub fn write_csv<W: Write>(&self, writer: W, first_curve: usize) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        wtr.write_record(["subject", "curve", "time", "value"])?;
        for i in 0..self.p {
            for jj in 0..self.j {
                for (t, v) in self.grid.points().iter().zip(self.curve(i, jj)) {
                    wtr.write_record(&[
                        (i + 1).to_string(),
                        (jj + first_curve).to_string(),
                        t.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Inverse of [`CurveArray::write_csv`]; every curve must share one grid.
    /// Curve numbers are renumbered from zero.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let obs = ObservationSet::read_csv(reader)?;
        let first = obs.curve(0, 0);
        if first.is_empty() {
            return Err(Error::InsufficientData("curve file has an empty first curve".into()));
        }
        let grid = TimeGrid::new(first.times.clone())?;
        let mut values = Vec::with_capacity(obs.total_count());
        for c in obs.curves() {
            if c.times != first.times {
                return Err(Error::Validation("curves in a curve file must share one time grid".into()));
            }
            values.extend_from_slice(&c.values);
        }
        Self::new(grid, obs.p(), obs.j(), values)
    }
}

/// Evaluates `μ_i(t) + Σ_k Σ_l φ_ikl(t) ξ(i, j + l, k)` for curves
/// `j ∈ curves`, with scores supplied by `score`.
fn assemble(
    model: &FittedModel,
    grid: &TimeGrid,
    curves: std::ops::Range<i64>,
    score: impl Fn(usize, i64, usize) -> f64,
) -> CurveArray {
    let p = model.p();
    let ncurves = (curves.end - curves.start) as usize;
    let mut out = CurveArray::zeros(grid.clone(), p, ncurves);
    let src = model.tgrid();
    for i in 0..p {
        let bank = model.filters.bank(i);
        let mu = src.resample(model.means.subject(i), grid);
        let filters: Vec<Vec<Vec<f64>>> = (0..bank.k())
            .map(|k| {
                let lk = bank.lag(k) as i64;
                (-lk..=lk).map(|l| src.resample(bank.filter(k, l), grid)).collect()
            })
            .collect();
        for (n, jj) in curves.clone().enumerate() {
            let c = out.curve_mut(i, n);
            c.copy_from_slice(&mu);
            for (k, fk) in filters.iter().enumerate() {
                let lk = bank.lag(k) as i64;
                for (idx, f) in fk.iter().enumerate() {
                    let s = score(i, jj + idx as i64 - lk, k);
                    if s != 0.0 {
                        c.iter_mut().zip(f).for_each(|(x, v)| *x += s * v);
                    }
                }
            }
        }
    }
    out
}

/// `X̂_ij` for `j ∈ [J]` on the model's time grid.
pub fn impute(model: &FittedModel) -> CurveArray {
    impute_on(model, model.tgrid())
}

/// `X̂_ij` on an arbitrary grid; means and filters are interpolated.
pub fn impute_on(model: &FittedModel, grid: &TimeGrid) -> CurveArray {
    assemble(model, grid, 0..model.j() as i64, |i, j, k| model.scores.get(i, j, k))
}

/// Least-squares VAR(P) without intercept for one score component.
#[derive(Debug, Clone, PartialEq)]
pub struct VarFit {
    pub order: usize,
    /// `coefficients[l-1]` multiplies `x_{t-l}`.
    pub coefficients: Vec<DMatrix<f64>>,
    pub innovation_cov: DMatrix<f64>,
    /// AIC for `P = 1..=P_max` on a common sample.
    pub aic: Vec<f64>,
    pub spectral_radius: f64,
    pub ridge: bool,
}

impl VarFit {
    pub fn dim(&self) -> usize {
        self.innovation_cov.nrows()
    }

    /// Iterated forecasts `x̂_{T+1..T+h}` from `history` (rows are time).
    pub fn forecast(&self, history: &DMatrix<f64>, horizon: usize) -> DMatrix<f64> {
        let p = self.dim();
        let t = history.nrows();
        let mut path = DMatrix::zeros(t + horizon, p);
        path.rows_mut(0, t).copy_from(history);
        for s in t..t + horizon {
            let mut next = nalgebra::DVector::zeros(p);
            for (l, a) in self.coefficients.iter().enumerate() {
                if s > l {
                    next += a * path.row(s - l - 1).transpose();
                }
            }
            path.row_mut(s).copy_from(&next.transpose());
        }
        path.rows(t, horizon).into_owned()
    }
}

/// `min(5, ⌊T/(3p)⌋)`, at least 1.
pub fn default_var_order_cap(t: usize, p: usize) -> usize {
    (t / (3 * p)).clamp(1, 5)
}

struct Ols {
    coef: DMatrix<f64>,
    resid_cov: DMatrix<f64>,
    ridge: bool,
}

fn var_ols(series: &DMatrix<f64>, order: usize, start: usize) -> Ols {
    let p = series.ncols();
    let n = series.nrows() - start;
    let x = DMatrix::from_fn(n, order * p, |r, c| series[(start + r - c / p - 1, c % p)]);
    let y = series.rows(start, n).into_owned();
    let mut gram = x.transpose() * &x;
    let rhs = x.transpose() * &y;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ridge = !(min > 1e-12 * max) || !(max > 0.0);
    if ridge {
        for d in 0..gram.nrows() {
            gram[(d, d)] += VAR_RIDGE;
        }
    }
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.pseudo_inverse(1e-14).map(|g| g * &rhs).unwrap_or_else(|_| DMatrix::zeros(order * p, p)),
    };
    let resid = &y - &x * &coef;
    let resid_cov = resid.transpose() * &resid / n as f64;
    Ols { coef, resid_cov, ridge }
}

fn log_det_psd(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().map(|&v| v.max(1e-300).ln()).sum()
}

/// Largest eigenvalue modulus of the companion matrix.
pub fn companion_radius(coefficients: &[DMatrix<f64>]) -> f64 {
    let Some(first) = coefficients.first() else {
        return 0.0;
    };
    let p = first.nrows();
    let n = p * coefficients.len();
    let mut c = DMatrix::zeros(n, n);
    for (l, a) in coefficients.iter().enumerate() {
        c.view_mut((0, l * p), (p, p)).copy_from(a);
    }
    for d in p..n {
        c[(d, d - p)] = 1.0;
    }
    c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// AIC-selected VAR on a `T × p` series (rows are time).
pub fn fit_var_series(series: &DMatrix<f64>, p_max: Option<usize>) -> Result<VarFit> {
    let (t, p) = series.shape();
    let p_max = p_max.unwrap_or_else(|| default_var_order_cap(t, p));
    if p_max == 0 {
        return Err(Error::Argument("VAR order cap must be at least 1".into()));
    }
    if t <= p * p_max + 1 {
        return Err(Error::InsufficientData(format!(
            "VAR({p_max}) on {p} series needs more than {} time points, got {t}",
            p * p_max + 1
        )));
    }
    let n = (t - p_max) as f64;
    let aic: Vec<f64> = (1..=p_max)
        .map(|order| {
            let fit = var_ols(series, order, p_max);
            log_det_psd(&fit.resid_cov) + 2.0 * (order * p * p) as f64 / n
        })
        .collect();
    let order = 1 + aic
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0;
    let fit = var_ols(series, order, order);
    if fit.ridge {
        log::warn!("VAR regressors are rank deficient; added a {VAR_RIDGE:e} ridge");
    }
    let coefficients: Vec<DMatrix<f64>> =
        (0..order).map(|l| fit.coef.rows(l * p, p).transpose()).collect();
    let spectral_radius = companion_radius(&coefficients);
    if spectral_radius >= 1.0 {
        log::warn!("VAR({order}) is not stable (companion spectral radius {spectral_radius:.3})");
    }
    Ok(VarFit { order, coefficients, innovation_cov: fit.resid_cov, aic, spectral_radius, ridge: fit.ridge })
}

/// VAR for component `k` of the score paths `ξ_{·jk}`, `j = 1-L_k..J+L_k`.
pub fn fit_var(scores: &ScoreArray, k: usize, p_max: Option<usize>) -> Result<VarFit> {
    if k >= scores.layout().k() {
        return Err(Error::Argument(format!("component {k} out of range")));
    }
    fit_var_series(&scores.series(k), p_max)
}

pub fn fit_vars(model: &FittedModel, p_max: Option<usize>) -> Result<Vec<VarFit>> {
    (0..model.meta.k).map(|k| fit_var(&model.scores, k, p_max)).collect()
}

/// Curves `J+1..=J+horizon` from iterated score forecasts.
pub fn forecast(model: &FittedModel, vars: &[VarFit], horizon: usize) -> Result<CurveArray> {
    if horizon == 0 {
        return Err(Error::Argument("forecast horizon must be at least 1".into()));
    }
    if vars.len() != model.meta.k {
        return Err(Error::Dimension(format!("{} VAR fits for K = {}", vars.len(), model.meta.k)));
    }
    let layout = model.scores.layout();
    let mut paths = Vec::with_capacity(vars.len());
    for (k, v) in vars.iter().enumerate() {
        if v.spectral_radius > EXPLOSIVE_RADIUS {
            log::warn!("component {}: explosive VAR (radius {:.3}); forecasting anyway", k + 1, v.spectral_radius);
        }
        let hist = model.scores.series(k);
        let ahead = v.forecast(&hist, horizon);
        let mut full = DMatrix::zeros(hist.nrows() + horizon, layout.p());
        full.rows_mut(0, hist.nrows()).copy_from(&hist);
        full.rows_mut(hist.nrows(), horizon).copy_from(&ahead);
        paths.push(full);
    }
    let j = model.j() as i64;
    Ok(assemble(model, model.tgrid(), j..j + horizon as i64, |i, jj, k| {
        paths[k][((jj + layout.lags()[k] as i64) as usize, i)]
    }))
}

/// `Σ‖truth − est‖² / Σ‖truth‖²` with trapezoid norms on the truth grid.
pub fn nmse(truth: &CurveArray, estimate: &CurveArray) -> Result<f64> {
    let (num, den) = error_energy(truth, estimate)?;
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true curves have zero energy".into()));
    }
    Ok(num / den)
}

/// Numerator and denominator of [`nmse`], for pooling.
pub fn error_energy(truth: &CurveArray, estimate: &CurveArray) -> Result<(f64, f64)> {
    if truth.p() != estimate.p() || truth.j() != estimate.j() {
        return Err(Error::Dimension(format!(
            "truth is {} x {}, estimate is {} x {}",
            truth.p(),
            truth.j(),
            estimate.p(),
            estimate.j()
        )));
    }
    let est = estimate.resample(truth.grid());
    let g = truth.grid();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..truth.p() {
        for jj in 0..truth.j() {
            let t = truth.curve(i, jj);
            let diff: Vec<f64> = t.iter().zip(est.curve(i, jj)).map(|(a, b)| a - b).collect();
            num += g.norm_sq(&diff);
            den += g.norm_sq(t);
        }
    }
    Ok((num, den))
}

/// NMSE between long-format curve tables matched by `(subject, curve)`.
///
/// Only curves present in `estimate` are scored. Each estimated curve is
/// interpolated at the truth's times, and errors are weighted by trapezoid
/// weights on those times (unit weight for a single-point truth curve), so
/// held-out sparse observations work as well as dense truth curves.
pub fn nmse_matched(truth: &ObservationSet, estimate: &ObservationSet) -> Result<f64> {
    let (mut num, mut den, mut matched) = (0.0, 0.0, 0usize);
    for i in 0..estimate.p() {
        for jj in 0..estimate.j() {
            let est = estimate.curve(i, jj);
            if est.is_empty() {
                continue;
            }
            if i >= truth.p() || jj >= truth.j() || truth.curve(i, jj).is_empty() {
                return Err(Error::Dimension(format!("no truth for subject {} curve {}", i + 1, jj + 1)));
            }
            let grid = TimeGrid::new(est.times.clone())
                .map_err(|e| Error::Validation(format!("estimate for subject {} curve {}: {e}", i + 1, jj + 1)))?;
            let tr = truth.curve(i, jj);
            let w: Vec<f64> = if tr.len() > 1 {
                let mut w = vec![0.0; tr.len()];
                for m in 0..tr.len() - 1 {
                    let half = 0.5 * (tr.times[m + 1] - tr.times[m]).abs();
                    w[m] += half;
                    w[m + 1] += half;
                }
                w
            } else {
                vec![1.0]
            };
            for ((&t, &y), w) in tr.times.iter().zip(&tr.values).zip(w) {
                let d = y - grid.interpolate(&est.values, t);
                num += w * d * d;
                den += w * y * y;
            }
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(Error::InsufficientData("estimate file contains no curves".into()));
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true curves have zero energy".into()));
    }
    Ok(num / den)
}

/// How the rolling one-step protocol refits between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Refit {
    /// Rerun the whole pipeline on curves `1..J+m-1`.
    #[default]
    Full,
    /// Freeze means, filters, noise and score spectra from the fit on
    /// `1..J`; re-solve scores and the VAR only.
    ScoresOnly,
}

/// One-step-ahead NMSPE: for `m = 1..=horizon`, fit on curves `1..J+m-1`
/// and forecast curve `J+m`. `obs` and `truth` must hold at least
/// `J + horizon` curves.
pub fn nmspe(
    obs: &ObservationSet,
    truth: &CurveArray,
    j: usize,
    horizon: usize,
    method: Method,
    cfg: &FitConfig,
    refit: Refit,
) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Argument("forecast horizon must be at least 1".into()));
    }
    if obs.j() < j + horizon || truth.j() < j + horizon {
        return Err(Error::InsufficientData(format!(
            "one-step protocol needs {} curves, panel has {}",
            j + horizon,
            obs.j().min(truth.j())
        )));
    }
    let frozen = match refit {
        Refit::Full => None,
        Refit::ScoresOnly => Some(crate::fit::fit(&obs.truncate_curves(j)?, cfg, method)?),
    };
    let (mut num, mut den) = (0.0, 0.0);
    for m in 1..=horizon {
        let train = obs.truncate_curves(j + m - 1)?;
        let model = match &frozen {
            None => crate::fit::fit(&train, cfg, method)?,
            Some(base) => crate::fit::refit_scores(base, &train)?,
        };
        let vars = fit_vars(&model, cfg.var_max_order)?;
        let pred = forecast(&model, &vars, 1)?;
        let target = truth.slice_curves(j + m - 1, j + m)?;
        let (a, b) = error_energy(&target, &pred)?;
        num += a;
        den += b;
    }
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric("true curves have zero energy".into()));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid() -> TimeGrid {
        TimeGrid::uniform(201).unwrap()
    }

    #[test]
    fn nmse_trivial_cases() {
        let g = grid();
        let t: Vec<f64> = g.points().to_vec();
        let truth = CurveArray::new(g.clone(), 1, 1, t.clone()).unwrap();
        assert_eq!(nmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(nmse(&truth, &CurveArray::zeros(g.clone(), 1, 1)).unwrap(), 1.0);
        let half = CurveArray::new(g.clone(), 1, 1, t.iter().map(|x| x / 2.0).collect()).unwrap();
        assert!((nmse(&truth, &half).unwrap() - 0.25).abs() < 1e-6);
        let zero = CurveArray::zeros(g, 1, 1);
        assert!(matches!(nmse(&zero, &half), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matched_nmse_aligns_by_curve_number() {
        let g = TimeGrid::uniform(11).unwrap();
        let truth = CurveArray::new(g.clone(), 1, 3, (0..33).map(|x| 1.0 + x as f64).collect()).unwrap();
        let mut buf = Vec::new();
        truth.write_csv(&mut buf, 1).unwrap();
        let truth_obs = ObservationSet::read_csv(buf.as_slice()).unwrap();
        // curve 3 only, scaled by one half
        let est = CurveArray::new(g, 1, 1, truth.curve(0, 2).iter().map(|v| v / 2.0).collect()).unwrap();
        let mut buf = Vec::new();
        est.write_csv(&mut buf, 3).unwrap();
        let est_obs = ObservationSet::read_csv(buf.as_slice()).unwrap();
        assert!((nmse_matched(&truth_obs, &est_obs).unwrap() - 0.25).abs() < 1e-12);
        assert!(nmse_matched(&est_obs, &truth_obs).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let g = TimeGrid::uniform(5).unwrap();
        let c = CurveArray::new(g, 2, 2, (0..20).map(|x| x as f64 * 0.37).collect()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf, 1).unwrap();
        assert_eq!(CurveArray::read_csv(buf.as_slice()).unwrap(), c);
    }

    fn ar1(rho: f64, t: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(t + 100, p);
        for s in 1..t + 100 {
            for i in 0..p {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[(s, i)] = rho * x[(s - 1, i)] + e;
            }
        }
        x.rows(100, t).into_owned()
    }

    #[test]
    fn var1_order_selected_by_aic() {
        let hits = (0..20).filter(|&seed| fit_var_series(&ar1(0.5, 500, 5, seed), Some(5)).unwrap().order == 1).count();
        assert!(hits >= 18, "VAR(1) chosen {hits}/20 times");
    }

    #[test]
    fn var1_coefficients_near_truth() {
        for seed in 0..20 {
            let fit = fit_var_series(&ar1(0.5, 500, 2, seed), Some(1)).unwrap();
            let diff = &fit.coefficients[0] - DMatrix::identity(2, 2) * 0.5;
            assert!(diff.amax() <= 0.15, "{diff}");
            assert!(fit.spectral_radius < 1.0);
        }
    }

    #[test]
    fn white_noise_has_small_coefficients() {
        let fit = fit_var_series(&ar1(0.0, 500, 3, 9), Some(1)).unwrap();
        assert!(fit.coefficients[0].amax() <= 0.15);
        let f = fit.forecast(&ar1(0.0, 500, 3, 9), 3);
        assert!(f.amax() < 1.0);
    }

    #[test]
    fn constant_series_uses_ridge() {
        let fit = fit_var_series(&DMatrix::zeros(40, 2), None).unwrap();
        assert!(fit.ridge);
        assert!(fit.coefficients.iter().all(|a| a.iter().all(|v| v.is_finite())));
        let fit = fit_var_series(&DMatrix::from_element(40, 2, 3.0), None).unwrap();
        assert!(fit.ridge);
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(fit_var_series(&DMatrix::zeros(5, 2), Some(2)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ar_iteration_closed_form() {
        let fit = VarFit {
            order: 1,
            coefficients: vec![DMatrix::from_element(1, 1, 0.5)],
            innovation_cov: DMatrix::identity(1, 1),
            aic: vec![0.0],
            spectral_radius: 0.5,
            ridge: false,
        };
        let hist = DMatrix::from_column_slice(3, 1, &[0.1, -0.3, 2.0]);
        let f = fit.forecast(&hist, 4);
        for m in 1..=4 {
            assert!((f[(m - 1, 0)] - 0.5f64.powi(m as i32) * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn companion_radius_of_var2() {
        // x_t = 0.5 x_{t-1} + 0.3 x_{t-2}: roots of z² - 0.5z - 0.3
        let r = companion_radius(&[DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.3)]);
        let expect = (0.5 + (0.25f64 + 1.2).sqrt()) / 2.0;
        assert!((r - expect).abs() < 1e-10);
    }
}
