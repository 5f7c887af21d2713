//! Synthetic panels from a dynamic KL generator with graphical score
//! innovations.
//!
//! `ε_ij(t) = Σ_k Σ_{|l|≤L_k} w_l φ_ikl(t) ξ_{i(j+l)k}`, observed at `N_ij`
//! sites drawn without replacement from an equally spaced 31-point lattice.
//!
//! The reference Fourier functions are enumerated over the `(k, l)` slots
//! in order `k = 1..K`, `l = -L_k..L_k`; slot `s` (zero-based) is
//! `√2 sin(2π r t)` for even `s` and `√2 cos(2π r t)` for odd `s`, with
//! `r = ⌊s/2⌋ + 1`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{Curve, ObservationSet};
use crate::error::{Error, Result};
use crate::filters::FilterBank;
use crate::grid::TimeGrid;
use crate::tasks::CurveArray;

pub const LATTICE_SIZE: usize = 31;
pub const BURN_IN: usize = 200;
/// Curves used to calibrate `E‖ε_i1‖²`.
pub const CALIBRATION_CURVES: usize = 2000;
const MAX_PD_ATTEMPTS: usize = 100;

/// Noise and dynamics variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(try_from = "u8", into = "u8")]
pub enum Case {
    /// Gaussian noise, linear VAR(1) scores.
    Gaussian = 1,
    /// Rescaled `t_ν` noise.
    HeavyTailed = 2,
    /// `ξ_{j+1} = ρ ξ_j + sin(ξ_j) + b_j`.
    Nonlinear = 3,
}

impl TryFrom<u8> for Case {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Case::Gaussian),
            2 => Ok(Case::HeavyTailed),
            3 => Ok(Case::Nonlinear),
            other => Err(format!("case must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Case> for u8 {
    fn from(c: Case) -> u8 {
        c as u8
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Inclusive range of observation counts per curve, written `min-max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(try_from = "String", into = "String")]
pub struct NRange {
    pub min: usize,
    pub max: usize,
}

impl NRange {
    pub const SPARSE: NRange = NRange { min: 4, max: 5 };
    pub const MEDIUM: NRange = NRange { min: 5, max: 10 };
    pub const DENSE: NRange = NRange { min: 10, max: 15 };
    pub const FULL: NRange = NRange { min: LATTICE_SIZE, max: LATTICE_SIZE };

    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min == 0 || min > max || max > LATTICE_SIZE {
            return Err(Error::Config(format!(
                "nrange {min}-{max} must satisfy 1 <= min <= max <= {LATTICE_SIZE}"
            )));
        }
        Ok(Self { min, max })
    }
}

impl FromStr for NRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |x: &str| {
            x.trim().parse::<usize>().map_err(|_| Error::Config(format!("nrange `{s}` is not of the form min-max")))
        };
        match s.split_once('-') {
            Some((a, b)) => Self::new(parse(a)?, parse(b)?),
            None => {
                let n = parse(s)?;
                Self::new(n, n)
            }
        }
    }
}

impl TryFrom<String> for NRange {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

impl From<NRange> for String {
    fn from(r: NRange) -> String {
        r.to_string()
    }
}

impl fmt::Display for NRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub p: usize,
    /// Number of generated curves per subject.
    pub j: usize,
    pub k: usize,
    /// `L_k`, one per component.
    pub lags: Vec<usize>,
    /// VAR coefficient `ρ_k`, one per component.
    pub rho: Vec<f64>,
    pub case: Case,
    pub nrange: NRange,
    /// Noise variance as a fraction of `E‖ε_i1‖²`; zero gives noiseless data.
    pub noise_fraction: f64,
    pub kappa: f64,
    pub r1: f64,
    pub r2: f64,
    /// Degrees of freedom of the heavy-tailed noise.
    pub nu: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p: 5,
            j: 60,
            k: 1,
            lags: vec![1],
            rho: vec![0.5],
            case: Case::Gaussian,
            nrange: NRange::MEDIUM,
            noise_fraction: 0.1,
            kappa: 3.0,
            r1: 0.1,
            r2: 0.35,
            nu: 5.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.p == 0 {
            return bad("p", "must be positive".into());
        }
        if self.j == 0 {
            return bad("j", "must be positive".into());
        }
        if self.k == 0 {
            return bad("k", "must be positive".into());
        }
        if self.lags.len() != self.k {
            return bad("lags", format!("needs {} entries", self.k));
        }
        if self.rho.len() != self.k {
            return bad("rho", format!("needs {} entries", self.k));
        }
        if self.case != Case::Nonlinear && self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return bad("rho", "must lie in (-1, 1)".into());
        }
        if let Err(e) = NRange::new(self.nrange.min, self.nrange.max) {
            return bad("nrange", e.to_string());
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return bad("noise_fraction", "must be nonnegative".into());
        }
        if !(self.kappa >= 0.0 && self.kappa <= self.p as f64) {
            return bad("kappa", "kappa / p must lie in [0, 1]".into());
        }
        if !(0.0 < self.r1 && self.r1 < self.r2) {
            return bad("r1", "need 0 < r1 < r2".into());
        }
        if !(self.nu > 2.0) {
            return bad("nu", "must exceed 2 for finite variance".into());
        }
        let slots: usize = self.lags.iter().map(|l| 2 * l + 1).sum();
        if slots > 2 * (LATTICE_SIZE / 2) {
            return bad("lags", "too many basis slots for the 31-point lattice".into());
        }
        Ok(())
    }
}

/// The equally spaced observation lattice `{0, 1/30, …, 1}`.
pub fn lattice() -> TimeGrid {
    TimeGrid::uniform(LATTICE_SIZE).expect("31 points")
}

/// Innovation precision `Θ_k^b` and its edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSpec {
    pub theta: DMatrix<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl PrecisionSpec {
    /// Draws `b ~ N(0, Θ⁻¹)`.
    pub fn sampler(&self) -> Result<InnovationSampler> {
        let chol = self
            .theta
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Generation("innovation precision is not positive definite".into()))?;
        Ok(InnovationSampler { upper: chol.l().transpose() })
    }
}

pub struct InnovationSampler {
    upper: DMatrix<f64>,
}

impl InnovationSampler {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.upper.nrows(), |_, _| StandardNormal.sample(rng));
        // Lᵀ b = z gives Cov(b) = (L Lᵀ)⁻¹
        self.upper.solve_upper_triangular(&z).expect("Cholesky factor has a positive diagonal")
    }
}

/// `[Θ]_{ii} = e^{k/10}/5`, `[Θ]_{ab} = R_ab e^{k/10}/5` on sampled edges.
/// `k` is one-based. Edges are redrawn until `Θ` is positive definite.
pub fn gen_precision<R: Rng>(p: usize, k: usize, kappa: f64, r1: f64, r2: f64, rng: &mut R) -> Result<PrecisionSpec> {
    if !(kappa >= 0.0 && kappa <= p as f64) || !(0.0 < r1 && r1 < r2) {
        return Err(Error::Argument(format!("invalid graph parameters κ = {kappa}, r = [{r1}, {r2}] for p = {p}")));
    }
    let diag = (k as f64 / 10.0).exp() / 5.0;
    let prob = if p == 0 { 0.0 } else { kappa / p as f64 };
    for _ in 0..MAX_PD_ATTEMPTS {
        let mut theta = DMatrix::from_diagonal_element(p, p, diag);
        let mut edges = Vec::new();
        for a in 0..p {
            for b in a + 1..p {
                if rng.random::<f64>() < prob {
                    let mag = rng.random_range(r1..r2);
                    let r = if rng.random::<bool>() { mag } else { -mag };
                    theta[(a, b)] = r * diag;
                    theta[(b, a)] = r * diag;
                    edges.push((a, b));
                }
            }
        }
        if theta.clone().cholesky().is_some() {
            return Ok(PrecisionSpec { theta, edges });
        }
    }
    Err(Error::Generation(format!(
        "no positive definite precision in {MAX_PD_ATTEMPTS} draws (p = {p}, k = {k}, κ = {kappa}, r = [{r1}, {r2}])"
    )))
}

/// Score paths of length `len` (rows are time, columns subjects) after a
/// burn-in from zero.
pub fn gen_score_path<R: Rng>(
    sampler: &InnovationSampler,
    rho: f64,
    len: usize,
    case: Case,
    rng: &mut R,
) -> DMatrix<f64> {
    let p = sampler.upper.nrows();
    let mut x = DVector::zeros(p);
    let mut out = DMatrix::zeros(len, p);
    for s in 0..BURN_IN + len {
        let b = sampler.draw(rng);
        x = match case {
            Case::Nonlinear => x.map(|v: f64| rho * v + v.sin()) + b,
            _ => x * rho + b,
        };
        if s >= BURN_IN {
            out.row_mut(s - BURN_IN).copy_from(&x.transpose());
        }
    }
    out
}

/// True score paths `ξ_{·jk}` for `j = 1-L_k..J+L_k`, one matrix per `k`.
pub fn gen_scores<R: Rng>(
    specs: &[PrecisionSpec],
    rho: &[f64],
    j: usize,
    lags: &[usize],
    case: Case,
    rng: &mut R,
) -> Result<Vec<DMatrix<f64>>> {
    if specs.len() != rho.len() || specs.len() != lags.len() {
        return Err(Error::Dimension("one precision, ρ and L per component".into()));
    }
    specs
        .iter()
        .zip(rho)
        .zip(lags)
        .map(|((s, &r), &l)| Ok(gen_score_path(&s.sampler()?, r, j + 2 * l, case, rng)))
        .collect()
}

/// `w_l = sqrt(e^{-|l|/2} / Σ_{|l'|≤L} e^{-|l'|/2})` for `l = -L..=L`.
pub fn lag_weights(l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (-(l as i64)..=l as i64).map(|x| (-(x.abs() as f64) / 2.0).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total).sqrt()).collect()
}

/// Reference function of basis slot `s`.
pub fn fourier_slot(s: usize, t: f64) -> f64 {
    let r = (s / 2 + 1) as f64;
    if s % 2 == 0 {
        SQRT_2 * (2.0 * PI * r * t).sin()
    } else {
        SQRT_2 * (2.0 * PI * r * t).cos()
    }
}

/// Subject factor `1 + sin(i t / p)` for one-based `i`.
pub fn fluctuation(i: usize, p: usize, t: f64) -> f64 {
    1.0 + (i as f64 * t / p as f64).sin()
}

/// True filters `φ_ikl` (unweighted) on `grid`, one bank per subject, and
/// the lag weights `w_l` per component.
pub fn gen_basis(p: usize, lags: &[usize], grid: &TimeGrid) -> Result<(Vec<FilterBank>, Vec<Vec<f64>>)> {
    let mut banks = Vec::with_capacity(p);
    for i in 1..=p {
        let mut slot = 0;
        let mut comps = Vec::with_capacity(lags.len());
        for &l in lags {
            let mut fk = Vec::with_capacity(2 * l + 1);
            for _ in 0..2 * l + 1 {
                fk.push(grid.points().iter().map(|&t| fourier_slot(slot, t) * fluctuation(i, p, t)).collect());
                slot += 1;
            }
            comps.push(fk);
        }
        banks.push(FilterBank::new(grid.clone(), comps)?);
    }
    Ok((banks, lags.iter().map(|&l| lag_weights(l)).collect()))
}

/// Latent curves for curve indices `0..n` from paths indexed from `-L_k`.
fn synthesize(banks: &[FilterBank], weights: &[Vec<f64>], scores: &[DMatrix<f64>], n: usize) -> CurveArray {
    let grid = banks[0].tgrid().clone();
    let p = banks.len();
    let mut out = CurveArray::zeros(grid, p, n);
    for (i, bank) in banks.iter().enumerate() {
        for jj in 0..n {
            let c = out.curve_mut(i, jj);
            for k in 0..bank.k() {
                let lk = bank.lag(k) as i64;
                for l in -lk..=lk {
                    let s = weights[k][(l + lk) as usize] * scores[k][(((jj as i64) + l + lk) as usize, i)];
                    c.iter_mut().zip(bank.filter(k, l)).for_each(|(x, f)| *x += s * f);
                }
            }
        }
    }
    out
}

/// Generated panel with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthPanel {
    pub config: SimConfig,
    /// `ε_ij` on the 31-point lattice.
    pub latent: CurveArray,
    /// `ξ_{·jk}` for `j = 1-L_k..J+L_k`.
    pub scores: Vec<DMatrix<f64>>,
    pub filters: Vec<FilterBank>,
    pub weights: Vec<Vec<f64>>,
    pub precision: Vec<PrecisionSpec>,
    /// Calibrated `E‖ε_i1‖²`.
    pub energy: Vec<f64>,
    /// Noise standard deviation per subject.
    pub noise_scale: Vec<f64>,
    pub observations: ObservationSet,
}

impl TruthPanel {
    /// Rebuilds the latent curves from the stored scores and filters.
    pub fn regenerate(&self) -> CurveArray {
        synthesize(&self.filters, &self.weights, &self.scores, self.latent.j())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Monte Carlo `E‖ε_i1‖²` from a long stationary run.
fn calibrate_energy(
    banks: &[FilterBank],
    weights: &[Vec<f64>],
    precision: &[PrecisionSpec],
    cfg: &SimConfig,
) -> Result<Vec<f64>> {
    let mut rng = stream(cfg.seed, 3);
    let scores = gen_scores(precision, &cfg.rho, CALIBRATION_CURVES, &cfg.lags, cfg.case, &mut rng)?;
    let curves = synthesize(banks, weights, &scores, CALIBRATION_CURVES);
    let g = curves.grid();
    Ok((0..cfg.p)
        .map(|i| (0..CALIBRATION_CURVES).map(|jj| g.norm_sq(curves.curve(i, jj))).sum::<f64>() / CALIBRATION_CURVES as f64)
        .collect())
}

/// Generates a panel; identical configurations give identical panels.
///
/// Independent random streams feed the graph, the score paths, the energy
/// calibration and the sampling, so panels that differ only in `nrange`
/// share their latent curves.
pub fn gen_panel(cfg: &SimConfig) -> Result<TruthPanel> {
    cfg.validate()?;
    let grid = lattice();
    let mut graph_rng = stream(cfg.seed, 1);
    let precision = (1..=cfg.k)
        .map(|k| gen_precision(cfg.p, k, cfg.kappa, cfg.r1, cfg.r2, &mut graph_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut score_rng = stream(cfg.seed, 2);
    let scores = gen_scores(&precision, &cfg.rho, cfg.j, &cfg.lags, cfg.case, &mut score_rng)?;
    let (filters, weights) = gen_basis(cfg.p, &cfg.lags, &grid)?;
    let latent = synthesize(&filters, &weights, &scores, cfg.j);
    let energy = calibrate_energy(&filters, &weights, &precision, cfg)?;
    let noise_var: Vec<f64> = energy.iter().map(|e| e * cfg.noise_fraction).collect();
    let noise_scale: Vec<f64> = match cfg.case {
        // c_i = sqrt((ν-2)/ν · E‖ε‖² · fraction), so Var(c_i τ̃) matches the Gaussian case
        Case::HeavyTailed => noise_var.iter().map(|v| ((cfg.nu - 2.0) / cfg.nu * v).sqrt()).collect(),
        _ => noise_var.iter().map(|v| v.sqrt()).collect(),
    };
    let t_dist = StudentT::new(cfg.nu).map_err(|e| Error::Generation(e.to_string()))?;
    let mut obs_rng = stream(cfg.seed, 4);
    let mut curves = Vec::with_capacity(cfg.p * cfg.j);
    for i in 0..cfg.p {
        for jj in 0..cfg.j {
            let n = obs_rng.random_range(cfg.nrange.min..=cfg.nrange.max);
            let mut sites = sample(&mut obs_rng, LATTICE_SIZE, n).into_vec();
            sites.sort_unstable();
            let truth = latent.curve(i, jj);
            let times: Vec<f64> = sites.iter().map(|&m| grid.points()[m]).collect();
            let values = sites
                .iter()
                .map(|&m| {
                    let noise = match cfg.case {
                        Case::HeavyTailed => noise_scale[i] * t_dist.sample(&mut obs_rng),
                        _ => noise_scale[i] * Distribution::<f64>::sample(&StandardNormal, &mut obs_rng),
                    };
                    truth[m] + noise
                })
                .collect();
            curves.push(Curve::new(times, values)?);
        }
    }
    let observations = ObservationSet::new(cfg.p, cfg.j, curves)?;
    Ok(TruthPanel { config: cfg.clone(), latent, scores, filters, weights, precision, energy, noise_scale, observations })
}
