//! Local linear estimation of means, lagged autocovariance surfaces and
//! measurement-noise variances from raw discrete observations.
//!
//! Raw points that share coordinates are merged into sufficient statistics
//! (count, sum, sum of squares) before smoothing. Weighted least squares on
//! the merged points is identical to least squares on the raw points, and on
//! lattice designs it shrinks the work by orders of magnitude.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::data::{Curve, ObservationSet};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Number of candidate bandwidths scanned by generalized cross-validation.
const GCV_GRID: usize = 10;
/// Local widening steps tried before falling back to a local constant fit.
const MAX_WIDENINGS: usize = 24;
const WIDEN_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingKernel {
    #[default]
    Epanechnikov,
}

impl SmoothingKernel {
    #[inline]
    fn weight(self, u: f64) -> f64 {
        match self {
            SmoothingKernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Bandwidth choice: `"auto"` (GCV) or a fixed positive value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Auto => s.serialize_str("auto"),
            Bandwidth::Fixed(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) if s == "auto" => Ok(Bandwidth::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "bandwidth must be \"auto\" or a positive number, got \"{s}\""
            ))),
            Raw::Value(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
            Raw::Value(h) => Err(serde::de::Error::custom(format!("bandwidth must be positive, got {h}"))),
        }
    }
}

impl JsonSchema for Bandwidth {
    fn schema_name() -> std::borrow::Cow<'static, str> {
        "Bandwidth".into()
    }

    fn json_schema(_: &mut schemars::SchemaGenerator) -> schemars::Schema {
        schemars::json_schema!({
            "description": "\"auto\" for generalized cross-validation, or a fixed positive bandwidth",
            "oneOf": [
                { "type": "string", "enum": ["auto"] },
                { "type": "number", "exclusiveMinimum": 0.0 }
            ]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub bandwidth: Bandwidth,
    pub kernel: SmoothingKernel,
}

// ---------------------------------------------------------------------------
// merged scatter data

#[derive(Debug, Clone, Default)]
struct Stats {
    count: f64,
    sum: f64,
    sumsq: f64,
}

impl Stats {
    fn add(&mut self, y: f64) {
        self.count += 1.0;
        self.sum += y;
        self.sumsq += y * y;
    }
}

/// Scatter data `(x, y)` merged by exact coordinate, sorted by `x`.
#[derive(Debug, Clone)]
struct Scatter1 {
    x: Vec<f64>,
    stats: Vec<Stats>,
    n: f64,
}

impl Scatter1 {
    fn from_points(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut map: HashMap<u64, (f64, Stats)> = HashMap::new();
        for (x, y) in points {
            map.entry(x.to_bits()).or_insert_with(|| (x, Stats::default())).1.add(y);
        }
        let mut v: Vec<(f64, Stats)> = map.into_values().collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = v.iter().map(|(_, s)| s.count).sum();
        let (x, stats) = v.into_iter().unzip();
        Self { x, stats, n }
    }

    fn distinct(&self) -> usize {
        self.x.len()
    }

    /// Local linear fit at `x0`: returns `(value, self-leverage per raw point)`.
    fn fit(&self, kernel: SmoothingKernel, x0: f64, h: f64) -> Option<(f64, f64)> {
        let lo = self.x.partition_point(|&x| x <= x0 - h);
        let hi = self.x.partition_point(|&x| x < x0 + h);
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for u in lo..hi {
            let d = self.x[u] - x0;
            let k = kernel.weight(d / h);
            if k == 0.0 {
                continue;
            }
            let st = &self.stats[u];
            s0 += k * st.count;
            s1 += k * st.count * d;
            s2 += k * st.count * d * d;
            t0 += k * st.sum;
            t1 += k * st.sum * d;
        }
        let det = s0 * s2 - s1 * s1;
        if !(s0 > 0.0) || det <= 1e-12 * s0 * s2.max(f64::MIN_POSITIVE) || det <= 0.0 {
            return None;
        }
        let value = (s2 * t0 - s1 * t1) / det;
        let leverage = kernel.weight(0.0) * s2 / det;
        Some((value, leverage))
    }

    /// Local linear fit that widens the window locally when singular, and
    /// degrades to a local constant (then a global mean) if widening fails.
    fn fit_robust(&self, kernel: SmoothingKernel, x0: f64, h: f64) -> f64 {
        let mut hh = h;
        for _ in 0..MAX_WIDENINGS {
            if let Some((v, _)) = self.fit(kernel, x0, hh) {
                return v;
            }
            hh *= WIDEN_FACTOR;
        }
        let (num, den) = self.stats.iter().fold((0.0, 0.0), |(a, b), s| (a + s.sum, b + s.count));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    fn gcv(&self, kernel: SmoothingKernel, h: f64) -> f64 {
        let mut rss = 0.0;
        let mut trace = 0.0;
        for (u, st) in self.stats.iter().enumerate() {
            let Some((fit, lev)) = self.fit(kernel, self.x[u], h) else {
                return f64::INFINITY;
            };
            rss += st.sumsq - 2.0 * fit * st.sum + st.count * fit * fit;
            trace += st.count * lev;
        }
        gcv_score(rss.max(0.0), trace, self.n)
    }
}

fn gcv_score(rss: f64, trace: f64, n: f64) -> f64 {
    let denom = 1.0 - trace / n;
    if !(denom > 0.0) || !rss.is_finite() {
        return f64::INFINITY;
    }
    (rss / n) / (denom * denom)
}

/// Candidate bandwidths: log-spaced between twice the median spacing of the
/// distinct coordinates and half the coordinate range.
fn bandwidth_candidates(coords: &[f64]) -> (Vec<f64>, f64) {
    let mut u: Vec<f64> = coords.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut gaps: Vec<f64> = u.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.sort_by(f64::total_cmp);
    let median = if gaps.is_empty() { 0.05 } else { gaps[gaps.len() / 2] };
    let range = (u.last().copied().unwrap_or(1.0) - u.first().copied().unwrap_or(0.0)).max(1e-3);
    let lo = (2.0 * median).max(1e-3);
    let hi = (0.5 * range).max(lo * 1.01);
    let ratio = (hi / lo).ln();
    let grid = (0..GCV_GRID)
        .map(|g| lo * (ratio * g as f64 / (GCV_GRID - 1) as f64).exp())
        .collect();
    (grid, WIDEN_FACTOR * median)
}

fn select_by_gcv(candidates: &[f64], fallback: f64, score: impl Fn(f64) -> f64) -> f64 {
    let mut best = (f64::INFINITY, fallback);
    for &h in candidates {
        let s = score(h);
        if s < best.0 {
            best = (s, h);
        }
    }
    best.1
}

/// Scatter data on the plane, merged by exact coordinate pair.
#[derive(Debug, Clone)]
struct Scatter2 {
    x: Vec<f64>,
    y: Vec<f64>,
    stats: Vec<Stats>,
    n: f64,
}

impl Scatter2 {
    fn from_points(points: impl IntoIterator<Item = (f64, f64, f64)>) -> Self {
        let mut map: HashMap<(u64, u64), (f64, f64, Stats)> = HashMap::new();
        for (x, y, v) in points {
            map.entry((x.to_bits(), y.to_bits()))
                .or_insert_with(|| (x, y, Stats::default()))
                .2
                .add(v);
        }
        let mut v: Vec<(f64, f64, Stats)> = map.into_values().collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let n = v.iter().map(|p| p.2.count).sum();
        let mut x = Vec::with_capacity(v.len());
        let mut y = Vec::with_capacity(v.len());
        let mut stats = Vec::with_capacity(v.len());
        for (a, b, s) in v {
            x.push(a);
            y.push(b);
            stats.push(s);
        }
        Self { x, y, stats, n }
    }

    fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn fit(&self, kernel: SmoothingKernel, x0: f64, y0: f64, h: f64) -> Option<(f64, f64)> {
        let lo = self.x.partition_point(|&x| x <= x0 - h);
        let hi = self.x.partition_point(|&x| x < x0 + h);
        // normal equations for [1, dx, dy]
        let mut m = [[0.0f64; 3]; 3];
        let mut r = [0.0f64; 3];
        for u in lo..hi {
            let dy = self.y[u] - y0;
            if dy.abs() >= h {
                continue;
            }
            let dx = self.x[u] - x0;
            let k = kernel.weight(dx / h) * kernel.weight(dy / h);
            if k == 0.0 {
                continue;
            }
            let st = &self.stats[u];
            let basis = [1.0, dx, dy];
            for a in 0..3 {
                r[a] += k * st.sum * basis[a];
                for b in a..3 {
                    m[a][b] += k * st.count * basis[a] * basis[b];
                }
            }
        }
        m[1][0] = m[0][1];
        m[2][0] = m[0][2];
        m[2][1] = m[1][2];
        if !(m[0][0] > 0.0) {
            return None;
        }
        // first row of the inverse via cofactors
        let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
        let c01 = -(m[1][0] * m[2][2] - m[1][2] * m[2][0]);
        let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
        let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
        let scale = m[0][0] * m[1][1] * m[2][2];
        if !(det > 1e-10 * scale) {
            return None;
        }
        let value = (c00 * r[0] + c01 * r[1] + c02 * r[2]) / det;
        let k0 = kernel.weight(0.0);
        let leverage = k0 * k0 * c00 / det;
        Some((value, leverage))
    }

    fn fit_robust(&self, kernel: SmoothingKernel, x0: f64, y0: f64, h: f64) -> f64 {
        let mut hh = h;
        for _ in 0..MAX_WIDENINGS {
            if let Some((v, _)) = self.fit(kernel, x0, y0, hh) {
                return v;
            }
            hh *= WIDEN_FACTOR;
        }
        let (num, den) = self.stats.iter().fold((0.0, 0.0), |(a, b), s| (a + s.sum, b + s.count));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    fn gcv(&self, kernel: SmoothingKernel, h: f64) -> f64 {
        let mut rss = 0.0;
        let mut trace = 0.0;
        for (u, st) in self.stats.iter().enumerate() {
            let Some((fit, lev)) = self.fit(kernel, self.x[u], self.y[u], h) else {
                return f64::INFINITY;
            };
            rss += st.sumsq - 2.0 * fit * st.sum + st.count * fit * fit;
            trace += st.count * lev;
        }
        gcv_score(rss.max(0.0), trace, self.n)
    }
}

fn smooth_1d(data: &Scatter1, grid: &TimeGrid, cfg: &SmoothingConfig) -> Vec<f64> {
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => {
            let (cands, fallback) = bandwidth_candidates(&data.x);
            select_by_gcv(&cands, fallback, |h| data.gcv(cfg.kernel, h))
        }
    };
    grid.points().iter().map(|&t| data.fit_robust(cfg.kernel, t, h)).collect()
}

fn smooth_2d(data: &Scatter2, grid: &TimeGrid, cfg: &SmoothingConfig) -> DMatrix<f64> {
    let h = bandwidth_2d(data, cfg);
    let pts = grid.points();
    let n = pts.len();
    DMatrix::from_fn(n, n, |a, b| data.fit_robust(cfg.kernel, pts[a], pts[b], h))
}

// ---------------------------------------------------------------------------
// public estimators

/// Estimated mean functions `μ̂_i` sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFunctions {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl MeanFunctions {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().any(|v| v.len() != grid.len()) {
            return Err(Error::Dimension("mean function length differs from grid".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("mean functions must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn p(&self) -> usize {
        self.values.len()
    }

    pub fn subject(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn at(&self, i: usize, t: f64) -> f64 {
        self.grid.interpolate(&self.values[i], t)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v.iter().map(|x| x * c).collect()).collect(),
        }
    }
}

/// Lagged autocovariance surfaces `Ĉ_iih` of one subject for `h = 0..=H`.
/// Negative lags are served by transposition, `Ĉ_ii(-h)(t,s) = Ĉ_iih(s,t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovField {
    lags: Vec<DMatrix<f64>>,
}

impl AutocovField {
    pub fn new(lags: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = lags.first() else {
            return Err(Error::Argument("autocovariance field needs lag 0".into()));
        };
        let n = first.nrows();
        if lags.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::Dimension("autocovariance surfaces differ in size".into()));
        }
        Ok(Self { lags })
    }

    /// Largest stored nonnegative lag.
    pub fn max_lag(&self) -> usize {
        self.lags.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.lags[0].nrows()
    }

    pub fn has_lag(&self, h: i64) -> bool {
        h.unsigned_abs() as usize <= self.max_lag()
    }

    pub fn get(&self, h: i64, a: usize, b: usize) -> f64 {
        if h >= 0 {
            self.lags[h as usize][(a, b)]
        } else {
            self.lags[(-h) as usize][(b, a)]
        }
    }

    pub fn lag(&self, h: i64) -> DMatrix<f64> {
        if h >= 0 {
            self.lags[h as usize].clone()
        } else {
            self.lags[(-h) as usize].transpose()
        }
    }

    pub fn nonnegative_lags(&self) -> &[DMatrix<f64>] {
        &self.lags
    }
}

/// Measurement-noise variances `σ̂_i²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances {
    pub values: Vec<f64>,
}

fn distinct_times(curves: &[Curve]) -> usize {
    let mut t: Vec<f64> = curves.iter().flat_map(|c| c.times.iter().copied()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.len()
}

/// Local linear mean of one subject's pooled observations.
pub fn estimate_mean(curves: &[Curve], grid: &TimeGrid, cfg: &SmoothingConfig) -> Result<Vec<f64>> {
    let distinct = distinct_times(curves);
    if distinct < 3 {
        return Err(Error::InsufficientData(format!(
            "mean estimation needs at least 3 distinct observation times, found {distinct}"
        )));
    }
    let data = Scatter1::from_points(
        curves.iter().flat_map(|c| c.times.iter().copied().zip(c.values.iter().copied())),
    );
    debug_assert!(data.distinct() >= 3);
    Ok(smooth_1d(&data, grid, cfg))
}

pub fn estimate_means(obs: &ObservationSet, grid: &TimeGrid, cfg: &SmoothingConfig) -> Result<MeanFunctions> {
    let values = (0..obs.p())
        .into_par_iter()
        .map(|i| {
            estimate_mean(obs.subject_curves(i), grid, cfg).map_err(|e| match e {
                Error::InsufficientData(m) => Error::InsufficientData(format!("subject {}: {m}", i + 1)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MeanFunctions::new(grid.clone(), values)
}

/// Raw cross products `{Y_{(j+h)z1} - μ(t)}{Y_{jz2} - μ(s)}` at `(t, s)`.
/// Lag-0 pairs with `z1 = z2` are dropped: they carry the noise variance.
fn cross_products(curves: &[Curve], mean: &[f64], grid: &TimeGrid, h: usize) -> Vec<(f64, f64, f64)> {
    let resid: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| c.times.iter().zip(&c.values).map(|(&t, &y)| y - grid.interpolate(mean, t)).collect())
        .collect();
    let mut out = Vec::new();
    for j in 0..curves.len().saturating_sub(h) {
        let (lead, base) = (&curves[j + h], &curves[j]);
        for (z1, (&t, &r1)) in lead.times.iter().zip(&resid[j + h]).enumerate() {
            for (z2, (&s, &r2)) in base.times.iter().zip(&resid[j]).enumerate() {
                if h == 0 && z1 == z2 {
                    continue;
                }
                out.push((t, s, r1 * r2));
            }
        }
    }
    out
}

/// Lag-`h` autocovariance surface of one subject on `grid × grid`.
pub fn estimate_autocov_subject(
    curves: &[Curve],
    mean: &[f64],
    h: usize,
    grid: &TimeGrid,
    cfg: &SmoothingConfig,
) -> Result<DMatrix<f64>> {
    if h >= curves.len() {
        return Err(Error::Argument(format!("lag {h} requires at least {} curves", h + 1)));
    }
    let data = Scatter2::from_points(cross_products(curves, mean, grid, h));
    if data.is_empty() {
        return Err(Error::InsufficientData(format!("no observation pairs at lag {h}")));
    }
    let mut c = smooth_2d(&data, grid, cfg);
    if h == 0 {
        let ct = c.transpose();
        c = (c + ct) * 0.5;
    }
    Ok(c)
}

/// `Ĉ_iih` for every subject.
pub fn estimate_autocov(
    obs: &ObservationSet,
    means: &MeanFunctions,
    h: usize,
    grid: &TimeGrid,
    cfg: &SmoothingConfig,
) -> Result<Vec<DMatrix<f64>>> {
    (0..obs.p())
        .into_par_iter()
        .map(|i| estimate_autocov_subject(obs.subject_curves(i), means.subject(i), h, grid, cfg))
        .collect()
}

/// Autocovariance surfaces for lags `0..=max_lag` of every subject.
pub fn estimate_autocov_fields(
    obs: &ObservationSet,
    means: &MeanFunctions,
    max_lag: usize,
    grid: &TimeGrid,
    cfg: &SmoothingConfig,
) -> Result<Vec<AutocovField>> {
    if max_lag >= obs.j() {
        return Err(Error::Argument(format!("lag {max_lag} exceeds J - 1 = {}", obs.j() - 1)));
    }
    (0..obs.p())
        .into_par_iter()
        .map(|i| {
            let lags = (0..=max_lag)
                .map(|h| estimate_autocov_subject(obs.subject_curves(i), means.subject(i), h, grid, cfg))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::InsufficientData(m) => Error::InsufficientData(format!("subject {}: {m}", i + 1)),
                    other => other,
                })?;
            AutocovField::new(lags)
        })
        .collect()
}

/// Local noise level at `t0` from one joint fit of the lag-0 cross products
/// and the squared residuals. In rotated coordinates `u = (t+s)/2`,
/// `v = t - s` the model is `β0 + β1 (u - t0) + β2 v² + β3 D`, where `D`
/// marks squared residuals; `β0` is then `C_0(t0,t0)` and `β3` is `σ²`.
/// Fitting both with one set of weights lets the curve-to-curve variation
/// of `X(t)²` cancel instead of entering `σ̂²` twice.
fn joint_noise(off: &Scatter2, diag: &Scatter1, kernel: SmoothingKernel, t0: f64, h: f64) -> Option<f64> {
    let mut m = nalgebra::Matrix4::<f64>::zeros();
    let mut r = nalgebra::Vector4::<f64>::zeros();
    let mut add = |basis: [f64; 4], w: f64, st: &Stats| {
        let b = nalgebra::Vector4::from(basis);
        m += b * b.transpose() * (w * st.count);
        r += b * (w * st.sum);
    };
    for (u, st) in off.stats.iter().enumerate() {
        let du = 0.5 * (off.x[u] + off.y[u]) - t0;
        let v = off.x[u] - off.y[u];
        let w = kernel.weight(du / h) * kernel.weight(v / h);
        if w > 0.0 {
            add([1.0, du, v * v, 0.0], w, st);
        }
    }
    let k0 = kernel.weight(0.0);
    for (u, st) in diag.stats.iter().enumerate() {
        let du = diag.x[u] - t0;
        let w = kernel.weight(du / h) * k0;
        if w > 0.0 {
            add([1.0, du, 0.0, 1.0], w, st);
        }
    }
    let scale = (0..4).map(|a| m[(a, a)]).product::<f64>();
    if !(scale > 0.0) || !(m.determinant() > 1e-12 * scale) {
        return None;
    }
    m.lu().solve(&r).map(|b| b[3])
}

fn bandwidth_2d(data: &Scatter2, cfg: &SmoothingConfig) -> f64 {
    match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Auto => {
            let coords: Vec<f64> = data.x.iter().chain(&data.y).copied().collect();
            let (cands, fallback) = bandwidth_candidates(&coords);
            select_by_gcv(&cands, fallback, |h| data.gcv(cfg.kernel, h))
        }
    }
}

fn in_middle_half(t: f64) -> bool {
    (0.25..=0.75).contains(&t)
}

/// `σ̂² = mean over t ∈ [1/4, 3/4] of {V̂(t) - Ĉ_0(t,t)}`, with the
/// difference taken inside one local fit (see [`joint_noise`]) on the
/// surface GCV bandwidth. Floored at `1e-8 ×` the sample variance of the
/// subject's observations.
pub fn estimate_noise_variance(curves: &[Curve], mean: &[f64], grid: &TimeGrid, cfg: &SmoothingConfig) -> Result<f64> {
    let off = Scatter2::from_points(cross_products(curves, mean, grid, 0));
    if off.is_empty() {
        return Err(Error::InsufficientData("noise variance needs curves with two or more observations".into()));
    }
    let diag = Scatter1::from_points(curves.iter().flat_map(|c| {
        c.times.iter().zip(&c.values).map(|(&t, &y)| {
            let r = y - grid.interpolate(mean, t);
            (t, r * r)
        })
    }));
    let h = bandwidth_2d(&off, cfg);
    let profile: Vec<f64> = grid
        .points()
        .iter()
        .filter(|&&t| in_middle_half(t))
        .filter_map(|&t| {
            let mut hh = h;
            for _ in 0..MAX_WIDENINGS {
                if let Some(v) = joint_noise(&off, &diag, cfg.kernel, t, hh) {
                    return Some(v);
                }
                hh *= WIDEN_FACTOR;
            }
            None
        })
        .collect();
    if profile.is_empty() {
        return Err(Error::InsufficientData("too few observations in the middle of [0, 1] for the noise variance".into()));
    }
    Ok(floored_mean(&profile, noise_floor(curves)))
}

fn floored_mean(profile: &[f64], floor: f64) -> f64 {
    let est = profile.iter().sum::<f64>() / profile.len() as f64;
    if est.is_finite() {
        est.max(floor)
    } else {
        floor
    }
}

/// Smallest reported noise variance, as a fraction of the raw data variance.
/// A noise estimate near zero gives the score solve almost unbounded weight
/// on a few sparse points, and the resulting interpolation can blow up.
pub const NOISE_FLOOR_FRACTION: f64 = 1e-2;

fn noise_floor(curves: &[Curve]) -> f64 {
    let vals: Vec<f64> = curves.iter().flat_map(|c| c.values.iter().copied()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n.max(1.0);
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    (NOISE_FLOOR_FRACTION * var).max(1e-300)
}

pub fn estimate_noise_variances(
    obs: &ObservationSet,
    means: &MeanFunctions,
    grid: &TimeGrid,
    cfg: &SmoothingConfig,
) -> Result<NoiseVariances> {
    let values = (0..obs.p())
        .into_par_iter()
        .map(|i| {
            estimate_noise_variance(obs.subject_curves(i), means.subject(i), grid, cfg).map_err(|e| match e {
                Error::InsufficientData(m) => Error::InsufficientData(format!("subject {}: {m}", i + 1)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseVariances { values })
}
