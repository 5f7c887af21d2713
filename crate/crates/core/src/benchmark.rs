//! Monte Carlo benchmark over simulation scenarios and methods.
//!
//! Every `(scenario, rep)` pair draws one panel from a sub-seed that depends
//! only on the base seed and `rep`, so methods and sampling densities are
//! compared on the same latent curves.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, Method};
use crate::simgen::{gen_panel, Case, NRange, SimConfig};
use crate::tasks::{impute, nmse, nmspe, Refit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub case: Case,
    #[serde(rename = "J")]
    pub j: usize,
    pub nrange: NRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Nmse,
    Nmspe,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::Nmspe => "nmspe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    /// Forecast steps of the one-step NMSPE protocol.
    pub horizon: usize,
    pub refit: Refit,
    /// Generator settings other than case, J, N-range and seed.
    pub sim: SimConfig,
    pub fit: FitConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario { case: Case::Gaussian, j: 60, nrange: NRange::MEDIUM }],
            methods: vec![Method::SpectralMpca, Method::IndividualSpectral],
            reps: 20,
            seed: 1,
            metrics: vec![Metric::Nmse],
            horizon: 5,
            refit: Refit::Full,
            sim: SimConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.scenarios.is_empty() {
            return bad("scenarios", "at least one scenario is required");
        }
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required");
        }
        if self.metrics.is_empty() {
            return bad("metrics", "at least one metric is required");
        }
        if self.reps == 0 {
            return bad("reps", "must be positive");
        }
        if self.metrics.contains(&Metric::Nmspe) && self.horizon == 0 {
            return bad("horizon", "must be positive");
        }
        for s in &self.scenarios {
            if s.j < 3 {
                return bad("scenarios.J", "must be at least 3");
            }
            self.sim_config(s, 0).validate()?;
        }
        self.fit.validate()
    }

    fn sim_config(&self, s: &Scenario, seed: u64) -> SimConfig {
        let extra = if self.metrics.contains(&Metric::Nmspe) { self.horizon } else { 0 };
        SimConfig { case: s.case, j: s.j + extra, nrange: s.nrange, seed, ..self.sim.clone() }
    }
}

/// Panel seed of replicate `rep`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub case: Case,
    #[serde(rename = "J")]
    pub j: usize,
    pub nrange: NRange,
    pub method: Method,
    pub rep: usize,
    pub metric: Metric,
    /// NaN when the replicate failed.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub scenario: Scenario,
    pub method: Method,
    pub rep: usize,
    pub metric: Metric,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub case: Case,
    #[serde(rename = "J")]
    pub j: usize,
    pub nrange: NRange,
    pub method: Method,
    pub metric: Metric,
    pub n: usize,
    pub failed: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub median: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResults {
    pub records: Vec<Record>,
    pub failures: Vec<Failure>,
}

impl BenchmarkResults {
    /// Successful values of one cell, ordered by replicate.
    pub fn values(&self, scenario: &Scenario, method: Method, metric: Metric) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| {
                r.case == scenario.case
                    && r.j == scenario.j
                    && r.nrange == scenario.nrange
                    && r.method == method
                    && r.metric == metric
                    && r.value.is_finite()
            })
            .map(|r| (r.rep, r.value))
            .collect()
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(Scenario, Method, Metric)> = Vec::new();
        for r in &self.records {
            let key = (Scenario { case: r.case, j: r.j, nrange: r.nrange }, r.method, r.metric);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(s, method, metric)| {
                let mut v: Vec<f64> = self.values(&s, method, metric).into_iter().map(|(_, x)| x).collect();
                let failed = self
                    .records
                    .iter()
                    .filter(|r| {
                        r.case == s.case && r.j == s.j && r.nrange == s.nrange && r.method == method && r.metric == metric
                    })
                    .count()
                    - v.len();
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let sd = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    f64::NAN
                };
                v.sort_by(f64::total_cmp);
                let median = match n {
                    0 => f64::NAN,
                    _ if n % 2 == 1 => v[n / 2],
                    _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
                };
                SummaryRow {
                    case: s.case,
                    j: s.j,
                    nrange: s.nrange,
                    method,
                    metric,
                    n,
                    failed,
                    mean,
                    sd,
                    se: sd / (n as f64).sqrt(),
                    median,
                }
            })
            .collect()
    }

    /// Long format `case,J,nrange,method,rep,metric,value`.
    pub fn write_records<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in self.summary() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn evaluate(cfg: &BenchmarkConfig, s: &Scenario, rep: usize) -> Vec<(Method, Metric, Result<f64>)> {
    let mut out = Vec::new();
    let panel = match gen_panel(&cfg.sim_config(s, rep_seed(cfg.seed, rep))) {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            for &m in &cfg.methods {
                for &metric in &cfg.metrics {
                    out.push((m, metric, Err(Error::Generation(msg.clone()))));
                }
            }
            return out;
        }
    };
    for &method in &cfg.methods {
        for &metric in &cfg.metrics {
            let value = match metric {
                Metric::Nmse => panel.observations.truncate_curves(s.j).and_then(|obs| {
                    let model = fit(&obs, &cfg.fit, method)?;
                    nmse(&panel.latent.slice_curves(0, s.j)?, &impute(&model))
                }),
                Metric::Nmspe => nmspe(&panel.observations, &panel.latent, s.j, cfg.horizon, method, &cfg.fit, cfg.refit),
            };
            out.push((method, metric, value));
        }
    }
    out
}

/// Runs every scenario, replicate, method and metric. Replicates run in
/// parallel on the current rayon pool; failed cells are recorded, not fatal.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResults> {
    cfg.validate()?;
    let jobs: Vec<(Scenario, usize)> =
        cfg.scenarios.iter().flat_map(|&s| (0..cfg.reps).map(move |rep| (s, rep))).collect();
    let outcomes: Vec<_> = jobs.par_iter().map(|(s, rep)| (*s, *rep, evaluate(cfg, s, *rep))).collect();
    let mut results = BenchmarkResults::default();
    for (s, rep, cells) in outcomes {
        for (method, metric, value) in cells {
            let value = match value {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("{s:?} rep {rep} {} {}: {e}", method.name(), metric.name());
                    results.failures.push(Failure { scenario: s, method, rep, metric, message: e.to_string() });
                    f64::NAN
                }
            };
            results.records.push(Record { case: s.case, j: s.j, nrange: s.nrange, method, rep, metric, value });
        }
    }
    Ok(results)
}
