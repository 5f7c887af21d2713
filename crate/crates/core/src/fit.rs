//! End-to-end estimation: smoothing, spectral densities, filters, scores.

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{validate_observations, ObservationSet};
use crate::error::{Error, Result};
use crate::filters::{estimate_filter_bank, FilterSet};
use crate::grid::{FrequencyGrid, TimeGrid};
use crate::scores::{build_design, build_whittle_precision, map_scores_with, SolverConfig};
use crate::smoothing::{estimate_autocov_fields, estimate_means, estimate_noise_variances, NoiseVariances, SmoothingConfig};
use crate::spectral::{
    bartlett_spectral, eigendecompose_per_frequency, marginal_spectral, score_spectral_density,
    score_spectral_density_individual, select_h_max, select_k_from_integrals, EigenSystem, FieldScope,
};
use crate::tasks::{FitMetadata, FittedModel};

/// Which spectral density drives the eigenfunctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Marginal spectral density shared by all subjects.
    SpectralMpca,
    /// Each subject's own spectral density and filters.
    IndividualSpectral,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SpectralMpca => "spectral_mpca",
            Method::IndividualSpectral => "individual_spectral",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral_mpca" => Ok(Method::SpectralMpca),
            "individual_spectral" => Ok(Method::IndividualSpectral),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected spectral_mpca or individual_spectral)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Time grid size `M_t`.
    pub m_t: usize,
    /// Uniform frequency grid size `M_ω`, before the Whittle frequencies are merged in.
    pub m_omega: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { m_t: 51, m_omega: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Pinned number of components; selected from the eigenvalue ratios when absent.
    pub k: Option<usize>,
    pub k_max: usize,
    pub l_max: usize,
    /// Filter-norm tolerance of the `L_k` rule.
    pub epsilon: f64,
    /// Pinned Bartlett window length; `⌊(J N̄)^{1/4}⌋` when absent.
    pub h_max: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k: None, k_max: 5, l_max: 5, epsilon: 0.1, h_max: None }
    }
}

/// Estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub grid: GridConfig,
    pub smoothing: SmoothingConfig,
    pub selection: SelectionConfig,
    pub solver: SolverConfig,
    /// VAR order cap for forecasting; `min(5, ⌊T/(3p)⌋)` when absent.
    pub var_max_order: Option<usize>,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.grid.m_t < 3 {
            return bad("grid.m_t", "must be at least 3");
        }
        if self.grid.m_omega < 2 {
            return bad("grid.m_omega", "must be at least 2");
        }
        let s = &self.selection;
        if s.k_max == 0 {
            return bad("selection.k_max", "must be positive");
        }
        if s.k == Some(0) {
            return bad("selection.k", "must be positive");
        }
        if s.k.is_some_and(|k| k > s.k_max) {
            return bad("selection.k", "exceeds selection.k_max");
        }
        if s.k.is_none() && s.k_max < 2 {
            return bad("selection.k_max", "automatic K selection needs k_max >= 2");
        }
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            return bad("selection.epsilon", "must lie in (0, 1)");
        }
        if s.h_max == Some(0) {
            return bad("selection.h_max", "must be positive");
        }
        if !(self.solver.tolerance > 0.0) {
            return bad("solver.tolerance", "must be positive");
        }
        if self.var_max_order == Some(0) {
            return bad("var_max_order", "must be positive");
        }
        if let crate::smoothing::Bandwidth::Fixed(h) = self.smoothing.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return bad("smoothing.bandwidth", "must be positive");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_panel(obs: &ObservationSet) -> Result<()> {
    let report = validate_observations(obs);
    if let Some(issue) = report.errors().next() {
        return Err(Error::Validation(format!("{issue:?} (subject and curve are zero-based)")));
    }
    if obs.j() < 3 {
        return Err(Error::InsufficientData(format!("at least 3 curves per subject are needed, got {}", obs.j())));
    }
    for i in 0..obs.p() {
        if obs.subject_curves(i).iter().all(|c| c.is_empty()) {
            return Err(Error::InsufficientData(format!("subject {} has no observations", i + 1)));
        }
    }
    Ok(())
}

/// Runs the full estimation pipeline.
pub fn fit(obs: &ObservationSet, cfg: &FitConfig, method: Method) -> Result<FittedModel> {
    cfg.validate()?;
    check_panel(obs)?;
    let (p, j) = (obs.p(), obs.j());
    let sel = &cfg.selection;
    let tgrid = TimeGrid::uniform(cfg.grid.m_t)?;
    let fgrid = FrequencyGrid::with_whittle(cfg.grid.m_omega, j)?;

    let means = estimate_means(obs, &tgrid, &cfg.smoothing)?;
    let h_max = match sel.h_max {
        Some(h) if h >= j => {
            return Err(Error::Config(format!("selection.h_max = {h} must be below J = {j}")));
        }
        Some(h) => h,
        None => select_h_max(j, obs.mean_count()),
    };
    let fields = estimate_autocov_fields(obs, &means, h_max - 1, &tgrid, &cfg.smoothing)?;
    let noise = match obs.noise_variances() {
        Some(v) => NoiseVariances { values: v.to_vec() },
        None => estimate_noise_variances(obs, &means, &tgrid, &cfg.smoothing)?,
    };
    let subject_fields = fields
        .par_iter()
        .enumerate()
        .map(|(i, f)| bartlett_spectral(f, h_max, &tgrid, &fgrid, FieldScope::Subject(i)))
        .collect::<Result<Vec<_>>>()?;

    let (filters, eta, integrals, filter_norms) = match method {
        Method::SpectralMpca => {
            let marginal = marginal_spectral(&subject_fields)?;
            let eig = eigendecompose_per_frequency(&marginal, sel.k_max)?;
            let integrals = eig.integrated_eigenvalues();
            let k = match sel.k {
                Some(k) => k,
                None => select_k_from_integrals(&integrals[..sel.k_max])?,
            };
            let est = estimate_filter_bank(&eig, k, sel.l_max, sel.epsilon)?;
            let bank = est.bank();
            let norms = (0..k).map(|kk| bank.norms_sq(kk).iter().sum()).collect();
            let eta = score_spectral_density(&est.aligned, &subject_fields, k)?;
            (FilterSet::Shared(bank), eta, integrals, norms)
        }
        Method::IndividualSpectral => {
            let eigs = subject_fields
                .par_iter()
                .map(|f| eigendecompose_per_frequency(f, sel.k_max))
                .collect::<Result<Vec<EigenSystem>>>()?;
            let mut integrals = vec![0.0; sel.k_max];
            for e in &eigs {
                for (acc, v) in integrals.iter_mut().zip(e.integrated_eigenvalues()) {
                    *acc += v / p as f64;
                }
            }
            let k = match sel.k {
                Some(k) => k,
                None => select_k_from_integrals(&integrals)?,
            };
            let ests = eigs
                .iter()
                .map(|e| estimate_filter_bank(e, k, sel.l_max, sel.epsilon))
                .collect::<Result<Vec<_>>>()?;
            let lags: Vec<usize> =
                (0..k).map(|kk| ests.iter().map(|e| e.selected_lags[kk]).max().unwrap_or(0)).collect();
            let banks = ests.iter().map(|e| e.full.truncated(&lags)).collect::<Result<Vec<_>>>()?;
            let norms = (0..k)
                .map(|kk| banks.iter().map(|b| b.norms_sq(kk).iter().sum::<f64>()).sum::<f64>() / p as f64)
                .collect();
            let aligned: Vec<EigenSystem> = ests.into_iter().map(|e| e.aligned).collect();
            let eta = score_spectral_density_individual(&aligned, &subject_fields, k)?;
            (FilterSet::PerSubject(banks), eta, integrals, norms)
        }
    };

    let (a, y, w) = build_design(obs, &filters, &means, &noise.values)?;
    let q = build_whittle_precision(&eta, j, filters.lags())?;
    let (scores, solve) = map_scores_with(&a, &y, &w, &q, &cfg.solver)?;
    log::info!(
        "{}: K = {}, L = {:?}, h_max = {h_max}, {} CG iterations",
        method.name(),
        filters.k(),
        filters.lags(),
        solve.iterations
    );
    let meta = FitMetadata {
        p,
        j,
        k: filters.k(),
        lags: filters.lags().to_vec(),
        h_max,
        m_t: cfg.grid.m_t,
        m_omega: cfg.grid.m_omega,
        config_hash: cfg.hash(),
        integrated_eigenvalues: integrals,
        filter_norms,
        solve,
    };
    Ok(FittedModel { method, config: *cfg, means, filters, noise, eta, scores, meta })
}

/// Re-solves the scores of `base` on a new panel of the same subjects,
/// keeping means, filters, noise variances and score spectra fixed.
pub fn refit_scores(base: &FittedModel, obs: &ObservationSet) -> Result<FittedModel> {
    if obs.p() != base.p() {
        return Err(Error::Dimension(format!("model has {} subjects, panel has {}", base.p(), obs.p())));
    }
    check_panel(obs)?;
    let (a, y, w) = build_design(obs, &base.filters, &base.means, &base.noise.values)?;
    let q = build_whittle_precision(&base.eta, obs.j(), base.filters.lags())?;
    let (scores, solve) = map_scores_with(&a, &y, &w, &q, &base.config.solver)?;
    let mut model = base.clone();
    model.scores = scores;
    model.meta.j = obs.j();
    model.meta.solve = solve;
    Ok(model)
}
