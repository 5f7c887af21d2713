//! Spectral marginal principal component analysis for panels of sparsely
//! observed multivariate functional time series.

pub mod artifact;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod filters;
pub mod fit;
pub mod grid;
pub mod kernel;
pub mod scores;
pub mod simgen;
pub mod smoothing;
pub mod spectral;
pub mod tasks;

pub use artifact::{load_model, save_model};
pub use data::{validate_observations, Curve, Issue, ObservationSet, ValidationReport};
pub use error::{Error, ErrorKind, Result};
pub use grid::{build_uniform_grids, trapezoid_inner_product, FrequencyGrid, TimeGrid};
pub use kernel::ComplexKernel;
pub use fit::{fit, refit_scores, FitConfig, Method};
pub use tasks::{forecast, impute, nmse, nmse_matched, nmspe, CurveArray, FittedModel, Refit};
pub use simgen::{gen_panel, Case, NRange, SimConfig, TruthPanel};
