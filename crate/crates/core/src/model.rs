//! End-to-end fitting: draw the latent scales once, tune `nu` by SURE (unless
//! fixed), and report the posterior mean of `beta` at the chosen `nu`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardization};
use crate::error::{invalid, mismatch, BridgeError, Result};
use crate::orthogonal::{svd_reduce, OrthogonalEngine};
use crate::regression::{posterior_summary_with, ModelConfig, NoiseModel, RegressionEngine, SummaryOptions};
use crate::sure::{sure_profile, sure_value, NuGrid, SurePath};
use crate::tilted_stable::{LatentDraws, StableIndex};

/// Monte Carlo size used when none is given.
pub const DEFAULT_DRAWS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// SVD-reduced model with a prior on `gamma = V^T beta`; needs `Sigma = sigma2 I`.
    Orthogonal,
    /// Full-design model with a prior on `beta`.
    Regression,
}

impl std::str::FromStr for Method {
    type Err = BridgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Method::Orthogonal),
            "regression" => Ok(Method::Regression),
            other => Err(invalid(format!("unknown method '{other}' (orthogonal, regression)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub alpha: f64,
    pub noise: NoiseModel,
    pub draws: usize,
    pub seed: u64,
    /// Defaults to orthogonal for scalar noise and regression otherwise.
    pub method: Option<Method>,
    /// Fixed prior scale; tuned by SURE when absent.
    pub nu: Option<f64>,
    pub grid: NuGrid,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            noise: NoiseModel::Scalar(1.0),
            draws: DEFAULT_DRAWS,
            seed: 0,
            method: None,
            nu: None,
            grid: NuGrid::default(),
        }
    }
}

impl FitConfig {
    pub fn resolved_method(&self) -> Method {
        self.method.unwrap_or(match self.noise {
            NoiseModel::Scalar(_) => Method::Orthogonal,
            NoiseModel::Full(_) => Method::Regression,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub method: Method,
    pub alpha: f64,
    pub nu: f64,
    pub noise_sigma2: Option<f64>,
    pub draws: usize,
    pub seed: u64,
    /// Posterior mean of `beta` in the units of the fitted design.
    pub beta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub fitted_cov_trace: f64,
    /// SURE at `nu`; absent for non-scalar noise.
    pub sure: Option<f64>,
    pub ess: f64,
    pub low_ess: bool,
    pub sure_path: Option<SurePath>,
    /// Present when the model was fitted on standardised data.
    pub standardization: Option<Standardization>,
    pub column_names: Vec<String>,
}

impl FittedModel {
    /// `X beta` for a design in the units the model was fitted in.
    pub fn predict_fitted_units(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if x.ncols() != self.beta.len() {
            return Err(mismatch(format!(
                "design has {} columns, the model has {}",
                x.ncols(),
                self.beta.len()
            )));
        }
        Ok(x * DVector::from_column_slice(&self.beta))
    }

    /// Predictions for an original-unit design, undoing any standardisation.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        match &self.standardization {
            Some(s) => Ok(s.invert_y(&self.predict_fitted_units(&s.apply_x(x)?)?)),
            None => self.predict_fitted_units(x),
        }
    }
}

fn tuned_or_fixed(nu: Option<f64>, path: impl FnOnce() -> Result<SurePath>) -> Result<(f64, Option<SurePath>)> {
    match nu {
        Some(nu) => {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(invalid(format!("nu must be positive and finite, got {nu}")));
            }
            Ok((nu, None))
        }
        None => {
            let p = path()?;
            Ok((p.nu_star, Some(p)))
        }
    }
}

/// Fits `y` on `x` under `cfg`.
pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &FitConfig) -> Result<FittedModel> {
    let index = StableIndex::bridge(cfg.alpha)?;
    cfg.noise.validate(x.nrows())?;
    if cfg.draws < 2 {
        return Err(invalid("at least two Monte Carlo draws are required"));
    }
    let method = cfg.resolved_method();
    match method {
        Method::Orthogonal => {
            let sigma2 = cfg
                .noise
                .scalar_variance()
                .ok_or_else(|| BridgeError::Unsupported("the orthogonal method needs Sigma = sigma2 I".into()))?;
            let basis = svd_reduce(x, y)?;
            let draws = LatentDraws::generate(index, cfg.draws, basis.rank(), cfg.seed)?;
            let engine = OrthogonalEngine::new(basis.clone(), cfg.alpha, sigma2, &draws)?;
            let (nu, path) = tuned_or_fixed(cfg.nu, || sure_profile(&engine, &cfg.grid))?;
            let fit = engine.fit(nu)?;
            let summary = fit.to_summary(&basis, cfg.draws);
            let sure = sure_value(y, &summary, sigma2)?;
            Ok(FittedModel {
                method,
                alpha: cfg.alpha,
                nu,
                noise_sigma2: Some(sigma2),
                draws: cfg.draws,
                seed: cfg.seed,
                beta: summary.beta_mean.as_slice().to_vec(),
                fitted: summary.fitted_mean.as_slice().to_vec(),
                fitted_cov_trace: summary.fitted_cov_trace,
                sure: Some(sure),
                ess: summary.ess,
                low_ess: summary.low_ess,
                sure_path: path,
                standardization: None,
                column_names: Vec::new(),
            })
        }
        Method::Regression => {
            let draws = LatentDraws::generate(index, cfg.draws, x.ncols(), cfg.seed)?;
            let (nu, path) = tuned_or_fixed(cfg.nu, || {
                let engine = RegressionEngine::new(x, y, &cfg.noise, cfg.alpha, &draws)?;
                sure_profile(&engine, &cfg.grid)
            })?;
            let model_cfg = ModelConfig {
                alpha: cfg.alpha,
                nu,
                noise: cfg.noise.clone(),
                draws: cfg.draws,
                seed: cfg.seed,
            };
            let summary = posterior_summary_with(x, y, &model_cfg, &draws, SummaryOptions::default())?;
            let sure = match cfg.noise.scalar_variance() {
                Some(s2) => Some(sure_value(y, &summary, s2)?),
                None => None,
            };
            Ok(FittedModel {
                method,
                alpha: cfg.alpha,
                nu,
                noise_sigma2: cfg.noise.scalar_variance(),
                draws: cfg.draws,
                seed: cfg.seed,
                beta: summary.beta_mean.as_slice().to_vec(),
                fitted: summary.fitted_mean.as_slice().to_vec(),
                fitted_cov_trace: summary.fitted_cov_trace,
                sure,
                ess: summary.ess,
                low_ess: summary.low_ess,
                sure_path: path,
                standardization: None,
                column_names: Vec::new(),
            })
        }
    }
}

/// Fits a dataset, recording its transform so predictions come back in original units.
pub fn fit_dataset(ds: &Dataset, cfg: &FitConfig) -> Result<FittedModel> {
    let mut model = fit(&ds.x, &ds.y, cfg)?;
    model.column_names = ds.column_names.clone();
    if ds.standardized {
        model.standardization = Some(ds.transform());
    }
    Ok(model)
}
