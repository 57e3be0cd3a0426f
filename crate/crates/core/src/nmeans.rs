//! Posterior moments for the scalar n-means Bridge model.
//!
//! Each observation `y_i = beta_i + N(0, sigma2)` carries an exponential-power
//! prior on `beta_i`, written as the scale mixture
//! `beta_i | T_i ~ N(0, nu / T_i)`, `T_i ~ PS+(alpha/2, 1/2)`. Conditionally on
//! `T = t` everything is Gaussian, so the posterior moments are ratios of
//! plain Monte Carlo averages over draws of `T`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, mismatch, Result};
use crate::mcstats::{ess_warning_threshold, normalize_log_weights, weighted_ratio_se};
use crate::regression::PosteriorSummary;
use crate::tilted_stable::{LatentDraws, StableIndex};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Knobs of the scalar model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarModelConfig {
    pub alpha: f64,
    pub nu: f64,
    pub sigma2: f64,
    /// Monte Carlo size `J`.
    pub draws: usize,
    pub seed: u64,
}

impl ScalarModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(invalid(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("nu must be positive and finite, got {}", self.nu)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(invalid(format!(
                "sigma2 must be positive and finite, got {}",
                self.sigma2
            )));
        }
        if self.draws < 2 {
            return Err(invalid("at least two Monte Carlo draws are required"));
        }
        Ok(())
    }

    pub fn stable_index(&self) -> Result<StableIndex> {
        StableIndex::bridge(self.alpha)
    }
}

/// Log density of the exponential power prior,
/// `log(alpha nu / Gamma(1/alpha)) - (2 nu |beta|)^alpha`.
pub fn ep_log_density(beta: f64, alpha: f64, nu: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(invalid(format!("alpha must lie in (0, 2), got {alpha}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid(format!("nu must be positive and finite, got {nu}")));
    }
    if !beta.is_finite() {
        return Err(invalid("beta must be finite"));
    }
    Ok((alpha * nu).ln() - ln_gamma(1.0 / alpha) - (2.0 * nu * beta.abs()).powf(alpha))
}

/// Monte Carlo standard errors of the three scalar estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMcSe {
    pub marginal: f64,
    pub mean: f64,
    pub second_moment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarPosterior {
    /// `J^-1 sum_j p(y | T_j)`.
    pub marginal_hat: f64,
    pub log_marginal_hat: f64,
    pub mean_hat: f64,
    pub second_moment_hat: f64,
    /// `second_moment_hat - mean_hat^2`, accumulated directly so it is never negative.
    pub variance_hat: f64,
    pub mc_se: ScalarMcSe,
    pub ess: f64,
}

/// Posterior moments of `beta` given `y` and one latent scale `t`.
#[inline]
pub(crate) fn conditional_moments(y: f64, nu: f64, sigma2: f64, t: f64) -> (f64, f64, f64) {
    let marginal_var = sigma2 + nu / t;
    let log_p = -0.5 * (LN_2PI + marginal_var.ln() + y * y / marginal_var);
    let denom = sigma2 * t + nu;
    (log_p, nu * y / denom, sigma2 * nu / denom)
}

/// Scalar fit on an explicit slice of latent draws.
///
/// `noise_var` is the observation variance of `y`; the orthogonal model calls
/// this with `sigma2 / d_i^2`.
pub fn scalar_fit_latent(y: f64, nu: f64, noise_var: f64, latent: &[f64]) -> Result<ScalarPosterior> {
    if !y.is_finite() {
        return Err(invalid("observation must be finite"));
    }
    if latent.len() < 2 {
        return Err(invalid("at least two Monte Carlo draws are required"));
    }
    let j = latent.len();
    let mut log_p = Vec::with_capacity(j);
    let mut means = Vec::with_capacity(j);
    let mut vars = Vec::with_capacity(j);
    for &t in latent {
        let (lp, m, v) = conditional_moments(y, nu, noise_var, t);
        log_p.push(lp);
        means.push(m);
        vars.push(v);
    }
    let w = normalize_log_weights(&log_p)
        .ok_or_else(|| crate::BridgeError::Numerical("all conditional likelihoods vanished".into()))?;
    let mean_hat: f64 = w.weights.iter().zip(&means).map(|(w, m)| w * m).sum();
    let variance_hat: f64 = w
        .weights
        .iter()
        .zip(means.iter().zip(&vars))
        .map(|(w, (m, v))| w * (v + (m - mean_hat) * (m - mean_hat)))
        .sum();
    let second_moment_hat = variance_hat + mean_hat * mean_hat;

    let log_marginal_hat = w.log_sum - (j as f64).ln();
    let marginal_hat = log_marginal_hat.exp();
    let dens: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
    let dens_var = dens
        .iter()
        .map(|d| (d - marginal_hat) * (d - marginal_hat))
        .sum::<f64>()
        / (j as f64 - 1.0);
    let seconds: Vec<f64> = means.iter().zip(&vars).map(|(m, v)| v + m * m).collect();
    let mc_se = ScalarMcSe {
        marginal: (dens_var / j as f64).sqrt(),
        mean: weighted_ratio_se(&w.weights, &means, mean_hat),
        second_moment: weighted_ratio_se(&w.weights, &seconds, second_moment_hat),
    };
    Ok(ScalarPosterior {
        marginal_hat,
        log_marginal_hat,
        mean_hat,
        second_moment_hat,
        variance_hat,
        mc_se,
        ess: w.ess,
    })
}

fn check_draws(cfg: &ScalarModelConfig, draws: &LatentDraws, column: usize) -> Result<()> {
    cfg.validate()?;
    let expected = cfg.stable_index()?;
    if draws.index() != expected {
        return Err(mismatch(format!(
            "draws were generated for PS+({}, {}) but alpha = {} needs PS+({}, {})",
            draws.index().gamma(),
            draws.index().delta(),
            cfg.alpha,
            expected.gamma(),
            expected.delta()
        )));
    }
    if column >= draws.cols() {
        return Err(mismatch(format!(
            "draw column {column} requested but only {} available",
            draws.cols()
        )));
    }
    Ok(())
}

/// Posterior moments of `beta_i` given `y_i`, using column `column` of `draws`.
pub fn scalar_fit(y: f64, cfg: &ScalarModelConfig, draws: &LatentDraws, column: usize) -> Result<ScalarPosterior> {
    check_draws(cfg, draws, column)?;
    let latent: Vec<f64> = draws.column(column).collect();
    scalar_fit_latent(y, cfg.nu, cfg.sigma2, &latent)
}

/// Coordinatewise n-means fit of `y` (design `X = I`, `Sigma = sigma2 I`),
/// coordinate `i` using column `i` of `draws`.
///
/// The posterior factorises over coordinates, so `weights` is left empty and the
/// fitted covariance is diagonal.
pub fn nmeans_posterior_summary(
    y: &DVector<f64>,
    cfg: &ScalarModelConfig,
    draws: &LatentDraws,
) -> Result<PosteriorSummary> {
    let n = y.len();
    if n == 0 {
        return Err(invalid("at least one observation is required"));
    }
    if draws.cols() != n {
        return Err(mismatch(format!(
            "draws have {} columns but y has {n} entries",
            draws.cols()
        )));
    }
    check_draws(cfg, draws, 0)?;
    let fits = (0..n)
        .into_par_iter()
        .map(|i| {
            let latent: Vec<f64> = draws.column(i).collect();
            scalar_fit_latent(y[i], cfg.nu, cfg.sigma2, &latent)
        })
        .collect::<Result<Vec<_>>>()?;
    let means = DVector::from_iterator(n, fits.iter().map(|f| f.mean_hat));
    let vars = DVector::from_iterator(n, fits.iter().map(|f| f.variance_hat));
    let ess = fits.iter().map(|f| f.ess).fold(f64::INFINITY, f64::min);
    let mut second = &means * means.transpose();
    for i in 0..n {
        second[(i, i)] += vars[i];
    }
    Ok(PosteriorSummary {
        nu: cfg.nu,
        weights: Vec::new(),
        fitted_mean: means.clone(),
        beta_mean: means,
        fitted_cov: Some(DMatrix::from_diagonal(&vars)),
        fitted_cov_trace: vars.sum(),
        beta_second_moment: Some(second),
        log_marginal_hat: fits.iter().map(|f| f.log_marginal_hat).sum(),
        ess,
        low_ess: ess < ess_warning_threshold(draws.rows()),
        noise_sigma2: Some(cfg.sigma2),
    })
}

/// Lower-bound constant and Monte Carlo variance bounds for the scalar estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarDiagnostics {
    /// `(2 pi sigma2)^-1/2 E[(t / (t + nu/sigma2))^1/2]`, estimated on the draws.
    pub c_sigma_nu: f64,
    /// Bounds on the variance of marginal, mean and second-moment estimators.
    pub var_bounds: [f64; 3],
    /// Natural logarithms of `var_bounds`; finite even when the bounds overflow.
    pub log_var_bounds: [f64; 3],
}

pub fn scalar_diagnostics(
    y: f64,
    cfg: &ScalarModelConfig,
    draws: &LatentDraws,
    column: usize,
) -> Result<ScalarDiagnostics> {
    check_draws(cfg, draws, column)?;
    let fit = scalar_fit(y, cfg, draws, column)?;
    let ratio = cfg.nu / cfg.sigma2;
    let n = draws.rows() as f64;
    let mean_root: f64 = draws.column(column).map(|t| (t / (t + ratio)).sqrt()).sum::<f64>() / n;
    let c = mean_root / (2.0 * PI * cfg.sigma2).sqrt();

    let log_base = -(n.ln() + (2.0 * PI * cfg.sigma2).ln());
    let log_tail = y * y / cfg.sigma2 - 2.0 * c.ln();
    let mean_factor = y.abs() + fit.mean_hat.abs();
    let second_factor = cfg.sigma2 + y * y + fit.second_moment_hat;
    let log_var_bounds = [
        log_base,
        log_base + log_tail + 2.0 * mean_factor.ln(),
        log_base + log_tail + 2.0 * second_factor.ln(),
    ];
    Ok(ScalarDiagnostics {
        c_sigma_nu: c,
        var_bounds: log_var_bounds.map(f64::exp),
        log_var_bounds,
    })
}
