//! SVD-reduced model: `X = U D V^T`, `Z = U D`, `beta = V gamma`, and
//! `gamma_hat = D^-1 U^T y ~ N(gamma, sigma2 D^-2)`, each coordinate an
//! independent scalar Bridge problem.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, BridgeError, Result};
use crate::mcstats::ess_warning_threshold;
use crate::nmeans::{scalar_fit_latent, ScalarModelConfig, ScalarPosterior};
use crate::regression::PosteriorSummary;
use crate::tilted_stable::LatentDraws;

/// Thin SVD of the design restricted to its numerical rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdBasis {
    pub u: DMatrix<f64>,
    pub d: DVector<f64>,
    pub v: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub gamma_hat: DVector<f64>,
    pub y: DVector<f64>,
}

impl SvdBasis {
    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    /// Same basis with a new response.
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(mismatch(format!(
                "y has {} entries, basis expects {}",
                y.len(),
                self.n()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(BridgeError::Data("y contains non-finite values".into()));
        }
        let ut_y = self.u.tr_mul(y);
        Ok(Self {
            gamma_hat: ut_y.component_div(&self.d),
            y: y.clone(),
            ..self.clone()
        })
    }
}

/// Thin SVD of `x`, dropping singular values below `max(n, p) eps d_1`.
/// Each singular pair is signed so that the largest-magnitude entry of `v` is positive.
pub fn svd_reduce(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<SvdBasis> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(mismatch(format!("X has {n} rows but y has {} entries", y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(BridgeError::Data("X and y must be finite".into()));
    }
    if n == 0 || p == 0 || x.iter().all(|v| *v == 0.0) {
        return Err(invalid("the design has rank zero"));
    }
    let svd = x
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| BridgeError::Numerical("SVD did not converge".into()))?;
    let u_full = svd.u.expect("requested");
    let vt_full = svd.v_t.expect("requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let d1 = sv[order[0]];
    let cutoff = n.max(p) as f64 * f64::EPSILON * d1;
    let kept: Vec<usize> = order.into_iter().filter(|&k| sv[k] > cutoff).collect();
    let r = kept.len();
    let mut u = DMatrix::zeros(n, r);
    let mut v = DMatrix::zeros(p, r);
    let mut d = DVector::zeros(r);
    for (c, &k) in kept.iter().enumerate() {
        let vk = vt_full.row(k).transpose();
        let lead = vk
            .iter()
            .copied()
            .fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        v.set_column(c, &(vk * sign));
        u.set_column(c, &(u_full.column(k) * sign));
        d[c] = sv[k];
    }
    let mut z = u.clone();
    for (c, mut col) in z.column_iter_mut().enumerate() {
        col *= d[c];
    }
    let gamma_hat = u.tr_mul(y).component_div(&d);
    Ok(SvdBasis {
        u,
        d,
        v,
        z,
        gamma_hat,
        y: y.clone(),
    })
}

fn check_draws(basis: &SvdBasis, cfg: &ScalarModelConfig, draws: &LatentDraws) -> Result<()> {
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
    if draws.cols() < basis.rank() {
        return Err(mismatch(format!(
            "rank {} needs at least as many draw columns, got {}",
            basis.rank(),
            draws.cols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalFit {
    pub nu: f64,
    pub sigma2: f64,
    /// Posterior of `gamma_i` given `gamma_hat_i`, noise variance `sigma2 / d_i^2`.
    pub coords: Vec<ScalarPosterior>,
    pub gamma_mean: DVector<f64>,
    pub gamma_var: DVector<f64>,
    /// `V E[gamma | gamma_hat]`.
    pub beta_mean: DVector<f64>,
    /// `Z E[gamma | gamma_hat]`.
    pub fitted_mean: DVector<f64>,
    /// `sum_i d_i^2 Var(gamma_i | gamma_hat)`.
    pub fitted_cov_trace: f64,
}

fn fit_coords(basis: &SvdBasis, nu: f64, sigma2: f64, latent: &[Vec<f64>]) -> Result<Vec<ScalarPosterior>> {
    (0..basis.rank())
        .into_par_iter()
        .map(|i| {
            let noise = sigma2 / (basis.d[i] * basis.d[i]);
            scalar_fit_latent(basis.gamma_hat[i], nu, noise, &latent[i])
        })
        .collect()
}

fn assemble(basis: &SvdBasis, nu: f64, sigma2: f64, coords: Vec<ScalarPosterior>) -> OrthogonalFit {
    let r = basis.rank();
    let gamma_mean = DVector::from_iterator(r, coords.iter().map(|c| c.mean_hat));
    let gamma_var = DVector::from_iterator(r, coords.iter().map(|c| c.variance_hat));
    let fitted_cov_trace = (0..r).map(|i| basis.d[i] * basis.d[i] * gamma_var[i]).sum();
    OrthogonalFit {
        nu,
        sigma2,
        beta_mean: &basis.v * &gamma_mean,
        fitted_mean: &basis.z * &gamma_mean,
        fitted_cov_trace,
        gamma_mean,
        gamma_var,
        coords,
    }
}

fn latent_columns(draws: &LatentDraws, r: usize) -> Vec<Vec<f64>> {
    (0..r).map(|i| draws.column(i).collect()).collect()
}

/// Per-coordinate posteriors of `gamma`, coordinate `i` on column `i` of `draws`.
pub fn orthogonal_fit(basis: &SvdBasis, cfg: &ScalarModelConfig, draws: &LatentDraws) -> Result<OrthogonalFit> {
    check_draws(basis, cfg, draws)?;
    let latent = latent_columns(draws, basis.rank());
    let coords = fit_coords(basis, cfg.nu, cfg.sigma2, &latent)?;
    Ok(assemble(basis, cfg.nu, cfg.sigma2, coords))
}

/// `||y - Z E[gamma]||^2 + 2 sum_i d_i^2 Var(gamma_i | gamma_hat)`.
pub fn orthogonal_sure(basis: &SvdBasis, cfg: &ScalarModelConfig, draws: &LatentDraws) -> Result<f64> {
    let fit = orthogonal_fit(basis, cfg, draws)?;
    Ok((&basis.y - &fit.fitted_mean).norm_squared() + 2.0 * fit.fitted_cov_trace)
}

impl OrthogonalFit {
    /// Summary in the common format. `log_marginal_hat` is the log density of
    /// `gamma_hat`, and `weights` is empty since each coordinate has its own.
    pub fn to_summary(&self, basis: &SvdBasis, draws: usize) -> PosteriorSummary {
        let u_scaled = {
            let mut m = basis.u.clone();
            for (c, mut col) in m.column_iter_mut().enumerate() {
                col *= basis.d[c] * self.gamma_var[c].sqrt();
            }
            m
        };
        let mut second = &self.gamma_mean * self.gamma_mean.transpose();
        for i in 0..self.gamma_var.len() {
            second[(i, i)] += self.gamma_var[i];
        }
        let ess = self.coords.iter().map(|c| c.ess).fold(f64::INFINITY, f64::min);
        PosteriorSummary {
            nu: self.nu,
            weights: Vec::new(),
            fitted_mean: self.fitted_mean.clone(),
            beta_mean: self.beta_mean.clone(),
            fitted_cov: Some(&u_scaled * u_scaled.transpose()),
            fitted_cov_trace: self.fitted_cov_trace,
            beta_second_moment: Some(&basis.v * second * basis.v.transpose()),
            log_marginal_hat: self.coords.iter().map(|c| c.log_marginal_hat).sum(),
            ess,
            low_ess: ess < ess_warning_threshold(draws),
            noise_sigma2: Some(self.sigma2),
        }
    }
}

/// Orthogonal-model SURE objective over `nu` with fixed draws.
#[derive(Debug, Clone)]
pub struct OrthogonalEngine {
    basis: SvdBasis,
    alpha: f64,
    sigma2: f64,
    latent: Vec<Vec<f64>>,
}

impl OrthogonalEngine {
    pub fn new(basis: SvdBasis, alpha: f64, sigma2: f64, draws: &LatentDraws) -> Result<Self> {
        let probe = ScalarModelConfig {
            alpha,
            nu: 1.0,
            sigma2,
            draws: draws.rows(),
            seed: 0,
        };
        check_draws(&basis, &probe, draws)?;
        let latent = latent_columns(draws, basis.rank());
        Ok(Self {
            basis,
            alpha,
            sigma2,
            latent,
        })
    }

    pub fn basis(&self) -> &SvdBasis {
        &self.basis
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn fit(&self, nu: f64) -> Result<OrthogonalFit> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(invalid(format!("nu must be positive and finite, got {nu}")));
        }
        let coords = fit_coords(&self.basis, nu, self.sigma2, &self.latent)?;
        Ok(assemble(&self.basis, nu, self.sigma2, coords))
    }
}
