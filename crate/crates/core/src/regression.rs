//! Posterior moments for Bridge regression with a full design matrix.
//!
//! Given latent scales `t`, `beta | t ~ N(0, nu Lambda_t)` with
//! `Lambda_t = diag(1/t)` and `y | t ~ N(0, nu V)`, `V = X Lambda_t X^T + Sigma/nu`.
//! Mixture moments are self-normalised Monte Carlo averages over draws of `t`.
//!
//! [`RegressionEngine`] whitens the noise once and caches, per draw, the
//! eigendecomposition of the whitened `X Lambda_t X^T`. Every later value of
//! `nu` then costs `O(n^2)` per draw instead of a fresh factorisation.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, BridgeError, Result};
use crate::mcstats::{ess_warning_threshold, normalize_log_weights};
use crate::tilted_stable::{tilted_moment_oracle, LatentDraws, StableIndex};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Draws whose normalised weight falls below this contribute nothing representable.
const NEGLIGIBLE_WEIGHT: f64 = 1e-22;

/// Upper limit, in `f64` entries, on the per-draw eigenvector cache.
const DEFAULT_CACHE_ENTRIES: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `Sigma = sigma2 * I`.
    Scalar(f64),
    /// Full symmetric positive definite `Sigma`.
    Full(DMatrix<f64>),
}

impl NoiseModel {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            NoiseModel::Scalar(s) => {
                if !(*s > 0.0 && s.is_finite()) {
                    return Err(invalid(format!("sigma2 must be positive and finite, got {s}")));
                }
            }
            NoiseModel::Full(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(mismatch(format!(
                        "noise covariance is {}x{}, expected {n}x{n}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("noise covariance has non-finite entries"));
                }
                let scale = m.amax().max(f64::MIN_POSITIVE);
                if (m - m.transpose()).amax() > 1e-12 * scale {
                    return Err(invalid("noise covariance is not symmetric"));
                }
                if m.clone().cholesky().is_none() {
                    return Err(invalid("noise covariance is not positive definite"));
                }
            }
        }
        Ok(())
    }

    pub fn scalar_variance(&self) -> Option<f64> {
        match self {
            NoiseModel::Scalar(s) => Some(*s),
            NoiseModel::Full(_) => None,
        }
    }

    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            NoiseModel::Scalar(s) => DMatrix::identity(n, n) * *s,
            NoiseModel::Full(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub alpha: f64,
    pub nu: f64,
    pub noise: NoiseModel,
    /// Monte Carlo size `J`.
    pub draws: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        StableIndex::bridge(self.alpha)?;
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("nu must be positive and finite, got {}", self.nu)));
        }
        if self.draws == 0 {
            return Err(invalid("at least one Monte Carlo draw is required"));
        }
        self.noise.validate(n)
    }

    pub fn stable_index(&self) -> Result<StableIndex> {
        StableIndex::bridge(self.alpha)
    }

    /// Fresh `J x p` latent draws for this configuration.
    pub fn generate_draws(&self, p: usize) -> Result<LatentDraws> {
        LatentDraws::generate(self.stable_index()?, self.draws, p, self.seed)
    }
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(mismatch(format!(
            "design has {} rows but response has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(invalid("no observations"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("design and response must be finite"));
    }
    Ok(())
}

fn check_draws(alpha: f64, p: usize, draws: &LatentDraws) -> Result<()> {
    let expected = StableIndex::bridge(alpha)?;
    if draws.index() != expected {
        return Err(mismatch(format!(
            "draws were generated for PS+({}, {}) but alpha = {alpha} needs PS+({}, {})",
            draws.index().gamma(),
            draws.index().delta(),
            expected.gamma(),
            expected.delta()
        )));
    }
    if draws.cols() != p {
        return Err(mismatch(format!(
            "draws have {} columns but the design has {p}",
            draws.cols()
        )));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `X diag(s)`.
fn scale_columns(x: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (mut col, &v) in out.column_iter_mut().zip(s) {
        col *= v;
    }
    out
}

/// Gaussian quantities conditional on one latent vector `t`, from a single
/// Cholesky factorisation of `nu V`.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    /// Diagonal of `Lambda_t`, i.e. `1/t`.
    pub lambda_t: DVector<f64>,
    /// `V = A + Sigma/nu`.
    pub v_mat: DMatrix<f64>,
    /// `A = X Lambda_t X^T`.
    pub a_mat: DMatrix<f64>,
    /// `log p(y | t)` for `y | t ~ N(0, nu V)`.
    pub log_cond_marginal: f64,
    pub beta_mean: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    pub fitted_mean: DVector<f64>,
    /// `Sigma V^-1 A`, symmetrised.
    pub fitted_cov: DMatrix<f64>,
}

fn check_latent(t: &[f64], p: usize) -> Result<()> {
    if t.len() != p {
        return Err(mismatch(format!("latent vector has {} entries, expected {p}", t.len())));
    }
    if t.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(invalid("latent scales must be positive and finite"));
    }
    Ok(())
}

/// One Cholesky factorisation of `nu V` for a single latent vector.
struct DrawFactor {
    lambda_t: DVector<f64>,
    x_lambda: DMatrix<f64>,
    a_mat: DMatrix<f64>,
    /// Lower Cholesky factor of `nu A + Sigma`.
    l: DMatrix<f64>,
    /// `(nu V)^-1 y`.
    solved: DVector<f64>,
    log_det: f64,
    log_p: f64,
}

fn factor_draw(x: &DMatrix<f64>, y: &DVector<f64>, sigma: &DMatrix<f64>, nu: f64, t: &[f64]) -> Result<DrawFactor> {
    let n = x.nrows();
    let lambda_t = DVector::from_iterator(t.len(), t.iter().map(|v| 1.0 / v));
    let x_lambda = scale_columns(x, lambda_t.as_slice());
    let mut a_mat = &x_lambda * x.transpose();
    symmetrize(&mut a_mat);
    let chol = (&a_mat * nu + sigma)
        .cholesky()
        .ok_or_else(|| BridgeError::Numerical("nu V is not positive definite".into()))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let solved = chol.solve(y);
    let log_p = -0.5 * (n as f64 * LN_2PI + log_det + y.dot(&solved));
    Ok(DrawFactor {
        lambda_t,
        x_lambda,
        a_mat,
        l: chol.unpack(),
        solved,
        log_det,
        log_p,
    })
}

impl DrawFactor {
    fn beta_mean(&self, nu: f64) -> DVector<f64> {
        self.x_lambda.tr_mul(&self.solved) * nu
    }

    fn fitted_mean(&self, nu: f64) -> DVector<f64> {
        &self.a_mat * &self.solved * nu
    }

    fn l_solve(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.l
            .solve_lower_triangular(m)
            .ok_or_else(|| BridgeError::Numerical("singular Cholesky factor".into()))
    }

    /// `Sigma V^-1 A = Sigma - Sigma (nu V)^-1 Sigma`.
    fn fitted_cov(&self, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let w = self.l_solve(sigma)?;
        let mut out = sigma - w.tr_mul(&w);
        symmetrize(&mut out);
        Ok(out)
    }

    fn fitted_cov_trace(&self, sigma: &DMatrix<f64>) -> Result<f64> {
        Ok(sigma.trace() - self.l_solve(sigma)?.norm_squared())
    }

    /// `nu Lambda - nu^2 Lambda X^T (nu V)^-1 X Lambda`.
    fn beta_cov(&self, nu: f64) -> Result<DMatrix<f64>> {
        let w = self.l_solve(&self.x_lambda)?;
        let mut cov = w.tr_mul(&w) * (-nu * nu);
        for (i, l) in self.lambda_t.iter().enumerate() {
            cov[(i, i)] += nu * l;
        }
        symmetrize(&mut cov);
        Ok(cov)
    }
}

pub fn conditional_posterior(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    t: &[f64],
) -> Result<ConditionalGaussian> {
    check_data(x, y)?;
    cfg.validate(x.nrows())?;
    check_latent(t, x.ncols())?;
    let nu = cfg.nu;
    let sigma = cfg.noise.matrix(x.nrows());
    let f = factor_draw(x, y, &sigma, nu, t)?;
    Ok(ConditionalGaussian {
        v_mat: &f.a_mat + &sigma / nu,
        log_cond_marginal: f.log_p,
        beta_mean: f.beta_mean(nu),
        beta_cov: f.beta_cov(nu)?,
        fitted_mean: f.fitted_mean(nu),
        fitted_cov: f.fitted_cov(&sigma)?,
        lambda_t: f.lambda_t,
        a_mat: f.a_mat,
    })
}

/// Conditional mean and covariance of `beta` from the `p x p` posterior precision
/// `Lambda_t^-1 / nu + X^T Sigma^-1 X`.
pub fn conditional_posterior_primal(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    t: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_data(x, y)?;
    cfg.validate(x.nrows())?;
    check_latent(t, x.ncols())?;
    let sigma_chol = cfg
        .noise
        .matrix(x.nrows())
        .cholesky()
        .ok_or_else(|| invalid("noise covariance is not positive definite"))?;
    let sx = sigma_chol.solve(x);
    let mut precision = x.transpose() * &sx;
    for (i, &ti) in t.iter().enumerate() {
        precision[(i, i)] += ti / cfg.nu;
    }
    symmetrize(&mut precision);
    let chol = precision
        .cholesky()
        .ok_or_else(|| BridgeError::Numerical("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&(sx.transpose() * y));
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    Ok((mean, cov))
}

#[derive(Debug, Clone)]
enum Whitening {
    Scalar { sigma: f64 },
    Full { l: DMatrix<f64> },
}

impl Whitening {
    fn new(noise: &NoiseModel) -> Result<Self> {
        Ok(match noise {
            NoiseModel::Scalar(s) => Whitening::Scalar { sigma: s.sqrt() },
            NoiseModel::Full(m) => Whitening::Full {
                l: m.clone()
                    .cholesky()
                    .ok_or_else(|| invalid("noise covariance is not positive definite"))?
                    .unpack(),
            },
        })
    }

    fn log_det(&self, n: usize) -> f64 {
        match self {
            Whitening::Scalar { sigma } => n as f64 * sigma.ln(),
            Whitening::Full { l } => l.diagonal().iter().map(|v| v.ln()).sum(),
        }
    }

    fn whiten_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Whitening::Scalar { sigma } => m / *sigma,
            Whitening::Full { l } => l.solve_lower_triangular(m).expect("positive diagonal"),
        }
    }

    fn whiten_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Whitening::Scalar { sigma } => v / *sigma,
            Whitening::Full { l } => l.solve_lower_triangular(v).expect("positive diagonal"),
        }
    }

    fn color_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Whitening::Scalar { sigma } => v * *sigma,
            Whitening::Full { l } => l * v,
        }
    }

    fn color_sym(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = match self {
            Whitening::Scalar { sigma } => m * (sigma * sigma),
            Whitening::Full { l } => l * m * l.transpose(),
        };
        symmetrize(&mut out);
        out
    }
}

/// Spectral data of one draw: `X_w Lambda_t X_w^T = Q diag(lambda) Q^T`, `z = Q^T y_w`.
#[derive(Debug, Clone)]
struct DrawSpectrum {
    eig: DVector<f64>,
    q: DMatrix<f64>,
    z: DVector<f64>,
    /// `||L q_k||^2` for a full noise covariance.
    colored_norms: Option<DVector<f64>>,
}

impl DrawSpectrum {
    /// `Q diag(f(lambda)) z`.
    fn rotate(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let scaled = DVector::from_iterator(
            self.z.len(),
            self.eig.iter().zip(self.z.iter()).map(|(&l, &z)| f(l) * z),
        );
        &self.q * scaled
    }

    /// Whitened `log p(y | t)` (without the `log det L` term) and
    /// `tr(Var(X beta | y, t))` in original units.
    fn scalars(&self, nu: f64, sigma2: Option<f64>) -> (f64, f64) {
        let mut log_det = 0.0;
        let mut quad = 0.0;
        let mut trace = 0.0;
        for k in 0..self.eig.len() {
            let l = nu * self.eig[k];
            log_det += l.ln_1p();
            quad += self.z[k] * self.z[k] / (1.0 + l);
            let g = l / (1.0 + l);
            trace += match &self.colored_norms {
                Some(c) => g * c[k],
                None => g,
            };
        }
        let n = self.eig.len() as f64;
        (-0.5 * (n * LN_2PI + log_det + quad), trace * sigma2.unwrap_or(1.0))
    }

    /// Whitened conditional fitted means, one column per value of `nu`.
    fn fitted_block(&self, nus: &[f64]) -> DMatrix<f64> {
        let g = DMatrix::from_fn(self.eig.len(), nus.len(), |k, m| {
            let l = nus[m] * self.eig[k];
            l / (1.0 + l) * self.z[k]
        });
        &self.q * g
    }
}

const CHUNK: usize = 32;

/// Reduces per-draw contributions over fixed-size chunks, so the floating-point
/// summation order does not depend on the number of threads.
fn chunked_reduce<T, I, B, M>(count: usize, init: I, body: B, merge: M) -> Result<T>
where
    T: Send,
    I: Fn() -> T + Sync,
    B: Fn(&mut T, usize) -> Result<()> + Sync,
    M: Fn(&mut T, T),
{
    let chunks: Vec<T> = (0..count.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for j in c * CHUNK..((c + 1) * CHUNK).min(count) {
                body(&mut acc, j)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = init();
    for c in chunks {
        merge(&mut total, c);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryOptions {
    /// Assemble the full `n x n` fitted covariance.
    pub fitted_cov: bool,
    /// Assemble `E[beta beta^T | y]` (costs `O(J p^2 n)`).
    pub beta_second_moment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub nu: f64,
    /// Self-normalised draw weights. Empty for coordinatewise n-means summaries,
    /// whose weights differ per coordinate.
    pub weights: Vec<f64>,
    pub fitted_mean: DVector<f64>,
    pub beta_mean: DVector<f64>,
    /// Present when requested through [`SummaryOptions`].
    pub fitted_cov: Option<DMatrix<f64>>,
    /// `tr(Var(X beta | y))`, always available.
    pub fitted_cov_trace: f64,
    pub beta_second_moment: Option<DMatrix<f64>>,
    /// `log m(y)` estimated as `log(J^-1 sum_j p(y | T_j))`.
    pub log_marginal_hat: f64,
    pub ess: f64,
    /// ESS fell below `max(10, J/100)`.
    pub low_ess: bool,
    /// `Some(sigma2)` when the summary was computed under `Sigma = sigma2 I`.
    pub noise_sigma2: Option<f64>,
}

/// Quantities needed to score one value of `nu`.
#[derive(Debug, Clone)]
pub struct NuEvaluation {
    pub nu: f64,
    pub weights: Vec<f64>,
    pub log_marginal_hat: f64,
    pub ess: f64,
    pub fitted_mean: DVector<f64>,
    /// `||y - y_tilde||^2`.
    pub residual_sq: f64,
    /// `tr(Var(X beta | y))`.
    pub fitted_cov_trace: f64,
}

struct NuWeights {
    weights: Vec<f64>,
    log_marginal_hat: f64,
    ess: f64,
    within_trace: f64,
}

fn check_nu(nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid(format!("nu must be positive and finite, got {nu}")));
    }
    Ok(())
}

/// Common-random-number posterior engine for a fixed `(X, y, Sigma, alpha)` and draw set.
#[derive(Debug)]
pub struct RegressionEngine<'a> {
    x: DMatrix<f64>,
    y: DVector<f64>,
    xw: DMatrix<f64>,
    xw_t: DMatrix<f64>,
    yw: DVector<f64>,
    whitening: Whitening,
    noise_sigma2: Option<f64>,
    log_det_l: f64,
    draws: &'a LatentDraws,
    cache: Option<Vec<DrawSpectrum>>,
    null_fit: bool,
}

impl<'a> RegressionEngine<'a> {
    pub fn new(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        noise: &NoiseModel,
        alpha: f64,
        draws: &'a LatentDraws,
    ) -> Result<Self> {
        Self::with_cache_limit(x, y, noise, alpha, draws, DEFAULT_CACHE_ENTRIES)
    }

    /// As [`RegressionEngine::new`], caching eigenvectors only when `J n^2 <= cache_limit`.
    /// Without the cache every evaluation recomputes the per-draw decompositions.
    pub fn with_cache_limit(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        noise: &NoiseModel,
        alpha: f64,
        draws: &'a LatentDraws,
        cache_limit: usize,
    ) -> Result<Self> {
        check_data(x, y)?;
        noise.validate(x.nrows())?;
        check_draws(alpha, x.ncols(), draws)?;
        let n = x.nrows();
        let whitening = Whitening::new(noise)?;
        let xw = whitening.whiten_mat(x);
        let yw = whitening.whiten_vec(y);
        let null_fit = x.ncols() == 0 || x.iter().all(|v| *v == 0.0);
        let mut engine = Self {
            x: x.clone(),
            y: y.clone(),
            xw_t: xw.transpose(),
            xw,
            yw,
            log_det_l: whitening.log_det(n),
            whitening,
            noise_sigma2: noise.scalar_variance(),
            draws,
            cache: None,
            null_fit,
        };
        if !null_fit && draws.rows().saturating_mul(n * n) <= cache_limit {
            let cache = (0..draws.rows())
                .into_par_iter()
                .map(|j| engine.compute_spectrum(j))
                .collect::<Result<Vec<_>>>()?;
            engine.cache = Some(cache);
        }
        Ok(engine)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn draws(&self) -> &LatentDraws {
        self.draws
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn response(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_sigma2(&self) -> Option<f64> {
        self.noise_sigma2
    }

    pub fn is_null_fit(&self) -> bool {
        self.null_fit
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    fn compute_spectrum(&self, j: usize) -> Result<DrawSpectrum> {
        let inv_t: Vec<f64> = self.draws.row(j).iter().map(|t| 1.0 / t).collect();
        let mut a = scale_columns(&self.xw, &inv_t) * &self.xw_t;
        symmetrize(&mut a);
        let eigen = SymmetricEigen::try_new(a, f64::EPSILON, 0)
            .ok_or_else(|| BridgeError::Numerical(format!("eigendecomposition failed for draw {j}")))?;
        let eig = eigen.eigenvalues.map(|v| v.max(0.0));
        let q = eigen.eigenvectors;
        let z = q.tr_mul(&self.yw);
        let colored_norms = match &self.whitening {
            Whitening::Scalar { .. } => None,
            Whitening::Full { l } => {
                let lq = l * &q;
                Some(DVector::from_iterator(
                    q.ncols(),
                    lq.column_iter().map(|c| c.norm_squared()),
                ))
            }
        };
        Ok(DrawSpectrum {
            eig,
            q,
            z,
            colored_norms,
        })
    }

    fn spectrum(&self, j: usize) -> Result<Cow<'_, DrawSpectrum>> {
        match &self.cache {
            Some(cache) => Ok(Cow::Borrowed(&cache[j])),
            None => self.compute_spectrum(j).map(Cow::Owned),
        }
    }

    /// `log N(y; 0, Sigma)`, the conditional marginal of every draw when `X` is null.
    fn null_log_marginal(&self) -> f64 {
        -0.5 * (self.n() as f64 * LN_2PI + self.yw.norm_squared()) - self.log_det_l
    }

    fn colored_norm_sq(&self, d: &DVector<f64>) -> f64 {
        match &self.whitening {
            Whitening::Scalar { sigma } => sigma * sigma * d.norm_squared(),
            Whitening::Full { l } => (l * d).norm_squared(),
        }
    }

    fn weights_many(&self, nus: &[f64]) -> Result<Vec<Result<NuWeights>>> {
        let m = nus.len();
        let per_draw: Vec<Vec<(f64, f64)>> = (0..self.draws.rows())
            .into_par_iter()
            .map(|j| {
                let s = self.spectrum(j)?;
                Ok(nus.iter().map(|&nu| s.scalars(nu, self.noise_sigma2)).collect())
            })
            .collect::<Result<_>>()?;
        let jn = per_draw.len() as f64;
        Ok((0..m)
            .map(|k| {
                let log_p: Vec<f64> = per_draw.iter().map(|v| v[k].0 - self.log_det_l).collect();
                let w = normalize_log_weights(&log_p).ok_or_else(|| {
                    BridgeError::Numerical(format!("all conditional likelihoods vanished at nu = {}", nus[k]))
                })?;
                let within_trace = w.weights.iter().zip(&per_draw).map(|(w, v)| w * v[k].1).sum();
                Ok(NuWeights {
                    log_marginal_hat: w.log_sum - jn.ln(),
                    ess: w.ess,
                    weights: w.weights,
                    within_trace,
                })
            })
            .collect())
    }

    /// Evaluates several values of `nu` in one sweep over the draws. Failures at
    /// individual values (all likelihoods underflowing) are reported per entry.
    pub fn evaluate_many(&self, nus: &[f64]) -> Result<Vec<Result<NuEvaluation>>> {
        Ok(self
            .evaluate_many_whitened(nus)?
            .into_iter()
            .map(|r| r.map(|(ev, _)| ev))
            .collect())
    }

    fn evaluate_many_whitened(&self, nus: &[f64]) -> Result<Vec<Result<(NuEvaluation, DVector<f64>)>>> {
        for &nu in nus {
            check_nu(nu)?;
        }
        let n = self.n();
        let jn = self.draws.rows();
        if self.null_fit {
            return Ok(nus
                .iter()
                .map(|&nu| {
                    Ok((
                        NuEvaluation {
                            nu,
                            weights: vec![1.0 / jn as f64; jn],
                            log_marginal_hat: self.null_log_marginal(),
                            ess: jn as f64,
                            fitted_mean: DVector::zeros(n),
                            residual_sq: self.y.norm_squared(),
                            fitted_cov_trace: 0.0,
                        },
                        DVector::zeros(n),
                    ))
                })
                .collect());
        }
        let mut weights = self.weights_many(nus)?;
        let active: Vec<usize> = (0..nus.len()).filter(|&k| weights[k].is_ok()).collect();
        let active_nus: Vec<f64> = active.iter().map(|&k| nus[k]).collect();
        let w_of = |a: usize, j: usize| -> f64 {
            match &weights[active[a]] {
                Ok(w) => w.weights[j],
                Err(_) => 0.0,
            }
        };
        let ma = active.len();
        let relevant = |j: usize| (0..ma).any(|a| w_of(a, j) >= NEGLIGIBLE_WEIGHT);

        let means = chunked_reduce(
            jn,
            || DMatrix::zeros(n, ma),
            |acc, j| {
                if !relevant(j) {
                    return Ok(());
                }
                let block = self.spectrum(j)?.fitted_block(&active_nus);
                for a in 0..ma {
                    let w = w_of(a, j);
                    if w >= NEGLIGIBLE_WEIGHT {
                        acc.column_mut(a).axpy(w, &block.column(a), 1.0);
                    }
                }
                Ok(())
            },
            |total, part| *total += part,
        )?;
        let spread = chunked_reduce(
            jn,
            || vec![0.0; ma],
            |acc, j| {
                if !relevant(j) {
                    return Ok(());
                }
                let block = self.spectrum(j)?.fitted_block(&active_nus);
                for a in 0..ma {
                    let w = w_of(a, j);
                    if w >= NEGLIGIBLE_WEIGHT {
                        let d = block.column(a) - means.column(a);
                        acc[a] += w * self.colored_norm_sq(&d);
                    }
                }
                Ok(())
            },
            |total, part| {
                for (t, p) in total.iter_mut().zip(part) {
                    *t += p;
                }
            },
        )?;

        let mut out: Vec<Result<(NuEvaluation, DVector<f64>)>> = Vec::with_capacity(nus.len());
        let mut a = 0;
        for (k, &nu) in nus.iter().enumerate() {
            let w = std::mem::replace(&mut weights[k], Err(BridgeError::Numerical(String::new())));
            out.push(w.map(|w| {
                let mean_w: DVector<f64> = means.column(a).into_owned();
                let fitted_mean = self.whitening.color_vec(&mean_w);
                let ev = NuEvaluation {
                    nu,
                    residual_sq: (&self.y - &fitted_mean).norm_squared(),
                    fitted_mean,
                    fitted_cov_trace: w.within_trace + spread[a],
                    log_marginal_hat: w.log_marginal_hat,
                    ess: w.ess,
                    weights: w.weights,
                };
                a += 1;
                (ev, mean_w)
            }));
        }
        Ok(out)
    }

    /// Weights, fitted values and `tr(Var(X beta | y))` at one value of `nu`.
    pub fn evaluate(&self, nu: f64) -> Result<NuEvaluation> {
        self.evaluate_many(&[nu])?.pop().expect("one entry")
    }

    /// `E[beta | y, t_j]` from the spectrum.
    fn conditional_beta(&self, j: usize, s: &DrawSpectrum, nu: f64) -> DVector<f64> {
        let r = s.rotate(|l| 1.0 / (1.0 + nu * l));
        let mut b = &self.xw_t * r;
        for (bi, t) in b.iter_mut().zip(self.draws.row(j)) {
            *bi *= nu / t;
        }
        b
    }

    /// `Var(beta | y, t_j) = nu Lambda - nu^2 Lambda X_w^T Q diag(1/(1 + nu lambda)) Q^T X_w Lambda`.
    fn conditional_beta_cov(&self, j: usize, s: &DrawSpectrum, nu: f64) -> DMatrix<f64> {
        let row = self.draws.row(j);
        let scales: Vec<f64> = s.eig.iter().map(|l| (1.0 + nu * l).sqrt().recip()).collect();
        let mut w = &self.xw_t * scale_columns(&s.q, &scales);
        for (i, mut r) in w.row_iter_mut().enumerate() {
            r *= nu / row[i];
        }
        let mut cov = &w * w.transpose() * -1.0;
        for (i, t) in row.iter().enumerate() {
            cov[(i, i)] += nu / t;
        }
        cov
    }

    pub fn summary(&self, nu: f64, opts: SummaryOptions) -> Result<PosteriorSummary> {
        let (ev, mean_w) = self.evaluate_many_whitened(&[nu])?.pop().expect("one entry")?;
        let n = self.n();
        let p = self.p();
        let weights = &ev.weights;
        type Parts = (DVector<f64>, Option<DMatrix<f64>>, Option<DMatrix<f64>>);
        let (beta_mean, fitted_cov_w, second) = if self.null_fit {
            (
                DVector::zeros(p),
                opts.fitted_cov.then(|| DMatrix::zeros(n, n)),
                opts.beta_second_moment.then(|| {
                    let jn = self.draws.rows() as f64;
                    DMatrix::from_diagonal(&DVector::from_fn(p, |i, _| {
                        nu * self.draws.column(i).map(|t| 1.0 / t).sum::<f64>() / jn
                    }))
                }),
            )
        } else {
            chunked_reduce(
                self.draws.rows(),
                || -> Parts {
                    (
                        DVector::zeros(p),
                        opts.fitted_cov.then(|| DMatrix::zeros(n, n)),
                        opts.beta_second_moment.then(|| DMatrix::zeros(p, p)),
                    )
                },
                |acc, j| {
                    let wj = weights[j];
                    if wj < NEGLIGIBLE_WEIGHT {
                        return Ok(());
                    }
                    let s = self.spectrum(j)?;
                    let b = self.conditional_beta(j, &s, nu);
                    acc.0.axpy(wj, &b, 1.0);
                    if let Some(f) = acc.1.as_mut() {
                        let g: Vec<f64> = s.eig.iter().map(|l| nu * l / (1.0 + nu * l)).collect();
                        f.gemm(wj, &scale_columns(&s.q, &g), &s.q.transpose(), 1.0);
                        let d = s.rotate(|l| nu * l / (1.0 + nu * l)) - &mean_w;
                        f.ger(wj, &d, &d, 1.0);
                    }
                    if let Some(m) = acc.2.as_mut() {
                        *m += self.conditional_beta_cov(j, &s, nu) * wj;
                        m.ger(wj, &b, &b, 1.0);
                    }
                    Ok(())
                },
                |total, part| {
                    total.0 += part.0;
                    if let (Some(t), Some(p)) = (total.1.as_mut(), part.1) {
                        *t += p;
                    }
                    if let (Some(t), Some(p)) = (total.2.as_mut(), part.2) {
                        *t += p;
                    }
                },
            )?
        };
        let mut second = second;
        if let Some(m) = second.as_mut() {
            symmetrize(m);
        }
        Ok(PosteriorSummary {
            nu,
            fitted_mean: &self.x * &beta_mean,
            beta_mean,
            fitted_cov: fitted_cov_w.map(|f| self.whitening.color_sym(&f)),
            fitted_cov_trace: ev.fitted_cov_trace,
            beta_second_moment: second,
            log_marginal_hat: ev.log_marginal_hat,
            ess: ev.ess,
            low_ess: ev.ess < ess_warning_threshold(self.draws.rows()),
            noise_sigma2: self.noise_sigma2,
            weights: ev.weights,
        })
    }
}

/// Per-draw output of the direct route.
struct DirectDraw {
    log_p: f64,
    log_det: f64,
    fitted: DVector<f64>,
    beta: DVector<f64>,
    trace: f64,
}

/// Fixed-`nu` summary with one Cholesky factorisation of `nu V` per draw, plus
/// `log det(nu V_j)` for every draw.
fn direct_summary(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    draws: &LatentDraws,
    opts: SummaryOptions,
) -> Result<(PosteriorSummary, Vec<f64>)> {
    check_data(x, y)?;
    cfg.validate(x.nrows())?;
    check_draws(cfg.alpha, x.ncols(), draws)?;
    let (n, p) = (x.nrows(), x.ncols());
    let nu = cfg.nu;
    let sigma = cfg.noise.matrix(n);
    let null_fit = p == 0 || x.iter().all(|v| *v == 0.0);
    let per_draw: Vec<DirectDraw> = (0..draws.rows())
        .into_par_iter()
        .map(|j| {
            let f = factor_draw(x, y, &sigma, nu, draws.row(j))?;
            Ok(DirectDraw {
                log_p: f.log_p,
                log_det: f.log_det,
                fitted: f.fitted_mean(nu),
                beta: f.beta_mean(nu),
                trace: if null_fit { 0.0 } else { f.fitted_cov_trace(&sigma)? },
            })
        })
        .collect::<Result<_>>()?;
    let log_p: Vec<f64> = per_draw.iter().map(|d| d.log_p).collect();
    let w = normalize_log_weights(&log_p)
        .ok_or_else(|| BridgeError::Numerical(format!("all conditional likelihoods vanished at nu = {nu}")))?;
    let mut beta_mean = DVector::zeros(p);
    let mut mean_mu = DVector::zeros(n);
    let mut within = 0.0;
    for (wj, d) in w.weights.iter().zip(&per_draw) {
        beta_mean.axpy(*wj, &d.beta, 1.0);
        mean_mu.axpy(*wj, &d.fitted, 1.0);
        within += wj * d.trace;
    }
    let between: f64 = w
        .weights
        .iter()
        .zip(&per_draw)
        .map(|(wj, d)| wj * (&d.fitted - &mean_mu).norm_squared())
        .sum();

    let mut fitted_cov = opts.fitted_cov.then(|| DMatrix::zeros(n, n));
    let mut second = opts.beta_second_moment.then(|| DMatrix::zeros(p, p));
    if opts.fitted_cov || opts.beta_second_moment {
        for (j, (wj, d)) in w.weights.iter().zip(&per_draw).enumerate() {
            if *wj < NEGLIGIBLE_WEIGHT {
                continue;
            }
            let f = factor_draw(x, y, &sigma, nu, draws.row(j))?;
            if let Some(fc) = fitted_cov.as_mut().filter(|_| !null_fit) {
                *fc += f.fitted_cov(&sigma)? * *wj;
                let dev = &d.fitted - &mean_mu;
                fc.ger(*wj, &dev, &dev, 1.0);
            }
            if let Some(m) = second.as_mut() {
                *m += f.beta_cov(nu)? * *wj;
                m.ger(*wj, &d.beta, &d.beta, 1.0);
            }
        }
    }
    if let Some(m) = fitted_cov.as_mut() {
        symmetrize(m);
    }
    if let Some(m) = second.as_mut() {
        symmetrize(m);
    }
    let log_dets = per_draw.iter().map(|d| d.log_det).collect();
    let summary = PosteriorSummary {
        nu,
        fitted_mean: x * &beta_mean,
        beta_mean,
        fitted_cov,
        fitted_cov_trace: within + between,
        beta_second_moment: second,
        log_marginal_hat: w.log_sum - (draws.rows() as f64).ln(),
        ess: w.ess,
        low_ess: w.ess < ess_warning_threshold(draws.rows()),
        noise_sigma2: cfg.noise.scalar_variance(),
        weights: w.weights,
    };
    Ok((summary, log_dets))
}

/// Posterior summary at `cfg.nu` with one Cholesky factorisation of `nu V` per draw.
pub fn posterior_summary_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    draws: &LatentDraws,
    opts: SummaryOptions,
) -> Result<PosteriorSummary> {
    direct_summary(x, y, cfg, draws, opts).map(|(s, _)| s)
}

/// Posterior summary at `cfg.nu`, including the full fitted covariance.
pub fn posterior_summary(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    draws: &LatentDraws,
) -> Result<PosteriorSummary> {
    posterior_summary_with(
        x,
        y,
        cfg,
        draws,
        SummaryOptions {
            fitted_cov: true,
            beta_second_moment: false,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    /// `E_T[(2 pi)^(-n/2) det(nu X Lambda_T X^T + Sigma)^(-1/2)]`, estimated on the draws.
    pub c_const: f64,
    pub log_c_const: f64,
    /// `K_i = E[T^-i]`, `i = 1..4`.
    pub k_moments: [f64; 4],
    /// `||Sigma^-1||^2 ||X||^2 ||y||^2`.
    pub big_m: f64,
    pub m2: f64,
    pub big_c: f64,
    /// Bound on the variance of the marginal estimator.
    pub m_bound: f64,
    /// Bounds on the variances of the marginal estimator and of the norms of the
    /// first and second moment estimators, with their logarithms.
    pub var_bounds: [f64; 3],
    pub log_var_bounds: [f64; 3],
    /// Smallest `log det(nu V_j) - log det(Sigma)` over draws.
    pub min_log_det_excess: f64,
}

pub fn regression_diagnostics(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &ModelConfig,
    draws: &LatentDraws,
) -> Result<RegressionDiagnostics> {
    let (summary, log_dets) = direct_summary(
        x,
        y,
        cfg,
        draws,
        SummaryOptions {
            fitted_cov: false,
            beta_second_moment: true,
        },
    )?;
    let n = x.nrows() as f64;
    let p = x.ncols() as f64;
    let j = draws.rows() as f64;
    let nu = cfg.nu;

    let whitening = Whitening::new(&cfg.noise)?;
    let log_det_sigma = 2.0 * whitening.log_det(x.nrows());
    let excess: Vec<f64> = log_dets.iter().map(|d| d - log_det_sigma).collect();
    let log_c: Vec<f64> = excess.iter().map(|e| -0.5 * (n * LN_2PI + e + log_det_sigma)).collect();
    let log_c_const = normalize_log_weights(&log_c)
        .map(|w| w.log_sum - j.ln())
        .ok_or_else(|| BridgeError::Numerical("normalising constant underflowed".into()))?;

    let index = cfg.stable_index()?;
    let mut k_moments = [0.0; 4];
    for (i, k) in k_moments.iter_mut().enumerate() {
        *k = tilted_moment_oracle(index, -((i + 1) as f64))?;
    }
    let [k1, k2, k3, k4] = k_moments;

    let sigma = cfg.noise.matrix(x.nrows());
    let sigma_inv_norm = 1.0 / SymmetricEigen::new(sigma.clone()).eigenvalues.min();
    let x_norm = x.clone().singular_values().max();
    let big_m = sigma_inv_norm.powi(2) * x_norm.powi(2) * y.norm_squared();
    let m2 = nu * p * k1 + big_m * p * k2;
    let big_c = p * k2
        + 2.0 * big_m * p * k3
        + big_m * p * (p - 1.0) / 2.0 * k2 * k1
        + big_m * big_m * k4
        + big_m * big_m * p * (p - 1.0) * k2 * k2;

    let beta_norm = summary.beta_mean.norm();
    let second = summary.beta_second_moment.expect("requested");
    let second_norm = if p > 0.0 {
        SymmetricEigen::new(second).eigenvalues.amax()
    } else {
        0.0
    };
    let yw = whitening.whiten_vec(y).norm_squared();

    let log_base = -j.ln() - n * LN_2PI - log_det_sigma;
    let log_tail = yw - 2.0 * log_c_const;
    let mean_inner = nu * nu * p * k2 * big_m + beta_norm * beta_norm + 2.0 * p * nu * k1 * big_m.sqrt() * beta_norm;
    let second_inner = big_c + 2.0 * m2 * second_norm + second_norm * second_norm;
    let log_var_bounds = [
        log_base,
        log_base + log_tail + mean_inner.ln(),
        log_base + log_tail + second_inner.ln(),
    ];
    Ok(RegressionDiagnostics {
        c_const: log_c_const.exp(),
        log_c_const,
        k_moments,
        big_m,
        m2,
        big_c,
        m_bound: log_var_bounds[0].exp(),
        var_bounds: log_var_bounds.map(f64::exp),
        log_var_bounds,
        min_log_det_excess: excess.iter().copied().fold(f64::INFINITY, f64::min),
    })
}
